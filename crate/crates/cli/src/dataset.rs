//! Scripted-controller trajectories as versioned JSONL, and the spatially
//! balanced calibration subset drawn from them.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use drift_ptq_core::drift::ACTION_DIM;
use drift_ptq_core::policy::OBS_DIM;
use drift_ptq_core::sim::{expert_episode, mix_seed, ExpertController};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::CalibConfig;
use crate::error::{PipelineError, Result};

pub const DATASET_FORMAT: &str = "drift-ptq-trajectories";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub episodes: usize,
    pub episode_steps: usize,
    pub spatial_bins: usize,
    pub obs_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: usize,
    pub step: usize,
    pub obs: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<TrajectoryRecord>,
}

impl Dataset {
    pub fn generate(cfg: &CalibConfig) -> Result<Self> {
        let env = cfg.env_spec();
        let expert = ExpertController::default();
        let bins = env.bins();
        let episodes: Vec<Vec<TrajectoryRecord>> = (0..cfg.episodes)
            .into_par_iter()
            .map(|e| {
                let bin = e % bins;
                let steps = expert_episode(&env, &expert, mix_seed(cfg.seed, e as u64), bin, cfg.episode_steps)?;
                Ok(steps
                    .into_iter()
                    .enumerate()
                    .map(|(step, (s, a))| TrajectoryRecord {
                        episode: e,
                        step,
                        obs: s.observation(),
                        action: a,
                        bin,
                    })
                    .collect())
            })
            .collect::<Result<_, drift_ptq_core::Error>>()?;
        Ok(Self {
            header: DatasetHeader {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                seed: cfg.seed,
                episodes: cfg.episodes,
                episode_steps: cfg.episode_steps,
                spatial_bins: bins,
                obs_dim: OBS_DIM,
            },
            records: episodes.into_iter().flatten().collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| PipelineError::io(path, e);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n").map_err(io)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| PipelineError::format("dataset", "empty file"))?
            .map_err(|e| PipelineError::io(path, e))?;
        let header: DatasetHeader = serde_json::from_str(&first)
            .map_err(|e| PipelineError::format("dataset header", e.to_string()))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(PipelineError::format(
                "dataset header",
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| PipelineError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TrajectoryRecord = serde_json::from_str(&line)
                .map_err(|e| PipelineError::format("dataset record", format!("line {}: {e}", n + 2)))?;
            validate_record(&r, &header).map_err(|d| PipelineError::format("dataset record", format!("line {}: {d}", n + 2)))?;
            records.push(r);
        }
        if records.is_empty() {
            return Err(PipelineError::format("dataset", "no records"));
        }
        Ok(Self { header, records })
    }

    /// `(obs, action)` pairs for the head fit.
    pub fn pairs(&self) -> Vec<(Vec<f64>, [f64; ACTION_DIM])> {
        self.records.iter().map(|r| (r.obs.clone(), r.action)).collect()
    }

    pub fn bin_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.header.spatial_bins];
        for r in self.records.iter().filter(|r| r.step == 0) {
            h[r.bin] += 1;
        }
        h
    }

    /// `n` records, evenly spaced within each bin and interleaved across
    /// bins so every prefix (the warmup in particular) stays balanced.
    pub fn calibration_set(&self, n: usize) -> Result<Vec<&TrajectoryRecord>> {
        let bins = self.header.spatial_bins;
        let mut by_bin: Vec<Vec<&TrajectoryRecord>> = vec![Vec::new(); bins];
        for r in &self.records {
            by_bin[r.bin].push(r);
        }
        let counts: Vec<usize> = (0..bins).map(|b| n / bins + usize::from(b < n % bins)).collect();
        for (pool, &c) in by_bin.iter().zip(&counts) {
            if pool.len() < c {
                return Err(drift_ptq_core::Error::InsufficientSamples {
                    needed: c,
                    have: pool.len(),
                }
                .into());
            }
        }
        let picked: Vec<Vec<&TrajectoryRecord>> = by_bin
            .iter()
            .zip(&counts)
            .map(|(pool, &c)| (0..c).map(|k| pool[k * pool.len() / c]).collect())
            .collect();
        let mut out = Vec::with_capacity(n);
        for k in 0..counts.iter().copied().max().unwrap_or(0) {
            for p in &picked {
                if let Some(r) = p.get(k) {
                    out.push(*r);
                }
            }
        }
        Ok(out)
    }
}

fn validate_record(r: &TrajectoryRecord, h: &DatasetHeader) -> std::result::Result<(), String> {
    if r.obs.len() != h.obs_dim {
        return Err(format!("observation has {} features, expected {}", r.obs.len(), h.obs_dim));
    }
    if r.bin >= h.spatial_bins {
        return Err(format!("bin {} out of range", r.bin));
    }
    if !r.action.iter().chain(&r.obs).all(|v| v.is_finite()) {
        return Err("non-finite value".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CalibConfig {
        CalibConfig {
            episodes: 24,
            episode_steps: 8,
            calibration_steps: 60,
            warmup_steps: 12,
            seed: 5,
            ..CalibConfig::default()
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let ds = Dataset::generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        ds.write(&p).unwrap();
        assert_eq!(Dataset::read(&p).unwrap(), ds);
    }

    #[test]
    fn calibration_prefix_is_balanced() {
        let ds = Dataset::generate(&small()).unwrap();
        let cal = ds.calibration_set(60).unwrap();
        assert_eq!(cal.len(), 60);
        for chunk in cal.chunks(6) {
            let mut bins: Vec<usize> = chunk.iter().map(|r| r.bin).collect();
            bins.sort();
            assert_eq!(bins, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let ds = Dataset::generate(&small()).unwrap();
        ds.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replace("\"bin\":0", "\"bin\":9");
        std::fs::write(&p, text).unwrap();
        assert!(Dataset::read(&p).is_err());
    }
}
