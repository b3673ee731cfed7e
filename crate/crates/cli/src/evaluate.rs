//! Paired closed-loop rollouts of quantized variants against the FP policy.

use std::path::Path;

use drift_ptq_core::policy::ActionPolicy;
use drift_ptq_core::sim::{mix_seed, rollout_closed_loop, EnvSpec, RolloutReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

const TAG_EVAL: u64 = 0xE7A1;

/// Environment seed of the `i`-th evaluation episode.
pub fn rollout_seed(seed: u64, i: usize) -> u64 {
    mix_seed(mix_seed(seed, TAG_EVAL), i as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub index: usize,
    pub rollout_seed: u64,
    pub e_t_norm: f64,
    pub open_loop_e_t_norm: f64,
    pub final_pose_gap: f64,
    pub fp_final_target_distance: f64,
    pub q_final_target_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Sample standard deviation; zero for fewer than two values.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / n };
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEval {
    pub variant: String,
    pub e_t_norm: Summary,
    pub open_loop_e_t_norm: Summary,
    pub final_pose_gap: Summary,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub better: String,
    pub worse: String,
    /// Fraction of seeds where `better` has the strictly smaller `‖E_T‖`.
    pub fraction_lower_e_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub horizon: usize,
    pub n_seeds: usize,
    pub variants: Vec<VariantEval>,
    pub comparisons: Vec<PairedComparison>,
}

/// Per-step `‖Σ δe‖` curves, kept out of the JSON report.
pub struct DriftCurve {
    pub variant: String,
    pub index: usize,
    pub values: Vec<f64>,
}

pub fn evaluate_variant<F, Q>(name: &str, fp: &F, q: &Q, env: &EnvSpec, seed: u64, n_seeds: usize, horizon: usize) -> Result<(VariantEval, Vec<DriftCurve>)>
where
    F: ActionPolicy + ?Sized,
    Q: ActionPolicy + ?Sized,
{
    let reports: Vec<RolloutReport> = (0..n_seeds)
        .into_par_iter()
        .map(|i| {
            let s = rollout_seed(seed, i);
            rollout_closed_loop(fp, q, env, s, horizon)
                .map_err(|e| PipelineError::format("rollout", format!("variant `{name}`, seed index {i} ({s}): {e}")))
        })
        .collect::<Result<_>>()?;
    let seeds: Vec<SeedResult> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| SeedResult {
            index: i,
            rollout_seed: r.seed,
            e_t_norm: r.e_t_norm,
            open_loop_e_t_norm: r.open_loop_e_t_norm,
            final_pose_gap: r.final_pose_gap,
            fp_final_target_distance: r.fp_final_target_distance,
            q_final_target_distance: r.q_final_target_distance,
        })
        .collect();
    let curves = reports
        .iter()
        .enumerate()
        .map(|(i, r)| DriftCurve {
            variant: name.to_string(),
            index: i,
            values: r.drift_curve(),
        })
        .collect();
    let col = |f: fn(&SeedResult) -> f64| Summary::of(&seeds.iter().map(f).collect::<Vec<_>>());
    Ok((
        VariantEval {
            variant: name.to_string(),
            e_t_norm: col(|s| s.e_t_norm),
            open_loop_e_t_norm: col(|s| s.open_loop_e_t_norm),
            final_pose_gap: col(|s| s.final_pose_gap),
            seeds,
        },
        curves,
    ))
}

pub fn compare(better: &VariantEval, worse: &VariantEval) -> PairedComparison {
    let n = better.seeds.len().min(worse.seeds.len());
    let wins = better
        .seeds
        .iter()
        .zip(&worse.seeds)
        .filter(|(b, w)| b.e_t_norm < w.e_t_norm)
        .count();
    PairedComparison {
        better: better.variant.clone(),
        worse: worse.variant.clone(),
        fraction_lower_e_t: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
    }
}

impl Evaluation {
    pub fn variant(&self, name: &str) -> Option<&VariantEval> {
        self.variants.iter().find(|v| v.variant == name)
    }

    /// Comparisons among the standard variants that are present, in a fixed order.
    pub fn with_comparisons(mut self) -> Self {
        let pairs = [("daptq", "w4"), ("w4csrc", "w4"), ("daptq", "w4csrc"), ("fp", "daptq")];
        self.comparisons = pairs
            .iter()
            .filter_map(|(a, b)| Some(compare(self.variant(a)?, self.variant(b)?)))
            .collect();
        self
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record([
            "variant",
            "index",
            "rollout_seed",
            "e_t_norm",
            "open_loop_e_t_norm",
            "final_pose_gap",
            "fp_final_target_distance",
            "q_final_target_distance",
        ])
        .map_err(|e| csv_err(path, e))?;
        for v in &self.variants {
            for s in &v.seeds {
                w.write_record([
                    v.variant.clone(),
                    s.index.to_string(),
                    s.rollout_seed.to_string(),
                    s.e_t_norm.to_string(),
                    s.open_loop_e_t_norm.to_string(),
                    s.final_pose_gap.to_string(),
                    s.fp_final_target_distance.to_string(),
                    s.q_final_target_distance.to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| PipelineError::io(path, e))
    }
}

pub fn write_curves_csv(curves: &[DriftCurve], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["variant", "index", "step", "drift_norm"]).map_err(|e| csv_err(path, e))?;
    for c in curves {
        for (t, v) in c.values.iter().enumerate() {
            w.write_record([c.variant.clone(), c.index.to_string(), (t + 1).to_string(), v.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> PipelineError {
    PipelineError::format("csv output", format!("{}: {e}", path.display()))
}
