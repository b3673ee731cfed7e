//! The three calibration stages and the model variants derived from them.

use std::collections::BTreeMap;

use drift_ptq_core::csrc::{
    affine_covariance, build_pre_rotation, channel_affine, channel_spread, fold_compensation, low_rank_truncate,
    solve_cov_align, ChannelAffine, ChannelStats, CovAlignProblem, LowRankCompensation,
};
use drift_ptq_core::drift::{
    allocate_bits, drift_scores, layer_sensitivity, ActionVector, DriftProfile, LayerSensitivity, ACTION_DIM,
};
use drift_ptq_core::nn::{Linear, WeightFormat};
use drift_ptq_core::policy::{
    ActionPolicy, DenoiserPolicy, DiffusionBatch, DiffusionSample, PolicyConfig, Tap, LAYER_COND,
};
use drift_ptq_core::quant::{
    memory_report, quantize_model, BitWidthMap, MemoryReport, Precision, QuantizableModel,
};
use drift_ptq_core::sim::mix_seed;
use drift_ptq_core::stats::{AbsMax, RunningMoments};
use drift_ptq_core::{Matrix, Moments};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::CalibConfig;
use crate::dataset::{Dataset, TrajectoryRecord};
use crate::error::{PipelineError, Result};

/// Layer whose output is the conditioning interface.
pub const INTERFACE_LAYER: &str = LAYER_COND;

// Sub-seed tags.
const TAG_POLICY: u64 = 0x5101;
const TAG_HEAD: u64 = 0x5102;
const TAG_PROBE: u64 = 0x5103;
const TAG_ACT: u64 = 0x5104;
const TAG_FIT_EVAL: u64 = 0x5105;

/// Configuration and seed echoed into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: CalibConfig,
    /// `key = value` overrides applied on top of the defaults, in order.
    pub overrides: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(config: &CalibConfig, overrides: Vec<(String, String)>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
            overrides,
        }
    }
}

/// Calibration records split into the warmup prefix and the rest.
pub struct Calibration<'a> {
    pub records: Vec<&'a TrajectoryRecord>,
    pub warmup: usize,
}

impl<'a> Calibration<'a> {
    pub fn new(ds: &'a Dataset, cfg: &CalibConfig) -> Result<Self> {
        let records = ds.calibration_set(cfg.calibration_steps)?;
        if records.len() < cfg.warmup_steps + 2 {
            return Err(drift_ptq_core::Error::InsufficientSamples {
                needed: cfg.warmup_steps + 2,
                have: records.len(),
            }
            .into());
        }
        Ok(Self {
            records,
            warmup: cfg.warmup_steps,
        })
    }

    pub fn main(&self) -> &[&'a TrajectoryRecord] {
        &self.records[self.warmup..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFitReport {
    pub samples: usize,
    pub ridge: f64,
    pub residual_rms: f64,
    /// Action RMSE against the scripted controller on the calibration set.
    pub rmse_before: f64,
    pub rmse_after: f64,
}

/// Seeded random denoiser with its head fitted to the scripted controller.
pub fn build_fp_model(cfg: &CalibConfig, ds: &Dataset, cal: &Calibration) -> Result<(DenoiserPolicy, HeadFitReport)> {
    let mut policy = DenoiserPolicy::random(PolicyConfig::default(), mix_seed(cfg.seed, TAG_POLICY))?;
    let rmse_before = action_rmse(&policy, &cal.records, cfg.seed)?;
    let fit = policy.fit_head(&ds.pairs(), cfg.ridge, mix_seed(cfg.seed, TAG_HEAD))?;
    let rmse_after = action_rmse(&policy, &cal.records, cfg.seed)?;
    Ok((
        policy,
        HeadFitReport {
            samples: fit.samples,
            ridge: fit.ridge,
            residual_rms: fit.residual_rms,
            rmse_before,
            rmse_after,
        },
    ))
}

fn action_rmse(p: &DenoiserPolicy, recs: &[&TrajectoryRecord], seed: u64) -> Result<f64> {
    let sq: Vec<f64> = recs
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let a = p.act(&r.obs, mix_seed(mix_seed(seed, TAG_FIT_EVAL), i as u64))?;
            Ok(a.iter().zip(&r.action).map(|(x, y)| (x - y) * (x - y)).sum())
        })
        .collect::<Result<_, drift_ptq_core::Error>>()?;
    Ok((sq.iter().sum::<f64>() / (recs.len() * ACTION_DIM) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceStats {
    pub layer: String,
    /// Post-warmup moments of the interface output.
    pub moments: Moments,
    /// Per-channel extrema over every calibration record, warmup included.
    pub absmax: Vec<f64>,
}

impl InterfaceStats {
    pub fn covariance(&self) -> Result<Matrix> {
        Ok(self.moments.covariance()?)
    }
}

fn interface_outputs(model: &DenoiserPolicy, recs: &[&TrajectoryRecord]) -> Result<Vec<Vec<f64>>> {
    Ok(recs
        .par_iter()
        .map(|r| model.condition(&model.encode(&r.obs)?, &mut ()))
        .collect::<Result<_, drift_ptq_core::Error>>()?)
}

/// One sample at a time, in calibration order, so results do not depend on
/// the thread count.
pub fn interface_stats(model: &DenoiserPolicy, cal: &Calibration) -> Result<InterfaceStats> {
    let outs = interface_outputs(model, &cal.records)?;
    let dim = model.cond.out_dim();
    let mut moments = RunningMoments::new(dim);
    let mut absmax = AbsMax::new(dim);
    for (i, c) in outs.iter().enumerate() {
        absmax.push(c)?;
        if i >= cal.warmup {
            moments.push(c)?;
        }
    }
    Ok(InterfaceStats {
        layer: INTERFACE_LAYER.into(),
        moments,
        absmax: absmax.values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Output {
    pub seed: u64,
    pub calibration_records: usize,
    pub warmup_records: usize,
    pub head_fit: HeadFitReport,
    pub interface: InterfaceStats,
    pub drift: DriftProfile<f64>,
    pub sensitivity: LayerSensitivity<f64>,
}

/// `probe_steps` consecutive batches of post-warmup records, forward-noised
/// at seeded random steps.
pub fn probe_batches(model: &DenoiserPolicy, cal: &Calibration, cfg: &CalibConfig) -> Result<Vec<DiffusionBatch>> {
    let main = cal.main();
    let per = (main.len() / cfg.probe_steps).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, TAG_PROBE));
    let steps = model.schedule.steps();
    let mut batches = Vec::with_capacity(cfg.probe_steps);
    for chunk in main.chunks(per).take(cfg.probe_steps) {
        let mut batch = Vec::with_capacity(chunk.len());
        for r in chunk {
            let t = rng.random_range(1..=steps);
            let ab = model.schedule.alpha_bar[t];
            let mut eps = [0.0; ACTION_DIM];
            let mut x_t = [0.0; ACTION_DIM];
            for j in 0..ACTION_DIM {
                eps[j] = StandardNormal.sample(&mut rng);
                let x0 = (r.action[j] / model.config.action_scale).clamp(-1.0, 1.0);
                x_t[j] = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps[j];
            }
            batch.push(DiffusionSample {
                x_t,
                t,
                z: model.encode(&r.obs)?,
                eps,
            });
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Drift profiling on the full-precision model.
pub fn run_stage1(fp: &DenoiserPolicy, head_fit: HeadFitReport, cal: &Calibration, cfg: &CalibConfig) -> Result<Stage1Output> {
    let interface = interface_stats(fp, cal)?;
    let actions: Vec<ActionVector<f64>> = cal.records.iter().map(|r| ActionVector(r.action)).collect();
    let drift = drift_scores(&actions, &cfg.drift_params())?;
    let probes = probe_batches(fp, cal, cfg)?;
    let sensitivity = layer_sensitivity(fp, &probes, &drift.s_hat, cfg.row_reduce)?;
    Ok(Stage1Output {
        seed: cfg.seed,
        calibration_records: cal.records.len(),
        warmup_records: cal.warmup,
        head_fit,
        interface,
        drift,
        sensitivity,
    })
}

/// Largest magnitude seen at each layer's weight-side input.
#[derive(Default)]
struct RangeTap {
    absmax: BTreeMap<String, f64>,
}

impl Tap for RangeTap {
    fn layer_input(&mut self, layer: &Linear<f64>, x: &[f64]) {
        let rotated;
        let v = match layer.input_rotation().map(|r| r.rotate(x)) {
            Some(Ok(r)) => {
                rotated = r;
                &rotated[..]
            }
            _ => x,
        };
        let m = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let e = self.absmax.entry(layer.name().to_string()).or_insert(0.0);
        *e = e.max(m);
    }
}

/// Records 8-bit activation ranges from traced full-precision denoising over
/// every calibration record, warmup included.
pub fn calibrate_activations(model: &mut DenoiserPolicy, cal: &Calibration, seed: u64) -> Result<()> {
    let taps: Vec<RangeTap> = cal
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut tap = RangeTap::default();
            let z = model.encode(&r.obs)?;
            model.denoise_action_traced(&z, mix_seed(mix_seed(seed, TAG_ACT), i as u64), &mut tap)?;
            Ok(tap)
        })
        .collect::<Result<_, drift_ptq_core::Error>>()?;
    let mut total: BTreeMap<String, f64> = BTreeMap::new();
    for t in taps {
        for (k, v) in t.absmax {
            let e = total.entry(k).or_insert(0.0);
            *e = e.max(v);
        }
    }
    for (id, m) in total {
        let layer = model
            .layer_mut(&id)
            .ok_or(drift_ptq_core::Error::UnknownLayer(id.clone()))?;
        layer.set_input_absmax(m);
    }
    Ok(())
}

/// Attaches the interface pre-rotation built from post-warmup backbone features.
pub fn attach_interface_rotation(model: &mut DenoiserPolicy, cal: &Calibration, cfg: &CalibConfig) -> Result<RotationReport> {
    let zs: Vec<Vec<f64>> = cal
        .main()
        .par_iter()
        .map(|r| model.encode(&r.obs))
        .collect::<Result<_, drift_ptq_core::Error>>()?;
    let rot = build_pre_rotation(&zs, cfg.svd_block, cfg.smoothing)?;
    let rotated: Vec<Vec<f64>> = zs.iter().map(|z| rot.rotate(z)).collect::<Result<_, _>>()?;
    let report = RotationReport {
        block_size: rot.block_size,
        spread_before: channel_spread(&zs)?,
        spread_after: channel_spread(&rotated)?,
        orthogonality_defect: rot.orthogonality_defect(),
    };
    model.cond.attach_rotation(rot)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub block_size: usize,
    /// Max over mean per-channel standard deviation.
    pub spread_before: f64,
    pub spread_after: f64,
    pub orthogonality_defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchSummary {
    /// Mean over channels of `|μ_Q − μ_FP|`.
    pub mean_abs_mean_diff: f64,
    /// Mean over channels of `|σ_Q − σ_FP|`.
    pub mean_abs_std_diff: f64,
    /// `‖Σ_Q − Σ_FP‖_F`
    pub covariance_diff: f64,
}

fn mismatch(fp: &Moments, q: &Moments) -> Result<MismatchSummary> {
    let d = fp.dim() as f64;
    let (sf, sq) = (fp.std()?, q.std()?);
    Ok(MismatchSummary {
        mean_abs_mean_diff: fp.mean().iter().zip(q.mean()).map(|(a, b)| (a - b).abs()).sum::<f64>() / d,
        mean_abs_std_diff: sf.iter().zip(&sq).map(|(a, b)| (a - b).abs()).sum::<f64>() / d,
        covariance_diff: q.covariance()?.sub(&fp.covariance()?)?.frobenius_norm(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrcReport {
    pub layer: String,
    pub before: MismatchSummary,
    pub after: MismatchSummary,
    /// `1 − after/before` of the mean mismatch.
    pub mean_mismatch_reduction: f64,
    /// Fraction of channels whose own mean gap shrank by at least 90%.
    pub channels_reduced_90: f64,
    pub objective: f64,
    pub objective_identity: f64,
    pub low_rank_objective: f64,
    pub fell_back: bool,
    pub low_rank_dropped: bool,
    pub g_min_applied: f64,
    pub g_max_applied: f64,
    pub rank: usize,
    /// `‖UVᵀ‖_F`
    pub low_rank_norm: f64,
    pub affine: ChannelAffine<f64>,
}

/// Solves the interface compensation against the FP statistics and folds it
/// into the (quantized) interface layer.
pub fn compensate_interface(model: &mut DenoiserPolicy, fp_stats: &InterfaceStats, cal: &Calibration, cfg: &CalibConfig) -> Result<CsrcReport> {
    let q_stats = interface_stats(model, cal)?;
    let fp_m = &fp_stats.moments;
    let q_m = &q_stats.moments;
    let stats = ChannelStats::from_moments(fp_m, q_m)?;
    let affine = channel_affine(&stats, cfg.g_min, cfg.g_max)?;
    let sigma_fp = fp_m.covariance()?;
    let sigma_q_aff = affine_covariance(&q_m.covariance()?, &affine)?;
    let problem = CovAlignProblem::new(sigma_fp, sigma_q_aff)?.with_shrinkage(cfg.shrinkage);
    let sol = solve_cov_align(&problem)?;
    let dim = model.cond.out_dim();
    let mut comp = if sol.fell_back {
        LowRankCompensation::identity(dim, cfg.rank_r)
    } else {
        low_rank_truncate(&sol.m, cfg.rank_r)?.restore_mean(fp_m.mean())?
    };
    let low_rank_objective = problem.objective(&comp.dense()?)?;
    // Truncation can undo the improvement of the dense blend.
    let low_rank_dropped = !(low_rank_objective <= sol.objective_identity);
    if low_rank_dropped {
        log::warn!("low-rank compensation of `{INTERFACE_LAYER}` does not beat the identity; keeping the channel affine only");
        comp = LowRankCompensation::identity(dim, cfg.rank_r);
    }
    let low_rank_norm = comp.u.matmul(&comp.v.transpose())?.frobenius_norm();
    model.cond = fold_compensation(&model.cond, &comp, &affine)?;

    let post = interface_stats(model, cal)?;
    let before = mismatch(fp_m, q_m)?;
    let after = mismatch(fp_m, &post.moments)?;
    let reduced = fp_m
        .mean()
        .iter()
        .zip(q_m.mean())
        .zip(post.moments.mean())
        .filter(|((f, q), p)| (*p - *f).abs() <= 0.1 * (*q - *f).abs())
        .count();
    Ok(CsrcReport {
        layer: INTERFACE_LAYER.into(),
        mean_mismatch_reduction: reduction(before.mean_abs_mean_diff, after.mean_abs_mean_diff),
        channels_reduced_90: reduced as f64 / dim as f64,
        before,
        after,
        objective: sol.objective,
        objective_identity: sol.objective_identity,
        low_rank_objective: if low_rank_dropped { sol.objective_identity } else { low_rank_objective },
        fell_back: sol.fell_back,
        low_rank_dropped,
        g_min_applied: affine.g.iter().copied().fold(f64::INFINITY, f64::min),
        g_max_applied: affine.g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        rank: comp.rank(),
        low_rank_norm,
        affine,
    })
}

fn reduction(before: f64, after: f64) -> f64 {
    if before > 0.0 {
        1.0 - after / before
    } else {
        0.0
    }
}

fn check_stage1(stage1: &Stage1Output, cfg: &CalibConfig) -> Result<()> {
    if stage1.seed != cfg.seed || stage1.calibration_records != cfg.calibration_steps {
        return Err(PipelineError::StageOrder(
            "stage 1 outputs were produced with a different seed or calibration size".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Output {
    pub rotation: RotationReport,
    pub csrc: CsrcReport,
    pub memory: MemoryReport,
}

/// Quantizes with the initial configuration (every layer W4A8, interface
/// rotated) and folds the interface compensation.
pub fn run_stage2(fp: &DenoiserPolicy, stage1: &Stage1Output, cal: &Calibration, cfg: &CalibConfig) -> Result<(DenoiserPolicy, Stage2Output)> {
    check_stage1(stage1, cfg)?;
    let mut prepared = fp.clone();
    let rotation = attach_interface_rotation(&mut prepared, cal, cfg)?;
    calibrate_activations(&mut prepared, cal, cfg.seed)?;
    let bitmap = BitWidthMap::uniform(&prepared.layer_ids(), Precision::W4);
    let mut q = quantize_model(&prepared, &bitmap, cfg.quant_spec())?;
    let csrc = compensate_interface(&mut q, &stage1.interface, cal, cfg)?;
    let memory = memory_report(&q, &bitmap, cfg.group_size)?;
    Ok((q, Stage2Output { rotation, csrc, memory }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub retention_k: f64,
    /// Layers ranked by sensitivity, most sensitive first.
    pub eligible: Vec<String>,
    /// Trailing layers kept at 16 bits unconditionally.
    pub preserved: Vec<String>,
    pub retained: Vec<String>,
    pub bitmap: BitWidthMap,
}

/// Top `ceil(k%)` of the eligible layers go HIGH16; the preserved tail is
/// removed from ranking first.
pub fn allocate(model: &DenoiserPolicy, stage1: &Stage1Output, cfg: &CalibConfig) -> Result<Allocation> {
    let ids = model.layer_ids();
    let preserved = model.tail_layer_ids(cfg.preserved_tail_blocks);
    let eligible_ids: Vec<String> = ids.iter().filter(|id| !preserved.contains(id)).cloned().collect();
    let phi = stage1.sensitivity.subset(&eligible_ids);
    if phi.phi.len() != eligible_ids.len() {
        return Err(PipelineError::StageOrder("stage 1 sensitivities do not cover every eligible layer".into()));
    }
    let partial = allocate_bits(&phi, cfg.retention_k)?;
    let mut bitmap = BitWidthMap::uniform(&ids, Precision::High16);
    for id in &eligible_ids {
        bitmap.set(id, partial.get(id).expect("allocated"));
    }
    let retained = phi
        .ranking()
        .into_iter()
        .filter(|id| partial.get(id) == Some(Precision::High16))
        .collect();
    Ok(Allocation {
        retention_k: cfg.retention_k,
        eligible: phi.ranking(),
        preserved,
        retained,
        bitmap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Output {
    pub allocation: Allocation,
    /// Both present exactly when the interface layer ends up at W4.
    pub rotation: Option<RotationReport>,
    pub csrc: Option<CsrcReport>,
    pub memory: MemoryReport,
}

/// Re-quantizes per the allocation; a W4 interface is rotated and its
/// compensation re-solved for the final configuration.
pub fn run_stage3(fp: &DenoiserPolicy, stage1: &Stage1Output, allocation: Allocation, cal: &Calibration, cfg: &CalibConfig) -> Result<(DenoiserPolicy, Stage3Output)> {
    check_stage1(stage1, cfg)?;
    let interface_w4 = allocation.bitmap.get(INTERFACE_LAYER) == Some(Precision::W4);
    let mut prepared = fp.clone();
    let rotation = if interface_w4 {
        Some(attach_interface_rotation(&mut prepared, cal, cfg)?)
    } else {
        None
    };
    calibrate_activations(&mut prepared, cal, cfg.seed)?;
    let mut q = quantize_model(&prepared, &allocation.bitmap, cfg.quant_spec())?;
    let csrc = if interface_w4 {
        Some(compensate_interface(&mut q, &stage1.interface, cal, cfg)?)
    } else {
        None
    };
    let memory = memory_report(&q, &allocation.bitmap, cfg.group_size)?;
    Ok((
        q,
        Stage3Output {
            allocation,
            rotation,
            csrc,
            memory,
        },
    ))
}

/// Every layer snapped to 16 bits.
pub fn snapped_variant(fp: &DenoiserPolicy) -> Result<DenoiserPolicy> {
    Ok(quantize_model(fp, &BitWidthMap::uniform(&fp.layer_ids(), Precision::High16), Default::default())?)
}

/// Every layer W4A8 with calibrated activation ranges; no rotation and no
/// compensation.
pub fn uniform_w4_variant(fp: &DenoiserPolicy, cal: &Calibration, cfg: &CalibConfig) -> Result<(DenoiserPolicy, MemoryReport)> {
    let mut prepared = fp.clone();
    calibrate_activations(&mut prepared, cal, cfg.seed)?;
    let bitmap = BitWidthMap::uniform(&prepared.layer_ids(), Precision::W4);
    let q = quantize_model(&prepared, &bitmap, cfg.quant_spec())?;
    let memory = memory_report(&q, &bitmap, cfg.group_size)?;
    Ok((q, memory))
}

/// Counts of weight formats, for logging.
pub fn format_summary(model: &DenoiserPolicy) -> String {
    let mut counts = BTreeMap::new();
    for l in model.layers() {
        let k = match l.format() {
            WeightFormat::Full => "FULL",
            WeightFormat::High16 => "HIGH16",
            WeightFormat::W4 => "W4",
        };
        *counts.entry(k).or_insert(0usize) += 1;
    }
    counts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}
