//! File-level steps behind each subcommand, sharing one output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use drift_ptq_core::policy::DenoiserPolicy;
use drift_ptq_core::quant::{memory_report, BitWidthMap, Precision, QuantizableModel};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::CalibConfig;
use crate::container::ModelContainer;
use crate::dataset::Dataset;
use crate::error::{PipelineError, Result};
use crate::evaluate::{evaluate_variant, write_curves_csv, Evaluation};
use crate::pipeline::{
    allocate, build_fp_model, format_summary, run_stage1, run_stage2, run_stage3, snapped_variant, uniform_w4_variant,
    Allocation, Calibration, Provenance, Stage1Output, Stage2Output, Stage3Output,
};
use crate::report::{DatasetSummary, PipelineReport, Stage1Report, VariantMemory, REPORT_SCHEMA_ID};

/// Variants produced by the pipeline, in report order.
pub const VARIANTS: &[&str] = &["fp", "w4", "w4csrc", "daptq"];

/// Names of every file in the output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.jsonl")
    }
    pub fn fp_model(&self) -> PathBuf {
        self.dir.join("fp.dptq")
    }
    pub fn stage1(&self) -> PathBuf {
        self.dir.join("stage1.json")
    }
    pub fn stage2(&self) -> PathBuf {
        self.dir.join("stage2.json")
    }
    pub fn allocation(&self) -> PathBuf {
        self.dir.join("allocation.json")
    }
    pub fn stage3(&self) -> PathBuf {
        self.dir.join("stage3.json")
    }
    pub fn variants_memory(&self) -> PathBuf {
        self.dir.join("variants.json")
    }
    pub fn model(&self, variant: &str) -> PathBuf {
        self.dir.join(format!("model-{variant}.dptq"))
    }
    pub fn evaluation(&self) -> PathBuf {
        self.dir.join("evaluation.json")
    }
    pub fn evaluation_csv(&self) -> PathBuf {
        self.dir.join("evaluation.csv")
    }
    pub fn curves_csv(&self) -> PathBuf {
        self.dir.join("drift_curves.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.dir.join("timings.json")
    }
}

/// Resolved configuration plus where to read and write.
pub struct Context {
    pub config: CalibConfig,
    pub provenance: Provenance,
    pub ws: Workspace,
    /// Wall-clock seconds per step, written to a sidecar so reports stay
    /// reproducible.
    pub timings: BTreeMap<String, f64>,
}

impl Context {
    pub fn new(config: CalibConfig, overrides: Vec<(String, String)>, out_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let ws = Workspace::new(out_dir);
        std::fs::create_dir_all(&ws.dir).map_err(|e| PipelineError::io(&ws.dir, e))?;
        Ok(Self {
            provenance: Provenance::new(&config, overrides),
            config,
            ws,
            timings: BTreeMap::new(),
        })
    }

    fn timed<T>(&mut self, step: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("{step} finished in {secs:.2}s");
        self.timings.insert(step.to_string(), secs);
        Ok(out)
    }

    pub fn write_timings(&self) -> Result<()> {
        write_json(&self.ws.timings(), &self.timings)
    }

    fn provenance_value(&self, stage: &str) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(&self.provenance)?;
        v["stage"] = stage.into();
        Ok(v)
    }

    fn save_model(&self, variant: &str, stage: &str, model: DenoiserPolicy, path: &Path) -> Result<()> {
        log::info!("writing {variant} model ({})", format_summary(&model));
        ModelContainer::new(variant, model, self.provenance_value(stage)?).write(path)
    }

    fn dataset(&self) -> Result<Dataset> {
        Dataset::read(&require(&self.ws.dataset(), "dataset", "generate-data")?)
    }

    fn fp_model(&self) -> Result<DenoiserPolicy> {
        Ok(ModelContainer::read(&require(&self.ws.fp_model(), "full-precision model", "profile")?)?.model)
    }

    fn stage1(&self, consumer: &str) -> Result<Stage1Output> {
        if !self.ws.stage1().exists() {
            return Err(PipelineError::StageOrder(format!(
                "{consumer} needs stage 1 outputs ({}); run `profile` first",
                self.ws.stage1().display()
            )));
        }
        read_json(&self.ws.stage1())
    }
}

fn require(path: &Path, what: &'static str, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(PipelineError::MissingInput {
            what,
            path: path.to_path_buf(),
            producer,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::format(path.display().to_string(), e.to_string()))
}

pub fn generate_data(ctx: &mut Context) -> Result<()> {
    ctx.timed("generate-data", |ctx| {
        let ds = Dataset::generate(&ctx.config)?;
        log::info!("generated {} records over {} episodes", ds.records.len(), ds.header.episodes);
        ds.write(&ctx.ws.dataset())
    })
}

/// Stage 1: builds the FP policy and profiles drift.
pub fn profile(ctx: &mut Context) -> Result<()> {
    ctx.timed("profile", |ctx| {
        let ds = ctx.dataset()?;
        let cal = Calibration::new(&ds, &ctx.config)?;
        let (fp, head_fit) = build_fp_model(&ctx.config, &ds, &cal)?;
        log::info!(
            "head fit: action rmse {:.4} -> {:.4}",
            head_fit.rmse_before,
            head_fit.rmse_after
        );
        let out = run_stage1(&fp, head_fit, &cal, &ctx.config)?;
        log::info!("drift sensitivities ŝ = {:?}", out.drift.s_hat);
        ctx.save_model("fp-reference", "profile", fp, &ctx.ws.fp_model())?;
        write_json(&ctx.ws.stage1(), &out)
    })
}

/// Stage 2: uniform W4A8 with the folded interface compensation.
pub fn compensate(ctx: &mut Context) -> Result<()> {
    ctx.timed("compensate", |ctx| {
        let stage1 = ctx.stage1("compensate")?;
        let fp = ctx.fp_model()?;
        let ds = ctx.dataset()?;
        let cal = Calibration::new(&ds, &ctx.config)?;
        let (model, out) = run_stage2(&fp, &stage1, &cal, &ctx.config)?;
        log::info!(
            "interface mean mismatch {:.3e} -> {:.3e}",
            out.csrc.before.mean_abs_mean_diff,
            out.csrc.after.mean_abs_mean_diff
        );
        ctx.save_model("w4csrc", "compensate", model, &ctx.ws.model("w4csrc"))?;
        write_json(&ctx.ws.stage2(), &out)
    })
}

/// Stage 3, first half: the bit-width map.
pub fn allocate_step(ctx: &mut Context) -> Result<()> {
    ctx.timed("allocate", |ctx| {
        let stage1 = ctx.stage1("allocate")?;
        let fp = ctx.fp_model()?;
        let alloc = allocate(&fp, &stage1, &ctx.config)?;
        log::info!("retained at 16 bits: {:?}", alloc.retained);
        write_json(&ctx.ws.allocation(), &alloc)
    })
}

/// Stage 3, second half: the final model plus the reference variants.
pub fn quantize(ctx: &mut Context) -> Result<()> {
    ctx.timed("quantize", |ctx| {
        let stage1 = ctx.stage1("quantize")?;
        if !ctx.ws.allocation().exists() {
            return Err(PipelineError::StageOrder("quantize needs a bit-width map; run `allocate` first".into()));
        }
        let alloc: Allocation = read_json(&ctx.ws.allocation())?;
        let fp = ctx.fp_model()?;
        let ds = ctx.dataset()?;
        let cal = Calibration::new(&ds, &ctx.config)?;
        let (final_model, out) = run_stage3(&fp, &stage1, alloc, &cal, &ctx.config)?;
        ctx.save_model("daptq", "quantize", final_model, &ctx.ws.model("daptq"))?;

        let snapped = snapped_variant(&fp)?;
        let all_high = BitWidthMap::uniform(&snapped.layer_ids(), Precision::High16);
        let fp_memory = memory_report(&snapped, &all_high, ctx.config.group_size)?;
        ctx.save_model("fp", "quantize", snapped, &ctx.ws.model("fp"))?;
        let (w4, w4_memory) = uniform_w4_variant(&fp, &cal, &ctx.config)?;
        ctx.save_model("w4", "quantize", w4, &ctx.ws.model("w4"))?;
        let memory = vec![
            VariantMemory {
                variant: "fp".into(),
                memory: fp_memory,
            },
            VariantMemory {
                variant: "w4".into(),
                memory: w4_memory,
            },
            VariantMemory {
                variant: "daptq".into(),
                memory: out.memory,
            },
        ];
        write_json(&ctx.ws.variants_memory(), &memory)?;
        write_json(&ctx.ws.stage3(), &out)
    })
}

pub fn evaluate(ctx: &mut Context, variants: &[String], seeds: Option<usize>) -> Result<Evaluation> {
    ctx.timed("evaluate", |ctx| {
        let n = seeds.unwrap_or(ctx.config.eval_seeds);
        if n == 0 {
            return Err(PipelineError::Config("--seeds must be positive".into()));
        }
        let fp = ctx.fp_model()?;
        let env = ctx.config.env_spec();
        let mut evals = Vec::new();
        let mut curves = Vec::new();
        for v in variants {
            if !VARIANTS.contains(&v.as_str()) {
                return Err(PipelineError::Config(format!("unknown variant `{v}` (expected one of {VARIANTS:?})")));
            }
            let producer = if v == "w4csrc" { "compensate" } else { "quantize" };
            let path = ctx.ws.model(v);
            if !path.exists() {
                return Err(PipelineError::StageOrder(format!(
                    "variant `{v}` has no model at {}; run `{producer}` first",
                    path.display()
                )));
            }
            let q = ModelContainer::read(&path)?.model;
            let (e, c) = evaluate_variant(v, &fp, &q, &env, ctx.config.seed, n, ctx.config.horizon)?;
            log::info!(
                "{v}: mean |E_T| {:.4}, mean final pose gap {:.4}",
                e.e_t_norm.mean,
                e.final_pose_gap.mean
            );
            evals.push(e);
            curves.extend(c);
        }
        let evaluation = Evaluation {
            horizon: ctx.config.horizon,
            n_seeds: n,
            variants: evals,
            comparisons: Vec::new(),
        }
        .with_comparisons();
        write_json(&ctx.ws.evaluation(), &evaluation)?;
        evaluation.write_csv(&ctx.ws.evaluation_csv())?;
        write_curves_csv(&curves, &ctx.ws.curves_csv())?;
        Ok(evaluation)
    })
}

pub fn report(ctx: &mut Context) -> Result<PipelineReport> {
    ctx.timed("report", |ctx| {
        let ds = ctx.dataset()?;
        let stage1 = ctx.stage1("report")?;
        let stage2: Stage2Output = read_json(&require(&ctx.ws.stage2(), "stage 2 outputs", "compensate")?)?;
        let stage3: Stage3Output = read_json(&require(&ctx.ws.stage3(), "stage 3 outputs", "quantize")?)?;
        let mut memory: Vec<VariantMemory> = read_json(&require(&ctx.ws.variants_memory(), "variant memory", "quantize")?)?;
        memory.insert(
            2,
            VariantMemory {
                variant: "w4csrc".into(),
                memory: stage2.memory,
            },
        );
        let evaluation: Evaluation = read_json(&require(&ctx.ws.evaluation(), "evaluation", "evaluate")?)?;
        let report = PipelineReport {
            schema: REPORT_SCHEMA_ID.into(),
            provenance: ctx.provenance.clone(),
            dataset: DatasetSummary {
                records: ds.records.len(),
                episodes: ds.header.episodes,
                episode_steps: ds.header.episode_steps,
                spatial_bins: ds.header.spatial_bins,
                bin_histogram: ds.bin_histogram(),
                max_abs_action: ds
                    .records
                    .iter()
                    .flat_map(|r| r.action.iter())
                    .fold(0.0f64, |a, &b| a.max(b.abs())),
            },
            stage1: Stage1Report::of(&stage1),
            stage2,
            stage3,
            memory,
            evaluation,
        };
        let json = report.to_json()?;
        std::fs::write(ctx.ws.report(), json).map_err(|e| PipelineError::io(&ctx.ws.report(), e))?;
        Ok(report)
    })
}

/// Stages 1 → 2 → 3, evaluation of every variant, then the report.
pub fn run_all(ctx: &mut Context) -> Result<PipelineReport> {
    generate_data(ctx)?;
    profile(ctx)?;
    compensate(ctx)?;
    allocate_step(ctx)?;
    quantize(ctx)?;
    let variants: Vec<String> = VARIANTS.iter().map(|s| s.to_string()).collect();
    evaluate(ctx, &variants, None)?;
    let r = report(ctx)?;
    ctx.write_timings()?;
    Ok(r)
}
