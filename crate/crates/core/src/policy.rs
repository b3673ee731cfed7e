//! Desk-scale action policy: a frozen random backbone producing the
//! conditioning vector, and a small diffusion-style denoiser over the 7-D
//! action with FiLM conditioning, exact reverse-mode gradients and a
//! closed-form head fit.
//!
//! The conditioning vector enters twice: it is added to the residual stream
//! after the input layer and it modulates every block through FiLM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::drift::{drift_loss, DriftDifferentiable, ACTION_DIM};
use crate::error::{ensure_len, Error, Result};
use crate::linalg::{solve_spd, DenseMatrix};
use crate::nn::Linear;
use crate::quant::QuantizableModel;
use crate::Matrix;

/// Observation layout: 7 chain angles, pose `(x, y, φ)`, target `(x, y)`.
pub const OBS_DIM: usize = 12;
pub const LAYER_INPUT: &str = "input";
pub const LAYER_COND: &str = "cond";
pub const LAYER_HEAD: &str = "head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub time_features: usize,
    pub denoise_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Actions are normalized by this before diffusion.
    pub action_scale: f64,
    /// Number of backbone channels with a large output gain.
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    pub film_alpha_std: f64,
    pub film_beta_std: f64,
    /// Initial weight scale of each block's output layer relative to `1/sqrt(d)`.
    pub residual_gain: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            blocks: 6,
            time_features: 8,
            denoise_steps: 8,
            beta_start: 0.05,
            beta_end: 0.6,
            action_scale: 0.2,
            outlier_channels: 2,
            outlier_gain: 7.0,
            film_alpha_std: 0.3,
            film_beta_std: 0.5,
            residual_gain: 0.1,
        }
    }
}

/// Frozen feature extractor `z = gain ⊙ tanh(W obs + b + p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneStub {
    pub w: Matrix,
    pub b: Vec<f64>,
    /// Fixed instruction embedding `p`.
    pub instr: Vec<f64>,
    pub gain: Vec<f64>,
}

impl BackboneStub {
    pub fn random(cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let w = gaussian_matrix(d, OBS_DIM, (2.0 / OBS_DIM as f64).sqrt(), rng);
        let b = gaussian_vec(d, 0.3, rng);
        let instr = gaussian_vec(d, 0.2, rng);
        let mut gain = vec![1.0; d];
        // Spread the outlier channels across the vector.
        for k in 0..cfg.outlier_channels.min(d) {
            let idx = (k * 37 + 5) % d;
            gain[idx] = cfg.outlier_gain * (1.0 + 0.15 * k as f64);
        }
        Self { w, b, instr, gain }
    }

    pub fn out_dim(&self) -> usize {
        self.b.len()
    }

    pub fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        ensure_len("backbone observation", self.w.cols(), obs.len())?;
        let pre = self.w.matvec(obs)?;
        let z: Vec<f64> = pre
            .iter()
            .zip(&self.b)
            .zip(&self.instr)
            .zip(&self.gain)
            .map(|(((&p, &b), &i), &g)| g * (p + b + i).tanh())
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backbone output".into()));
        }
        Ok(z)
    }
}

/// Linear β schedule with cumulative products `ᾱ_t`, `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, start: f64, end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = vec![1.0];
        for b in &betas {
            let last = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(last * (1.0 - b));
        }
        Self { betas, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }
}

/// Residual FiLM block: `h ← h + fc2 · tanh(fc1·h ⊙ (1 + α⊙c) + β⊙c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub fc1: Linear<f64>,
    pub fc2: Linear<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Observer of intermediate activations during a forward pass.
pub trait Tap {
    /// Called with the raw input of every dense layer.
    fn layer_input(&mut self, _layer: &Linear<f64>, _x: &[f64]) {}
    /// Called with the conditioning interface output `c`.
    fn interface(&mut self, _c: &[f64]) {}
}

impl Tap for () {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserPolicy {
    pub config: PolicyConfig,
    pub backbone: BackboneStub,
    pub input: Linear<f64>,
    pub cond: Linear<f64>,
    pub blocks: Vec<Block>,
    pub head: Linear<f64>,
    pub schedule: NoiseSchedule,
}

/// One calibration sample for the drift loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSample {
    pub x_t: [f64; ACTION_DIM],
    /// Denoising step in `1..=N`.
    pub t: usize,
    pub z: Vec<f64>,
    pub eps: [f64; ACTION_DIM],
}

pub type DiffusionBatch = Vec<DiffusionSample>;

/// Activations kept for the backward pass.
struct Trace {
    in0: Vec<f64>,
    c: Vec<f64>,
    /// Residual stream entering each block, then the final one.
    hs: Vec<Vec<f64>>,
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFit {
    pub samples: usize,
    /// Ridge actually used (raised when the first attempt was singular).
    pub ridge: f64,
    pub residual_rms: f64,
}

impl DenoiserPolicy {
    /// Seeded random network; weights are rounded to `f32` so the stored
    /// model round-trips through single-precision blobs.
    pub fn random(config: PolicyConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let backbone = BackboneStub::random(&config, &mut rng);
        let input = dense_layer(LAYER_INPUT, d, ACTION_DIM + config.time_features, &mut rng)?;
        let cond = dense_layer(LAYER_COND, d, backbone.out_dim(), &mut rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            blocks.push(Block {
                fc1: dense_layer(&format!("blocks.{i}.fc1"), d, d, &mut rng)?,
                fc2: scaled(dense_layer(&format!("blocks.{i}.fc2"), d, d, &mut rng)?, config.residual_gain)?,
                alpha: round_f32(gaussian_vec(d, config.film_alpha_std, &mut rng)),
                beta: round_f32(gaussian_vec(d, config.film_beta_std, &mut rng)),
            });
        }
        let head = dense_layer(LAYER_HEAD, ACTION_DIM, d, &mut rng)?;
        let schedule = NoiseSchedule::linear(config.denoise_steps, config.beta_start, config.beta_end);
        let mut backbone = backbone;
        backbone.w = backbone.w.map(|v| v as f32 as f64);
        backbone.b = round_f32(backbone.b);
        backbone.instr = round_f32(backbone.instr);
        Ok(Self {
            config,
            backbone,
            input,
            cond,
            blocks,
            head,
            schedule,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn time_features(&self, t: usize) -> Vec<f64> {
        let n = self.config.time_features;
        let tau = t as f64 / self.schedule.steps().max(1) as f64;
        (0..n)
            .map(|k| {
                let freq = std::f64::consts::PI * (1u64 << (k / 2)) as f64 / 2.0;
                if k % 2 == 0 {
                    (freq * tau).sin()
                } else {
                    (freq * tau).cos()
                }
            })
            .collect()
    }

    pub fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.backbone.encode(obs)
    }

    /// Conditioning interface `c = cond(z)`.
    pub fn condition(&self, z: &[f64], tap: &mut impl Tap) -> Result<Vec<f64>> {
        tap.layer_input(&self.cond, z);
        let c = self.cond.forward(z)?;
        tap.interface(&c);
        Ok(c)
    }

    fn run(&self, x_t: &[f64], t: usize, c: &[f64], tap: &mut impl Tap, keep: bool) -> Result<(Vec<f64>, Option<Trace>)> {
        ensure_len("denoiser x_t", ACTION_DIM, x_t.len())?;
        let mut in0 = x_t.to_vec();
        in0.extend(self.time_features(t));
        tap.layer_input(&self.input, &in0);
        let mut h = self.input.forward(&in0)?;
        ensure_len("denoiser conditioning", h.len(), c.len())?;
        for (hi, ci) in h.iter_mut().zip(c) {
            *hi += ci;
        }
        let mut trace = keep.then(|| Trace {
            in0: in0.clone(),
            c: c.to_vec(),
            hs: Vec::new(),
            us: Vec::new(),
            vs: Vec::new(),
            x0: Vec::new(),
        });
        for b in &self.blocks {
            tap.layer_input(&b.fc1, &h);
            let u = b.fc1.forward(&h)?;
            let v: Vec<f64> = u
                .iter()
                .zip(c)
                .zip(b.alpha.iter().zip(&b.beta))
                .map(|((&ui, &ci), (&a, &be))| (ui * (1.0 + a * ci) + be * ci).tanh())
                .collect();
            tap.layer_input(&b.fc2, &v);
            let r = b.fc2.forward(&v)?;
            if let Some(tr) = trace.as_mut() {
                tr.hs.push(h.clone());
                tr.us.push(u);
                tr.vs.push(v);
            }
            for (hi, ri) in h.iter_mut().zip(r) {
                *hi += ri;
            }
        }
        tap.layer_input(&self.head, &h);
        let x0 = self.head.forward(&h)?;
        if let Some(tr) = trace.as_mut() {
            tr.hs.push(h);
            tr.x0 = x0.clone();
        }
        Ok((x0, trace))
    }

    /// Raw sample prediction `x̂₀(x_t, t, c)` in normalized action units.
    pub fn predict_x0(&self, x_t: &[f64], t: usize, c: &[f64], tap: &mut impl Tap) -> Result<Vec<f64>> {
        Ok(self.run(x_t, t, c, tap, false)?.0)
    }

    /// Final residual-stream features feeding the head.
    pub fn head_features(&self, x_t: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        let (_, tr) = self.run(x_t, t, c, &mut (), true)?;
        Ok(tr.expect("trace requested").hs.pop().expect("final features"))
    }

    fn eps_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 || t > self.schedule.steps() {
            return Err(Error::Config(format!("denoising step {t} outside 1..={}", self.schedule.steps())));
        }
        let ab = self.schedule.alpha_bar[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `ε̂ = (x_t − √ᾱ x̂₀) / √(1 − ᾱ)`
    pub fn predict_eps(&self, x_t: &[f64], t: usize, z: &[f64]) -> Result<Vec<f64>> {
        let (sa, sb) = self.eps_coefficients(t)?;
        let c = self.condition(z, &mut ())?;
        let x0 = self.predict_x0(x_t, t, &c, &mut ())?;
        Ok(x_t.iter().zip(&x0).map(|(&x, &p)| (x - sa * p) / sb).collect())
    }

    /// Deterministic DDIM sampling from seeded Gaussian noise.
    pub fn denoise_action_traced(&self, z: &[f64], seed: u64, tap: &mut impl Tap) -> Result<[f64; ACTION_DIM]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..ACTION_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = self.condition(z, tap)?;
        for t in (1..=self.schedule.steps()).rev() {
            let (sa, sb) = self.eps_coefficients(t)?;
            let x0: Vec<f64> = self
                .predict_x0(&x, t, &c, tap)?
                .into_iter()
                .map(|v| v.clamp(-1.0, 1.0))
                .collect();
            let prev = self.schedule.alpha_bar[t - 1];
            let (pa, pb) = (prev.sqrt(), (1.0 - prev).sqrt());
            x = x
                .iter()
                .zip(&x0)
                .map(|(&xi, &p)| {
                    let eps = (xi - sa * p) / sb;
                    pa * p + pb * eps
                })
                .collect();
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::DenoiseAborted { step: t });
            }
        }
        let mut a = [0.0; ACTION_DIM];
        for (ai, xi) in a.iter_mut().zip(&x) {
            *ai = self.config.action_scale * xi;
        }
        Ok(a)
    }

    pub fn denoise_action(&self, z: &[f64], seed: u64) -> Result<[f64; ACTION_DIM]> {
        self.denoise_action_traced(z, seed, &mut ())
    }

    /// Drift-weighted loss of the batch.
    pub fn drift_loss(&self, batch: &[DiffusionSample], s_hat: &[f64]) -> Result<f64> {
        let mut pred = Vec::with_capacity(batch.len());
        let mut target = Vec::with_capacity(batch.len());
        for s in batch {
            pred.push(self.predict_eps(&s.x_t, s.t, &s.z)?);
            target.push(s.eps.to_vec());
        }
        drift_loss(&pred, &target, s_hat)
    }

    fn check_differentiable(&self) -> Result<()> {
        for l in self.layers() {
            if !l.is_plain() {
                return Err(Error::UnsupportedLayer {
                    layer: l.name().to_string(),
                    reason: "rotation, activation quantization or post-affine present".into(),
                });
            }
        }
        Ok(())
    }

    /// Exact gradients of the drift loss with respect to every dense weight.
    pub fn backprop_grads(&self, batch: &[DiffusionSample], s_hat: &[f64]) -> Result<Vec<(String, Matrix)>> {
        ensure_len("backprop s_hat", ACTION_DIM, s_hat.len())?;
        if batch.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        self.check_differentiable()?;
        let mut grads: Vec<(String, Matrix)> = self
            .layers()
            .iter()
            .map(|l| (l.name().to_string(), DenseMatrix::zeros(l.out_dim(), l.in_dim())))
            .collect();
        let nb = self.blocks.len();
        // Layer order: input, cond, blocks.*.fc1/fc2, head.
        let idx_block = |b: usize, second: bool| 2 + 2 * b + usize::from(second);
        let idx_head = 2 + 2 * nb;
        let inv_b = 1.0 / batch.len() as f64;

        for s in batch {
            let (sa, sb) = self.eps_coefficients(s.t)?;
            let c = self.cond.forward(&s.z)?;
            let (_, tr) = self.run(&s.x_t, s.t, &c, &mut (), true)?;
            let tr = tr.expect("trace requested");
            let eps_hat: Vec<f64> = s.x_t.iter().zip(&tr.x0).map(|(&x, &p)| (x - sa * p) / sb).collect();
            let g_x0: Vec<f64> = (0..ACTION_DIM)
                .map(|j| 2.0 * s_hat[j] * (eps_hat[j] - s.eps[j]) * inv_b * (-sa / sb))
                .collect();

            add_outer(&mut grads[idx_head].1, &g_x0, &tr.hs[nb]);
            let mut g_h = self.head.weight().tr_matvec(&g_x0)?;
            let mut g_c = vec![0.0; c.len()];
            for b in (0..nb).rev() {
                let blk = &self.blocks[b];
                let (h, u, v) = (&tr.hs[b], &tr.us[b], &tr.vs[b]);
                add_outer(&mut grads[idx_block(b, true)].1, &g_h, v);
                let g_v = blk.fc2.weight().tr_matvec(&g_h)?;
                let mut g_u = vec![0.0; u.len()];
                for i in 0..u.len() {
                    let g_m = g_v[i] * (1.0 - v[i] * v[i]);
                    g_u[i] = g_m * (1.0 + blk.alpha[i] * tr.c[i]);
                    g_c[i] += g_m * (u[i] * blk.alpha[i] + blk.beta[i]);
                }
                add_outer(&mut grads[idx_block(b, false)].1, &g_u, h);
                let back = blk.fc1.weight().tr_matvec(&g_u)?;
                for (gh, bk) in g_h.iter_mut().zip(back) {
                    *gh += bk;
                }
            }
            add_outer(&mut grads[0].1, &g_h, &tr.in0);
            for (gc, gh) in g_c.iter_mut().zip(&g_h) {
                *gc += gh;
            }
            add_outer(&mut grads[1].1, &g_c, &s.z);
        }
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of layer `{id}`")));
        }
        Ok(grads)
    }

    /// Refits the head by ridge regression of the clean normalized action on
    /// the final features, over forward-noised samples `(obs, action)`.
    pub fn fit_head(&mut self, data: &[(Vec<f64>, [f64; ACTION_DIM])], ridge: f64, seed: u64) -> Result<HeadFit> {
        if data.is_empty() {
            return Err(Error::Empty("head-fit dataset"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = self.schedule.steps();
        let mut feats = Vec::with_capacity(data.len());
        let mut targets = Vec::with_capacity(data.len());
        for (obs, action) in data {
            let z = self.encode(obs)?;
            let c = self.condition(&z, &mut ())?;
            let t = rng.random_range(1..=steps);
            let (sa, sb) = self.eps_coefficients(t)?;
            let x0: Vec<f64> = action
                .iter()
                .map(|a| (a / self.config.action_scale).clamp(-1.0, 1.0))
                .collect();
            let x_t: Vec<f64> = x0
                .iter()
                .map(|&p| sa * p + sb * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>();
            let mut f = self.head_features(&x_t, t, &c)?;
            f.push(1.0);
            feats.push(f);
            targets.push(x0);
        }
        let (weight, bias, used) = ridge_solve(&feats, &targets, ridge)?;
        let weight = weight.map(|v| v as f32 as f64);
        let bias = round_f32(bias);
        let mut sq = 0.0;
        for (f, y) in feats.iter().zip(&targets) {
            for (j, &yj) in y.iter().enumerate() {
                let p = crate::linalg::dot(weight.row(j), &f[..f.len() - 1]) + bias[j];
                sq += (p - yj) * (p - yj);
            }
        }
        self.head.set_parameters(weight, bias)?;
        Ok(HeadFit {
            samples: data.len(),
            ridge: used,
            residual_rms: (sq / (data.len() * ACTION_DIM) as f64).sqrt(),
        })
    }

    pub fn layers(&self) -> Vec<&Linear<f64>> {
        let mut v = vec![&self.input, &self.cond];
        for b in &self.blocks {
            v.push(&b.fc1);
            v.push(&b.fc2);
        }
        v.push(&self.head);
        v
    }

    /// Ids of the last `n` blocks' layers plus the head.
    pub fn tail_layer_ids(&self, n: usize) -> Vec<String> {
        let nb = self.blocks.len();
        let mut ids = Vec::new();
        for b in nb.saturating_sub(n)..nb {
            ids.push(format!("blocks.{b}.fc1"));
            ids.push(format!("blocks.{b}.fc2"));
        }
        ids.push(LAYER_HEAD.to_string());
        ids
    }
}

/// Ridge regression with an unpenalized trailing intercept column. Returns
/// `(weights, intercept, ridge used)`; the ridge grows tenfold until the
/// normal matrix factorizes.
pub fn ridge_solve(feats: &[Vec<f64>], targets: &[Vec<f64>], ridge: f64) -> Result<(Matrix, Vec<f64>, f64)> {
    let p = feats.first().map_or(0, Vec::len);
    let k = targets.first().map_or(0, Vec::len);
    let mut xtx = DenseMatrix::zeros(p, p);
    let mut xty = DenseMatrix::zeros(p, k);
    for (f, y) in feats.iter().zip(targets) {
        ensure_len("ridge features", p, f.len())?;
        ensure_len("ridge targets", k, y.len())?;
        for i in 0..p {
            for j in i..p {
                xtx[(i, j)] += f[i] * f[j];
            }
            for (c, &yc) in y.iter().enumerate() {
                xty[(i, c)] += f[i] * yc;
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            xtx[(i, j)] = xtx[(j, i)];
        }
    }
    let mut lambda = ridge.max(0.0);
    for attempt in 0..12 {
        let mut a = xtx.clone();
        for i in 0..p.saturating_sub(1) {
            a[(i, i)] += lambda;
        }
        match solve_spd(&a, &xty) {
            Ok(sol) => {
                let weight = DenseMatrix::from_fn(k, p - 1, |r, c| sol[(c, r)]);
                let bias = (0..k).map(|r| sol[(p - 1, r)]).collect();
                return Ok((weight, bias, lambda));
            }
            Err(Error::NotPositiveDefinite) => {
                let next = if lambda > 0.0 { lambda * 10.0 } else { 1e-8 };
                log::warn!("ridge normal matrix singular at lambda={lambda:e} (attempt {attempt}); retrying with {next:e}");
                lambda = next;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::NotPositiveDefinite)
}

impl QuantizableModel<f64> for DenoiserPolicy {
    fn layer_ids(&self) -> Vec<String> {
        self.layers().iter().map(|l| l.name().to_string()).collect()
    }

    fn layer(&self, id: &str) -> Option<&Linear<f64>> {
        self.layers().into_iter().find(|l| l.name() == id)
    }

    fn layer_mut(&mut self, id: &str) -> Option<&mut Linear<f64>> {
        if id == LAYER_INPUT {
            return Some(&mut self.input);
        }
        if id == LAYER_COND {
            return Some(&mut self.cond);
        }
        if id == LAYER_HEAD {
            return Some(&mut self.head);
        }
        let rest = id.strip_prefix("blocks.")?;
        let (idx, which) = rest.split_once('.')?;
        let b = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        match which {
            "fc1" => Some(&mut b.fc1),
            "fc2" => Some(&mut b.fc2),
            _ => None,
        }
    }
}

impl DriftDifferentiable<f64> for DenoiserPolicy {
    type Batch = DiffusionBatch;

    fn drift_gradients(&self, batch: &Self::Batch, s_hat: &[f64]) -> Result<Vec<(String, Matrix)>> {
        self.backprop_grads(batch, s_hat)
    }
}

/// Anything that maps an observation to an action given a noise seed.
pub trait ActionPolicy: Sync {
    fn act(&self, obs: &[f64], noise_seed: u64) -> Result<[f64; ACTION_DIM]>;
}

impl ActionPolicy for DenoiserPolicy {
    fn act(&self, obs: &[f64], noise_seed: u64) -> Result<[f64; ACTION_DIM]> {
        let z = self.encode(obs)?;
        self.denoise_action(&z, noise_seed)
    }
}

/// Adds a fixed offset to every action of the wrapped policy.
pub struct Perturbed<'a, P: ?Sized> {
    pub inner: &'a P,
    pub offset: [f64; ACTION_DIM],
}

impl<P: ActionPolicy + ?Sized> ActionPolicy for Perturbed<'_, P> {
    fn act(&self, obs: &[f64], noise_seed: u64) -> Result<[f64; ACTION_DIM]> {
        let mut a = self.inner.act(obs, noise_seed)?;
        for (ai, o) in a.iter_mut().zip(&self.offset) {
            *ai += o;
        }
        Ok(a)
    }
}

fn add_outer(g: &mut Matrix, left: &[f64], right: &[f64]) {
    for (i, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for (gv, &r) in g.row_mut(i).iter_mut().zip(right) {
            *gv += l * r;
        }
    }
}

fn gaussian_vec(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let d = Normal::new(0.0, std).expect("valid std");
    DenseMatrix::from_fn(rows, cols, |_, _| d.sample(rng))
}

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn scaled(l: Linear<f64>, gain: f64) -> Result<Linear<f64>> {
    let w = l.weight().map(|v| (v * gain) as f32 as f64);
    Linear::new(l.name(), w, l.bias().to_vec())
}

fn dense_layer(name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Result<Linear<f64>> {
    let w = gaussian_matrix(out, inp, (1.0 / inp as f64).sqrt(), rng).map(|v| v as f32 as f64);
    let b = round_f32(gaussian_vec(out, 0.05, rng));
    Linear::new(name, w, b)
}
