//! Compensation of quantized interface activations: per-channel affine
//! correction, covariance alignment, its low-rank parameterization, folding
//! into a layer, and block-wise outlier pre-rotation.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{sym_eig, truncated_svd, DenseMatrix};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::stats::RunningMoments;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_G_MIN: f64 = 0.25;
pub const DEFAULT_G_MAX: f64 = 4.0;
pub const DEFAULT_SHRINKAGE: f64 = 0.55;
pub const DEFAULT_RANK: usize = 16;
/// Eigenvalue floor applied to covariances before matrix square roots.
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Eigenvalues below this fraction of the largest one are floored when
/// forming covariance square roots.
pub const RELATIVE_EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats<T> {
    pub mu_fp: Vec<T>,
    pub sigma_fp: Vec<T>,
    pub mu_q: Vec<T>,
    pub sigma_q: Vec<T>,
    pub epsilon: T,
}

impl<T: Scalar> ChannelStats<T> {
    pub fn new(mu_fp: Vec<T>, sigma_fp: Vec<T>, mu_q: Vec<T>, sigma_q: Vec<T>) -> Result<Self> {
        let d = mu_fp.len();
        ensure_len("ChannelStats sigma_fp", d, sigma_fp.len())?;
        ensure_len("ChannelStats mu_q", d, mu_q.len())?;
        ensure_len("ChannelStats sigma_q", d, sigma_q.len())?;
        if sigma_fp.iter().chain(&sigma_q).any(|&s| !(s >= T::zero())) {
            return Err(Error::NonFinite("negative or NaN standard deviation".into()));
        }
        Ok(Self {
            mu_fp,
            sigma_fp,
            mu_q,
            sigma_q,
            epsilon: T::lit(DEFAULT_EPSILON),
        })
    }

    pub fn from_moments(fp: &RunningMoments<T>, q: &RunningMoments<T>) -> Result<Self> {
        Self::new(fp.mean().to_vec(), fp.std()?, q.mean().to_vec(), q.std()?)
    }

    pub fn dim(&self) -> usize {
        self.mu_fp.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAffine<T> {
    pub g: Vec<T>,
    pub d: Vec<T>,
    pub g_min: T,
    pub g_max: T,
}

impl<T: Scalar> ChannelAffine<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            g: vec![T::one(); dim],
            d: vec![T::zero(); dim],
            g_min: T::lit(DEFAULT_G_MIN),
            g_max: T::lit(DEFAULT_G_MAX),
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }
}

/// `g = clip(σ_fp / (σ_q + ε), g_min, g_max)`, `d = μ_fp − g μ_q`.
pub fn channel_affine<T: Scalar>(stats: &ChannelStats<T>, g_min: T, g_max: T) -> Result<ChannelAffine<T>> {
    if !(g_min > T::zero() && g_min <= g_max) {
        return Err(Error::Config(format!("invalid gain bounds [{g_min}, {g_max}]")));
    }
    let g: Vec<T> = stats
        .sigma_fp
        .iter()
        .zip(&stats.sigma_q)
        .map(|(&sf, &sq)| (sf / (sq + stats.epsilon)).max(g_min).min(g_max))
        .collect();
    let d = stats
        .mu_fp
        .iter()
        .zip(&stats.mu_q)
        .zip(&g)
        .map(|((&mf, &mq), &gc)| mf - gc * mq)
        .collect();
    Ok(ChannelAffine { g, d, g_min, g_max })
}

pub fn apply_channel_affine<T: Scalar>(z: &[T], a: &ChannelAffine<T>) -> Result<Vec<T>> {
    ensure_len("apply_channel_affine", a.dim(), z.len())?;
    Ok(z.iter()
        .zip(&a.g)
        .zip(&a.d)
        .map(|((&x, &g), &d)| g * x + d)
        .collect())
}

/// Covariance of `g ⊙ z + d` given the covariance of `z`.
pub fn affine_covariance<T: Scalar>(sigma: &DenseMatrix<T>, a: &ChannelAffine<T>) -> Result<DenseMatrix<T>> {
    ensure_len("affine_covariance", a.dim(), sigma.rows())?;
    Ok(DenseMatrix::from_fn(sigma.rows(), sigma.cols(), |i, j| {
        a.g[i] * sigma[(i, j)] * a.g[j]
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovAlignProblem<T> {
    pub sigma_fp: DenseMatrix<T>,
    pub sigma_q: DenseMatrix<T>,
    /// Per-channel weights; the residual of entry `(i, j)` is weighted by
    /// `sqrt(w_i w_j)`.
    pub w_diag: Vec<T>,
    pub lambda_f: T,
    pub lambda_i: T,
    pub shrinkage: T,
}

impl<T: Scalar> CovAlignProblem<T> {
    pub fn new(sigma_fp: DenseMatrix<T>, sigma_q: DenseMatrix<T>) -> Result<Self> {
        if !sigma_fp.is_square() {
            return Err(Error::dims("sigma_fp square", sigma_fp.rows(), sigma_fp.cols()));
        }
        ensure_len("sigma_q rows", sigma_fp.rows(), sigma_q.rows())?;
        ensure_len("sigma_q cols", sigma_fp.cols(), sigma_q.cols())?;
        let w_diag = variance_ratio_weights(&sigma_fp, &sigma_q);
        Ok(Self {
            sigma_fp,
            sigma_q,
            w_diag,
            lambda_f: T::one(),
            lambda_i: T::zero(),
            shrinkage: T::lit(DEFAULT_SHRINKAGE),
        })
    }

    pub fn with_shrinkage(mut self, shrinkage: T) -> Self {
        self.shrinkage = shrinkage;
        self
    }

    pub fn dim(&self) -> usize {
        self.sigma_fp.rows()
    }

    /// `λ_f ‖W ⊙ (Σ_fp − M Σ_q Mᵀ)‖²_F + λ_i ‖M − I‖²_F`
    pub fn objective(&self, m: &DenseMatrix<T>) -> Result<T> {
        let colored = m.matmul(&self.sigma_q)?.matmul(&m.transpose())?;
        let resid = self.sigma_fp.sub(&colored)?;
        let d = self.dim();
        let mut fit = T::zero();
        for i in 0..d {
            for j in 0..d {
                let r = resid[(i, j)];
                fit += self.w_diag[i] * self.w_diag[j] * r * r;
            }
        }
        let reg = m.sub(&DenseMatrix::identity(d))?.frobenius_norm().powi(2);
        Ok(self.lambda_f * fit + self.lambda_i * reg)
    }
}

/// `max(r, 1/r)` with `r` the per-channel variance ratio, so channels whose
/// spread changed most under quantization weigh most.
pub fn variance_ratio_weights<T: Scalar>(sigma_fp: &DenseMatrix<T>, sigma_q: &DenseMatrix<T>) -> Vec<T> {
    let floor = T::lit(EIGEN_FLOOR);
    sigma_fp
        .diag()
        .iter()
        .zip(sigma_q.diag())
        .map(|(&f, q)| {
            let r = f.max(floor) / q.max(floor);
            r.max(T::one() / r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovAlignSolution<T> {
    /// Blended transform actually used.
    pub m: DenseMatrix<T>,
    /// Unblended whitening-coloring transform.
    pub m0: DenseMatrix<T>,
    pub objective: T,
    pub objective_identity: T,
    /// Set when `m` is the identity because the solve failed or did not
    /// improve the objective.
    pub fell_back: bool,
}

/// Closed-form alignment `M₀ = Σ_fp^{1/2} Σ_q^{−1/2}` blended toward the
/// identity by the shrinkage factor, with an identity fallback whenever the
/// blend does not lower the objective.
pub fn solve_cov_align<T: Scalar>(p: &CovAlignProblem<T>) -> Result<CovAlignSolution<T>> {
    let d = p.dim();
    let id = DenseMatrix::identity(d);
    if !(p.shrinkage >= T::zero() && p.shrinkage <= T::one()) {
        return Err(Error::Config(format!("shrinkage {} outside [0, 1]", p.shrinkage)));
    }
    let objective_identity = p.objective(&id)?;
    let fallback = |obj_id: T| CovAlignSolution {
        m: id.clone(),
        m0: id.clone(),
        objective: obj_id,
        objective_identity: obj_id,
        fell_back: true,
    };
    let m0 = match whitening_coloring(&p.sigma_fp, &p.sigma_q) {
        Ok(m0) => m0,
        Err(e) => {
            log::warn!("covariance alignment solve failed ({e}); using identity");
            return Ok(fallback(objective_identity));
        }
    };
    let s = p.shrinkage;
    let m = m0.scale(T::one() - s).add(&id.scale(s))?;
    let objective = p.objective(&m)?;
    if !(objective <= objective_identity) {
        log::warn!("covariance alignment did not improve the objective; using identity");
        return Ok(fallback(objective_identity));
    }
    Ok(CovAlignSolution {
        m,
        m0,
        objective,
        objective_identity,
        fell_back: false,
    })
}

fn whitening_coloring<T: Scalar>(sigma_fp: &DenseMatrix<T>, sigma_q: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let ef = sym_eig(&sigma_fp.symmetrized())?;
    let eq = sym_eig(&sigma_q.symmetrized())?;
    // Both sides share one floor so directions without variance map to themselves.
    let top = ef.values.first().copied().unwrap_or(T::zero()).max(eq.values.first().copied().unwrap_or(T::zero()));
    let floor = T::lit(EIGEN_FLOOR).max(top * T::lit(RELATIVE_EIGEN_FLOOR));
    let fp_half = ef.reconstruct_with(|l| l.max(floor).sqrt());
    let q_inv_half = eq.reconstruct_with(|l| T::one() / l.max(floor).sqrt());
    let m0 = fp_half.matmul(&q_inv_half)?;
    if !m0.is_finite() {
        return Err(Error::NonFinite("whitening-coloring transform".into()));
    }
    Ok(m0)
}

/// `z ↦ z + U (Vᵀ z) + d_bias`, evaluated without forming a dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankCompensation<T> {
    pub u: DenseMatrix<T>,
    pub v: DenseMatrix<T>,
    pub d_bias: Vec<T>,
}

impl<T: Scalar> LowRankCompensation<T> {
    pub fn identity(dim: usize, rank: usize) -> Self {
        Self {
            u: DenseMatrix::zeros(dim, rank),
            v: DenseMatrix::zeros(dim, rank),
            d_bias: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn is_identity(&self) -> bool {
        self.u.max_abs() == T::zero() && self.d_bias.iter().all(|&d| d == T::zero())
    }

    /// Sets `d_bias = μ − (I + UVᵀ) μ` so the mean `μ` is a fixed point.
    pub fn restore_mean(mut self, mu: &[T]) -> Result<Self> {
        let vt_mu = self.v.tr_matvec(mu)?;
        self.d_bias = self.u.matvec(&vt_mu)?.into_iter().map(|x| -x).collect();
        Ok(self)
    }

    /// Dense `I + UVᵀ`; diagnostics and tests only.
    pub fn dense(&self) -> Result<DenseMatrix<T>> {
        DenseMatrix::identity(self.dim()).add(&self.u.matmul(&self.v.transpose())?)
    }

    pub fn apply(&self, z: &[T]) -> Result<Vec<T>> {
        let vt_z = self.v.tr_matvec(z)?;
        let u_vt_z = self.u.matvec(&vt_z)?;
        Ok(z.iter()
            .zip(&u_vt_z)
            .zip(&self.d_bias)
            .map(|((&a, &b), &c)| a + b + c)
            .collect())
    }
}

/// Best rank-`r` factorization of `M − I`, singular values absorbed into `U`.
pub fn low_rank_truncate<T: Scalar>(m: &DenseMatrix<T>, r: usize) -> Result<LowRankCompensation<T>> {
    if !m.is_square() {
        return Err(Error::dims("low_rank_truncate square", m.rows(), m.cols()));
    }
    let d = m.rows();
    if r > d / 4 {
        return Err(Error::RankOutOfRange { rank: r, max: d / 4 });
    }
    let delta = m.sub(&DenseMatrix::identity(d))?;
    let svd = truncated_svd(&delta, r)?;
    let u = DenseMatrix::from_fn(d, r, |i, k| svd.u[(i, k)] * svd.s[k]);
    Ok(LowRankCompensation {
        u,
        v: svd.v,
        d_bias: vec![T::zero(); d],
    })
}

/// Folds `z ↦ (I + UVᵀ)(g ⊙ z + d) + d_bias` into `layer`: the channel affine
/// goes into the row scales and bias, the low-rank part becomes a post-affine.
pub fn fold_compensation<T: Scalar>(
    layer: &Linear<T>,
    comp: &LowRankCompensation<T>,
    affine: &ChannelAffine<T>,
) -> Result<Linear<T>> {
    ensure_len("fold_compensation affine", layer.out_dim(), affine.dim())?;
    ensure_len("fold_compensation low-rank", layer.out_dim(), comp.dim())?;
    let mut out = layer.clone();
    out.fold_row_affine(&affine.g, &affine.d)?;
    if !comp.is_identity() {
        out.set_post(comp.clone())?;
    }
    Ok(out)
}

/// Block-diagonal orthogonal input rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreRotation<T> {
    pub block_size: usize,
    pub smoothing: T,
    /// One orthogonal matrix per block; a trailing partial block is identity.
    pub blocks: Vec<DenseMatrix<T>>,
    /// Smoothed spectrum `s^(1−smoothing)` per block, descending.
    pub spectra: Vec<Vec<T>>,
}

impl<T: Scalar> PreRotation<T> {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.rows()).sum()
    }

    fn apply_blocks(&self, x: &[T], transpose: bool) -> Result<Vec<T>> {
        ensure_len("PreRotation input", self.dim(), x.len())?;
        let mut out = Vec::with_capacity(x.len());
        let mut off = 0;
        for b in &self.blocks {
            let n = b.rows();
            let seg = &x[off..off + n];
            let y = if transpose { b.tr_matvec(seg)? } else { b.matvec(seg)? };
            out.extend(y);
            off += n;
        }
        Ok(out)
    }

    /// `Rᵀ x`
    pub fn rotate(&self, x: &[T]) -> Result<Vec<T>> {
        self.apply_blocks(x, true)
    }

    /// `R x`
    pub fn unrotate(&self, x: &[T]) -> Result<Vec<T>> {
        self.apply_blocks(x, false)
    }

    /// `W · blockdiag(R)`
    pub fn fold_into_weights(&self, w: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        ensure_len("PreRotation fold", self.dim(), w.cols())?;
        let mut out = DenseMatrix::zeros(w.rows(), w.cols());
        for i in 0..w.rows() {
            let rotated = self.rotate(w.row(i))?;
            out.row_mut(i).copy_from_slice(&rotated);
        }
        Ok(out)
    }

    /// Largest `‖RᵀR − I‖_∞` over blocks.
    pub fn orthogonality_defect(&self) -> T {
        self.blocks
            .iter()
            .map(|b| {
                b.transpose()
                    .matmul(b)
                    .and_then(|p| p.sub(&DenseMatrix::identity(b.rows())))
                    .map(|d| d.max_abs())
                    .unwrap_or_else(|_| T::infinity())
            })
            .fold(T::zero(), |a, b| a.max(b))
    }
}

/// Per-block rotation `R_b = U_b H`: `U_b` are the principal axes of the
/// block covariance (ordered by the smoothed spectrum) and `H` is an
/// orthonormal Hadamard matrix (DCT-II when the block size is not a power of
/// two) that spreads any dominant axis evenly across the block's channels.
pub fn build_pre_rotation<T: Scalar>(samples: &[Vec<T>], block_size: usize, smoothing: T) -> Result<PreRotation<T>> {
    let first = samples.first().ok_or(Error::Empty("pre-rotation samples"))?;
    if block_size == 0 {
        return Err(Error::Config("block_size must be positive".into()));
    }
    if !(smoothing >= T::zero() && smoothing < T::one()) {
        return Err(Error::Config(format!("smoothing {smoothing} outside [0, 1)")));
    }
    let d = first.len();
    let mut moments = RunningMoments::new(d);
    for s in samples {
        moments.push(s)?;
    }
    let cov = moments.covariance()?;
    let mixer = mixing_matrix::<T>(block_size);
    let mut blocks = Vec::new();
    let mut spectra = Vec::new();
    let mut start = 0;
    while start < d {
        let n = block_size.min(d - start);
        if n < block_size {
            blocks.push(DenseMatrix::identity(n));
            spectra.push(vec![T::one(); n]);
            break;
        }
        let sub = DenseMatrix::from_fn(n, n, |i, j| cov[(start + i, start + j)]);
        if sub.max_abs() == T::zero() {
            blocks.push(DenseMatrix::identity(n));
            spectra.push(vec![T::zero(); n]);
        } else {
            let eig = sym_eig(&sub)?;
            let smoothed: Vec<T> = eig
                .values
                .iter()
                .map(|&s| s.max(T::zero()).powf(T::one() - smoothing))
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                smoothed[b]
                    .partial_cmp(&smoothed[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let u = DenseMatrix::from_fn(n, n, |i, k| eig.vectors[(i, order[k])]);
            blocks.push(u.matmul(&mixer)?);
            spectra.push(order.iter().map(|&k| smoothed[k]).collect());
        }
        start += n;
    }
    Ok(PreRotation {
        block_size,
        smoothing,
        blocks,
        spectra,
    })
}

/// Orthonormal matrix whose columns all have equal-magnitude entries
/// (Hadamard) or, for non-power-of-two sizes, the orthonormal DCT-II basis.
pub fn mixing_matrix<T: Scalar>(n: usize) -> DenseMatrix<T> {
    if n.is_power_of_two() {
        let mut h = DenseMatrix::from_vec(1, 1, vec![T::one()]).expect("1x1");
        while h.rows() < n {
            let m = h.rows();
            h = DenseMatrix::from_fn(2 * m, 2 * m, |i, j| {
                let v = h[(i % m, j % m)];
                if i >= m && j >= m {
                    -v
                } else {
                    v
                }
            });
        }
        h.scale(T::one() / T::lit(n as f64).sqrt())
    } else {
        let nf = T::lit(n as f64);
        DenseMatrix::from_fn(n, n, |i, k| {
            let c = if k == 0 {
                (T::one() / nf).sqrt()
            } else {
                (T::lit(2.0) / nf).sqrt()
            };
            c * (T::PI() * (T::lit(i as f64) + T::lit(0.5)) * T::lit(k as f64) / nf).cos()
        })
    }
}

/// Ratio of the largest channel standard deviation to the mean one.
pub fn channel_spread<T: Scalar>(samples: &[Vec<T>]) -> Result<T> {
    let first = samples.first().ok_or(Error::Empty("samples"))?;
    let mut m = RunningMoments::new(first.len());
    for s in samples {
        m.push(s)?;
    }
    let std = m.std()?;
    let max = std.iter().fold(T::zero(), |a, &b| a.max(b));
    let mean = std.iter().fold(T::zero(), |a, &b| a + b) / T::lit(std.len() as f64);
    Ok(max / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd(d: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DenseMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        a.matmul(&a.transpose())
            .unwrap()
            .add(&DenseMatrix::identity(d).scale(0.1))
            .unwrap()
    }

    #[test]
    fn affine_identity_when_stats_match() {
        let s = ChannelStats::new(vec![0.3_f64, -1.0], vec![1.0, 2.0], vec![0.3, -1.0], vec![1.0, 2.0]).unwrap();
        let a = channel_affine(&s, 0.25, 4.0).unwrap();
        for (g, d) in a.g.iter().zip(&a.d) {
            assert!((g - 1.0).abs() < 1e-5);
            assert!(d.abs() < 1e-5);
        }
    }

    #[test]
    fn affine_analytic_case() {
        let mut s = ChannelStats::new(vec![1.0], vec![2.0], vec![0.5], vec![1.0]).unwrap();
        s.epsilon = 0.0;
        let a = channel_affine(&s, 0.25, 4.0).unwrap();
        assert_eq!(a.g, vec![2.0]);
        assert_eq!(a.d, vec![0.0]);
    }

    #[test]
    fn affine_clips_at_upper_bound() {
        let s = ChannelStats::new(vec![3.0], vec![100.0], vec![0.5], vec![1.0]).unwrap();
        let a = channel_affine(&s, 0.25, 4.0).unwrap();
        let unclipped = 100.0 / (1.0 + s.epsilon);
        assert!(unclipped > 4.0);
        assert_eq!(a.g, vec![4.0]);
        assert_eq!(a.d, vec![3.0 - 4.0 * 0.5]);
    }

    #[test]
    fn identity_affine_application() {
        let a = ChannelAffine::identity(3);
        assert_eq!(apply_channel_affine(&[1.0, -2.0, 0.5], &a).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(apply_channel_affine(&[1.0], &a).is_err());
    }

    #[test]
    fn equal_covariances_give_identity() {
        let s = random_spd(6, 1);
        let sol = solve_cov_align(&CovAlignProblem::new(s.clone(), s).unwrap()).unwrap();
        let dev = sol.m.sub(&DenseMatrix::identity(6)).unwrap().max_abs();
        assert!(dev < 1e-8, "{dev}");
    }

    #[test]
    fn diagonal_scaling_case() {
        let q = DenseMatrix::from_diag(&[1.0, 0.5, 2.0]);
        let fp = q.scale(4.0);
        let sol = solve_cov_align(&CovAlignProblem::new(fp, q).unwrap()).unwrap();
        let expect = DenseMatrix::<f64>::identity(3).scale(1.45);
        assert!(sol.m.sub(&expect).unwrap().max_abs() < 1e-12);
        assert!(sol.m0.sub(&DenseMatrix::identity(3).scale(2.0)).unwrap().max_abs() < 1e-12);
        assert!(!sol.fell_back);
    }

    #[test]
    fn whitening_coloring_is_exact() {
        let fp = random_spd(16, 2);
        let q = random_spd(16, 3);
        let p = CovAlignProblem::new(fp.clone(), q.clone()).unwrap();
        let sol = solve_cov_align(&p).unwrap();
        let colored = sol.m0.matmul(&q).unwrap().matmul(&sol.m0.transpose()).unwrap();
        assert!(fp.sub(&colored).unwrap().frobenius_norm() <= 1e-6);
        assert!(p.objective(&sol.m).unwrap() <= p.objective(&DenseMatrix::identity(16)).unwrap());
    }

    #[test]
    fn low_rank_of_identity_is_zero() {
        let c = low_rank_truncate(&DenseMatrix::<f64>::identity(8), 2).unwrap();
        assert_eq!(c.u.max_abs(), 0.0);
        assert_eq!(c.rank(), 2);
    }

    #[test]
    fn low_rank_rank_one_exact() {
        let mut m = DenseMatrix::outer(&[1.0, 0.5, -0.2, 0.3], &[0.2, -0.1, 0.4, 0.0]);
        for i in 0..4 {
            m[(i, i)] += 1.0;
        }
        let c = low_rank_truncate(&m, 1).unwrap();
        assert!(c.dense().unwrap().sub(&m).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn low_rank_rank_limit() {
        let m = DenseMatrix::<f64>::identity(8);
        assert!(matches!(low_rank_truncate(&m, 3), Err(Error::RankOutOfRange { rank: 3, max: 2 })));
    }

    #[test]
    fn mean_restoration_fixes_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = DenseMatrix::from_fn(8, 2, |_, _| rng.random_range(-0.3..0.3));
        let v = DenseMatrix::from_fn(8, 2, |_, _| rng.random_range(-0.3..0.3));
        let mu: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let c = LowRankCompensation { u, v, d_bias: vec![0.0; 8] }.restore_mean(&mu).unwrap();
        let out = c.apply(&mu).unwrap();
        for (a, b) in out.iter().zip(&mu) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn hadamard_is_orthonormal() {
        for n in [1, 2, 4, 16, 3, 12] {
            let h = mixing_matrix::<f64>(n);
            let defect = h.transpose().matmul(&h).unwrap().sub(&DenseMatrix::identity(n)).unwrap().max_abs();
            assert!(defect < 1e-12, "n={n}");
        }
    }

    fn outlier_samples(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|c| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        if c == 3 {
                            25.0 * x
                        } else {
                            x
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn rotation_round_trip_and_orthogonality() {
        let xs = outlier_samples(200, 20, 4);
        let r = build_pre_rotation(&xs, 16, 0.15).unwrap();
        assert_eq!(r.blocks.len(), 2);
        assert_eq!(r.blocks[1], DenseMatrix::identity(4));
        assert!(r.orthogonality_defect() <= 1e-10);
        let back = r.unrotate(&r.rotate(&xs[0]).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&xs[0]) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn isotropic_block_still_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..16).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let r = build_pre_rotation(&xs, 16, 0.15).unwrap();
        assert!(r.orthogonality_defect() <= 1e-10);
    }

    #[test]
    fn zero_block_is_identity() {
        let xs = vec![vec![0.0; 16]; 10];
        let r = build_pre_rotation(&xs, 16, 0.15).unwrap();
        assert_eq!(r.blocks[0], DenseMatrix::identity(16));
    }

    #[test]
    fn rotation_reduces_outlier_spread() {
        let xs = outlier_samples(1000, 16, 6);
        let r = build_pre_rotation(&xs, 16, 0.15).unwrap();
        let rotated: Vec<Vec<f64>> = xs.iter().map(|x| r.rotate(x).unwrap()).collect();
        let before = channel_spread(&xs).unwrap();
        let after = channel_spread(&rotated).unwrap();
        assert!(after < before, "before {before} after {after}");
    }
}
