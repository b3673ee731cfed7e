//! Drift sensitivity: virtual-chain kinematics over action dimensions, the
//! damped pseudo-inverse of its Jacobian, the drift-weighted loss and the
//! gradient-based layer ranking that drives bit allocation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{solve_spd, DenseMatrix};
use crate::quant::{BitWidthMap, Precision};
use crate::scalar::Scalar;

pub const ACTION_DIM: usize = 7;
/// Planar components `(x, y, θ)`.
pub const PLANAR_DIM: usize = 3;
pub const DEFAULT_GAIN: f64 = 1.6;
pub const DEFAULT_DAMPING: f64 = 3e-4;
pub const DEFAULT_W_TRANS: f64 = 1.8;
pub const DEFAULT_W_ROT: f64 = 0.15;
pub const DEFAULT_PROBE_STEPS: usize = 16;

/// `[Δx, Δy, Δz, Δr_x, Δr_y, Δr_z, Δg]`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVector<T>(pub [T; ACTION_DIM]);

impl<T: Scalar> ActionVector<T> {
    pub fn zero() -> Self {
        Self([T::zero(); ACTION_DIM])
    }

    pub fn from_slice(v: &[T]) -> Result<Self> {
        ensure_len("ActionVector", ACTION_DIM, v.len())?;
        let mut a = [T::zero(); ACTION_DIM];
        a.copy_from_slice(v);
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        Ok(Self(a))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualChainState<T> {
    pub q: [T; ACTION_DIM],
    pub theta: [T; ACTION_DIM],
    pub gain: T,
}

/// `q = gain · a`, `θ_j = Σ_{i≤j} q_i`.
pub fn cumulative_theta<T: Scalar>(a: &ActionVector<T>, gain: T) -> VirtualChainState<T> {
    let mut q = [T::zero(); ACTION_DIM];
    let mut theta = [T::zero(); ACTION_DIM];
    let mut acc = T::zero();
    for j in 0..ACTION_DIM {
        q[j] = gain * a.0[j];
        acc += q[j];
        theta[j] = acc;
    }
    VirtualChainState { q, theta, gain }
}

/// Rows `(x, y, θ)` of the virtual-chain Jacobian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralJacobian<T> {
    pub rows: [[T; ACTION_DIM]; PLANAR_DIM],
}

impl<T: Scalar> StructuralJacobian<T> {
    pub fn matrix(&self) -> DenseMatrix<T> {
        DenseMatrix::from_fn(PLANAR_DIM, ACTION_DIM, |i, j| self.rows[i][j])
    }

    pub fn column_norm(&self, j: usize) -> T {
        (0..PLANAR_DIM)
            .fold(T::zero(), |acc, i| acc + self.rows[i][j] * self.rows[i][j])
            .sqrt()
    }

    /// `J ε`: planar end-effector deviation caused by an action error.
    pub fn apply(&self, eps: &[T]) -> Result<[T; PLANAR_DIM]> {
        ensure_len("StructuralJacobian::apply", ACTION_DIM, eps.len())?;
        let mut out = [T::zero(); PLANAR_DIM];
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().zip(eps).fold(T::zero(), |a, (&r, &e)| a + r * e);
        }
        Ok(out)
    }
}

/// Jacobian of the chain at the given angles. Sums run over the six planar
/// segments, so the last column is `(0, 0, 1)`.
pub fn jacobian_at<T: Scalar>(theta: &[T; ACTION_DIM]) -> StructuralJacobian<T> {
    let mut rows = [[T::zero(); ACTION_DIM]; PLANAR_DIM];
    let mut sx = T::zero();
    let mut sy = T::zero();
    for j in (0..ACTION_DIM).rev() {
        if j < ACTION_DIM - 1 {
            sx += theta[j].sin();
            sy += theta[j].cos();
        }
        rows[0][j] = -sx;
        rows[1][j] = sy;
        rows[2][j] = T::one();
    }
    StructuralJacobian { rows }
}

pub fn structural_jacobian<T: Scalar>(state: &VirtualChainState<T>) -> StructuralJacobian<T> {
    jacobian_at(&state.theta)
}

/// `J⁺ = Jᵀ (J Jᵀ + λ I₃)⁻¹`, a `7 × 3` matrix.
pub fn damped_pinv<T: Scalar>(j: &StructuralJacobian<T>, lambda: T) -> Result<DenseMatrix<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::Config(format!("damping must be positive, got {lambda}")));
    }
    damped_pinv_matrix(&j.matrix(), lambda)
}

/// Damped pseudo-inverse of an arbitrary wide matrix.
pub fn damped_pinv_matrix<T: Scalar>(j: &DenseMatrix<T>, lambda: T) -> Result<DenseMatrix<T>> {
    let gram = j.matmul(&j.transpose())?;
    let reg = gram.add(&DenseMatrix::identity(j.rows()).scale(lambda))?;
    // (JJᵀ + λI) X = J  ⇒  J⁺ = Xᵀ
    Ok(solve_spd(&reg, j)?.transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile<T> {
    pub s: Vec<T>,
    pub s_hat: Vec<T>,
    /// `(w_x, w_y, w_θ)`
    pub w: [T; PLANAR_DIM],
    pub lambda: T,
    pub gain: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams<T> {
    pub w: [T; PLANAR_DIM],
    pub lambda: T,
    pub gain: T,
}

impl<T: Scalar> Default for DriftParams<T> {
    fn default() -> Self {
        Self {
            w: [
                T::lit(DEFAULT_W_TRANS),
                T::lit(DEFAULT_W_TRANS),
                T::lit(DEFAULT_W_ROT),
            ],
            lambda: T::lit(DEFAULT_DAMPING),
            gain: T::lit(DEFAULT_GAIN),
        }
    }
}

/// Per-action score `Σ_c w_c |J⁺_{j,c}|` with `J⁺` taken at that action's chain.
pub fn action_scores<T: Scalar>(a: &ActionVector<T>, params: &DriftParams<T>) -> Result<[T; ACTION_DIM]> {
    let j = structural_jacobian(&cumulative_theta(a, params.gain));
    let pinv = damped_pinv(&j, params.lambda)?;
    let mut out = [T::zero(); ACTION_DIM];
    for (row, o) in out.iter_mut().enumerate() {
        *o = (0..PLANAR_DIM).fold(T::zero(), |acc, c| acc + params.w[c] * pinv[(row, c)].abs());
    }
    Ok(out)
}

/// Expected scores over a dataset of actions, normalized to unit mean.
pub fn drift_scores<T: Scalar>(actions: &[ActionVector<T>], params: &DriftParams<T>) -> Result<DriftProfile<T>> {
    if actions.is_empty() {
        return Err(Error::Empty("calibration actions"));
    }
    let per_sample: Vec<[T; ACTION_DIM]> = actions
        .par_iter()
        .map(|a| action_scores(a, params))
        .collect::<Result<_>>()?;
    // Fixed-order reduction keeps the result independent of thread count.
    let mut s = vec![T::zero(); ACTION_DIM];
    for row in &per_sample {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = T::lit(actions.len() as f64);
    s.iter_mut().for_each(|v| *v /= n);
    let mean = s.iter().fold(T::zero(), |a, &b| a + b) / T::lit(ACTION_DIM as f64);
    if !(mean > T::zero()) {
        return Err(Error::NonFinite("degenerate drift scores".into()));
    }
    let s_hat = s.iter().map(|&v| v / mean).collect();
    Ok(DriftProfile {
        s,
        s_hat,
        w: params.w,
        lambda: params.lambda,
        gain: params.gain,
    })
}

/// `mean_b Σ_j ŝ_j (ε̂_bj − ε_bj)²`
pub fn drift_loss<T: Scalar>(eps_hat: &[Vec<T>], eps: &[Vec<T>], s_hat: &[T]) -> Result<T> {
    ensure_len("drift_loss batch", eps.len(), eps_hat.len())?;
    if eps.is_empty() {
        return Err(Error::Empty("drift loss batch"));
    }
    let mut total = T::zero();
    for (p, e) in eps_hat.iter().zip(eps) {
        ensure_len("drift_loss prediction", s_hat.len(), p.len())?;
        ensure_len("drift_loss target", s_hat.len(), e.len())?;
        for ((&ph, &ev), &w) in p.iter().zip(e).zip(s_hat) {
            total += w * (ph - ev) * (ph - ev);
        }
    }
    Ok(total / T::lit(eps.len() as f64))
}

/// Reduction of `|∂L/∂W|` along each output row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowReduce {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for RowReduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(RowReduce::Mean),
            "max" => Ok(RowReduce::Max),
            other => Err(Error::Config(format!("unknown row reduction `{other}`"))),
        }
    }
}

/// Model that can differentiate the drift loss with respect to its layers.
pub trait DriftDifferentiable<T: Scalar> {
    type Batch;

    /// `∂L_drift/∂W_l` for every quantizable layer, in layer order.
    fn drift_gradients(&self, batch: &Self::Batch, s_hat: &[T]) -> Result<Vec<(String, DenseMatrix<T>)>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity<T> {
    /// Layer id and score, in layer order.
    pub phi: Vec<(String, T)>,
    pub probe_steps: usize,
    pub reduce: RowReduce,
}

impl<T: Scalar> LayerSensitivity<T> {
    pub fn get(&self, id: &str) -> Option<T> {
        self.phi.iter().find(|(l, _)| l == id).map(|&(_, v)| v)
    }

    /// Restricts to the listed layers, keeping their relative order.
    pub fn subset(&self, ids: &[String]) -> Self {
        Self {
            phi: self
                .phi
                .iter()
                .filter(|(l, _)| ids.contains(l))
                .cloned()
                .collect(),
            probe_steps: self.probe_steps,
            reduce: self.reduce,
        }
    }

    /// Layer ids sorted by descending score, ties to the earlier layer.
    pub fn ranking(&self) -> Vec<String> {
        let mut idx: Vec<usize> = (0..self.phi.len()).collect();
        idx.sort_by(|&a, &b| {
            self.phi[b]
                .1
                .partial_cmp(&self.phi[a].1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.into_iter().map(|i| self.phi[i].0.clone()).collect()
    }
}

/// Score of one gradient matrix: mean over rows of the row reduction of `|G|`.
pub fn gradient_magnitude<T: Scalar>(g: &DenseMatrix<T>, reduce: RowReduce) -> T {
    let rows = g.rows();
    if rows == 0 || g.cols() == 0 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..rows {
        let r = g.row(i);
        acc += match reduce {
            RowReduce::Mean => {
                r.iter().fold(T::zero(), |a, &v| a + v.abs()) / T::lit(r.len() as f64)
            }
            RowReduce::Max => r.iter().fold(T::zero(), |a, &v| a.max(v.abs())),
        };
    }
    acc / T::lit(rows as f64)
}

/// `φ_l = (1/R) Σ_r (1/d_out) Σ_i |∂L/∂W_l|_i`, one probe batch per step.
pub fn layer_sensitivity<T, M>(
    model: &M,
    probes: &[M::Batch],
    s_hat: &[T],
    reduce: RowReduce,
) -> Result<LayerSensitivity<T>>
where
    T: Scalar,
    M: DriftDifferentiable<T>,
{
    if probes.is_empty() {
        return Err(Error::Empty("probe batches"));
    }
    let mut phi: Vec<(String, T)> = Vec::new();
    for batch in probes {
        let grads = model.drift_gradients(batch, s_hat)?;
        if phi.is_empty() {
            phi = grads.iter().map(|(id, _)| (id.clone(), T::zero())).collect();
        }
        ensure_len("layer_sensitivity layer count", phi.len(), grads.len())?;
        for ((id, acc), (gid, g)) in phi.iter_mut().zip(&grads) {
            debug_assert_eq!(id, gid);
            let m = gradient_magnitude(g, reduce);
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("gradient of layer `{gid}`")));
            }
            *acc += m;
        }
    }
    let r = T::lit(probes.len() as f64);
    phi.iter_mut().for_each(|(_, v)| *v /= r);
    Ok(LayerSensitivity {
        phi,
        probe_steps: probes.len(),
        reduce,
    })
}

/// Number of layers kept in high precision: `ceil(k% · n)`.
pub fn retained_count(n: usize, k_percent: f64) -> usize {
    let raw = k_percent / 100.0 * n as f64;
    // Guard against 30/100·10 landing a hair above 3.
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Top `ceil(k% · n)` layers by score go HIGH16, the rest W4.
pub fn allocate_bits<T: Scalar>(phi: &LayerSensitivity<T>, k_percent: f64) -> Result<BitWidthMap> {
    if !(0.0..=100.0).contains(&k_percent) {
        return Err(Error::Config(format!("retention ratio {k_percent} outside [0, 100]")));
    }
    let count = retained_count(phi.phi.len(), k_percent);
    let keep: Vec<String> = phi.ranking().into_iter().take(count).collect();
    Ok(BitWidthMap {
        entries: phi
            .phi
            .iter()
            .map(|(id, _)| {
                let p = if keep.contains(id) { Precision::High16 } else { Precision::W4 };
                (id.clone(), p)
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_action(rng: &mut ChaCha8Rng, amp: f64) -> ActionVector<f64> {
        let mut a = [0.0; 7];
        a.iter_mut().for_each(|x| *x = rng.random_range(-amp..amp));
        ActionVector(a)
    }

    #[test]
    fn zero_action_zero_angles() {
        let s = cumulative_theta(&ActionVector::<f64>::zero(), 1.6);
        assert_eq!(s.theta, [0.0; 7]);
    }

    #[test]
    fn unit_first_dim_prefix_sum() {
        let mut a = [0.0; 7];
        a[0] = 1.0;
        let s = cumulative_theta(&ActionVector(a), 1.0);
        assert_eq!(s.theta, [1.0; 7]);
    }

    #[test]
    fn prefix_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_action(&mut rng, 0.4);
        let s = cumulative_theta(&a, 1.6);
        for j in 0..7 {
            let oracle: f64 = (0..=j).map(|i| 1.6 * a.0[i]).sum();
            assert!((s.theta[j] - oracle).abs() <= 1e-15);
        }
    }

    #[test]
    fn jacobian_at_zero() {
        let j = jacobian_at(&[0.0; 7]);
        assert_eq!(j.rows[0], [0.0; 7]);
        assert_eq!(j.rows[1], [6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        assert_eq!(j.rows[2], [1.0; 7]);
        let expect = [37.0, 26.0, 17.0, 10.0, 5.0, 2.0, 1.0].map(f64::sqrt);
        for (k, e) in expect.iter().enumerate() {
            assert_eq!(j.column_norm(k), *e);
        }
    }

    #[test]
    fn pinv_of_padded_identity() {
        let j = DenseMatrix::<f64>::from_fn(3, 7, |i, k| if i == k { 1.0 } else { 0.0 });
        let p = damped_pinv_matrix(&j, 1e-12).unwrap();
        for r in 0..7 {
            for c in 0..3 {
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((p[(r, c)] - e).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn pinv_near_right_inverse_at_zero() {
        // At θ = 0 the x row of J vanishes, so JJ⁺ can only reproduce the
        // identity on the (y, θ) range of J; the x direction maps to zero.
        let j = jacobian_at(&[0.0; 7]);
        let p = damped_pinv(&j, 3e-4).unwrap();
        let jp = j.matrix().matmul(&p).unwrap();
        let range_projector = DenseMatrix::from_diag(&[0.0, 1.0, 1.0]);
        let err = jp.sub(&range_projector).unwrap().frobenius_norm();
        assert!(err <= 1e-2, "{err}");
        assert_eq!(jp[(0, 0)], 0.0);
    }

    #[test]
    fn pinv_right_inverse_at_generic_angles() {
        let theta = [0.1, 0.25, 0.3, 0.35, 0.5, 0.6, 0.6];
        let j = jacobian_at(&theta);
        let p = damped_pinv(&j, 3e-4).unwrap();
        let jp = j.matrix().matmul(&p).unwrap();
        let err = jp.sub(&DenseMatrix::identity(3)).unwrap().frobenius_norm();
        assert!(err <= 1e-2, "{err}");
    }

    #[test]
    fn pinv_rejects_nonpositive_damping() {
        assert!(damped_pinv(&jacobian_at(&[0.0; 7]), 0.0).is_err());
    }

    #[test]
    fn normalized_scores_have_unit_mean() {
        let p = drift_scores(&[ActionVector::zero()], &DriftParams::default()).unwrap();
        let mean: f64 = p.s_hat.iter().sum::<f64>() / 7.0;
        assert!((mean - 1.0).abs() <= 1e-12);
        assert!(p.s_hat[0] > p.s_hat[5]);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            drift_scores::<f64>(&[], &DriftParams::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn loss_zero_on_exact_prediction() {
        let e = vec![vec![0.3; 7], vec![-1.0; 7]];
        assert_eq!(drift_loss(&e, &e, &[1.0; 7]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_weights_give_seven_times_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.random()).collect()).collect();
        let e: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.random()).collect()).collect();
        let mut sq = 0.0;
        for (a, b) in p.iter().zip(&e) {
            for (x, y) in a.iter().zip(b) {
                sq += (x - y) * (x - y);
            }
        }
        let mse = sq / 35.0;
        let l = drift_loss(&p, &e, &[1.0; 7]).unwrap();
        assert!((l - 7.0 * mse).abs() <= 1e-12);
    }

    #[test]
    fn allocation_boundaries() {
        let phi = LayerSensitivity {
            phi: (0..10).map(|i| (format!("l{i}"), i as f64)).collect(),
            probe_steps: 1,
            reduce: RowReduce::Mean,
        };
        assert_eq!(allocate_bits(&phi, 0.0).unwrap().count(Precision::High16), 0);
        assert_eq!(allocate_bits(&phi, 100.0).unwrap().count(Precision::W4), 0);
        let m = allocate_bits(&phi, 30.0).unwrap();
        assert_eq!(m.count(Precision::High16), 3);
        for id in ["l7", "l8", "l9"] {
            assert_eq!(m.get(id), Some(Precision::High16));
        }
        assert!(allocate_bits(&phi, 101.0).is_err());
    }

    #[test]
    fn ties_prefer_earlier_layers() {
        let phi = LayerSensitivity {
            phi: vec![("a".into(), 1.0), ("b".into(), 2.0), ("c".into(), 1.0), ("d".into(), 1.0)],
            probe_steps: 1,
            reduce: RowReduce::Mean,
        };
        let m = allocate_bits(&phi, 50.0).unwrap();
        assert_eq!(m.get("b"), Some(Precision::High16));
        assert_eq!(m.get("a"), Some(Precision::High16));
        assert_eq!(m.get("c"), Some(Precision::W4));
    }

    #[test]
    fn retained_counts() {
        assert_eq!(retained_count(10, 30.0), 3);
        assert_eq!(retained_count(10, 31.0), 4);
        assert_eq!(retained_count(7, 30.0), 3);
        assert_eq!(retained_count(0, 50.0), 0);
    }

    #[test]
    fn gradient_magnitude_reductions() {
        let g = DenseMatrix::from_rows(&[vec![1.0, -3.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(gradient_magnitude(&g, RowReduce::Mean), (2.0 + 1.0) / 2.0);
        assert_eq!(gradient_magnitude(&g, RowReduce::Max), (3.0 + 2.0) / 2.0);
    }
}
