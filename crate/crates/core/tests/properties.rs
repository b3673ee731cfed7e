use drift_ptq_core::csrc::{apply_channel_affine, channel_affine, ChannelStats};
use drift_ptq_core::drift::{allocate_bits, drift_scores, jacobian_at, ActionVector, DriftParams, LayerSensitivity, RowReduce, ACTION_DIM};
use drift_ptq_core::linalg::{svd, sym_eig, truncated_svd};
use drift_ptq_core::nn::Linear;
use drift_ptq_core::quant::{memory_report, quantize_group, BitWidthMap, Precision, QuantSpec, QuantizableModel};
use drift_ptq_core::{Matrix, Moments};
use proptest::prelude::*;

fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let cov = Matrix::from_fn(d, d, |i, j| {
        rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0)
    });
    (mean, cov)
}

fn stream() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-50.0f64..50.0, d), 2..60))
}

fn square(max: usize) -> impl Strategy<Value = Matrix> {
    (2usize..max).prop_flat_map(|n| {
        prop::collection::vec(-3.0f64..3.0, n * n).prop_map(move |v| Matrix::from_vec(n, n, v).unwrap())
    })
}

#[derive(Clone)]
struct Stack(Vec<Linear<f64>>);

impl QuantizableModel<f64> for Stack {
    fn layer_ids(&self) -> Vec<String> {
        self.0.iter().map(|l| l.name().to_string()).collect()
    }
    fn layer(&self, id: &str) -> Option<&Linear<f64>> {
        self.0.iter().find(|l| l.name() == id)
    }
    fn layer_mut(&mut self, id: &str) -> Option<&mut Linear<f64>> {
        self.0.iter_mut().find(|l| l.name() == id)
    }
}

fn sensitivity(phi: &[f64]) -> LayerSensitivity<f64> {
    LayerSensitivity {
        phi: phi.iter().enumerate().map(|(i, &v)| (format!("l{i}"), v)).collect(),
        probe_steps: 1,
        reduce: RowReduce::Mean,
    }
}

fn translation_norm(j: &drift_ptq_core::drift::StructuralJacobian<f64>, c: usize) -> f64 {
    j.rows[0][c].hypot(j.rows[1][c])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn welford_matches_two_pass(rows in stream()) {
        let mut m = Moments::new(rows[0].len());
        for r in &rows {
            m.push(r).unwrap();
        }
        let (mean, cov) = two_pass(&rows);
        let c = m.covariance().unwrap();
        let scale = cov.max_abs().max(1e-300);
        prop_assert!(c.sub(&cov).unwrap().max_abs() / scale <= 1e-10);
        for (a, b) in m.mean().iter().zip(&mean) {
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn eigenvectors_are_orthonormal(a in square(9)) {
        let sym = a.symmetrized();
        let e = sym_eig(&sym).unwrap();
        let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
        prop_assert!(vtv.sub(&Matrix::identity(sym.rows())).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn truncation_error_is_non_increasing_in_rank(a in square(9)) {
        let full = svd(&a).unwrap().rank();
        let mut prev = f64::INFINITY;
        for r in 1..=full {
            let err = a.sub(&truncated_svd(&a, r).unwrap().reconstruct()).unwrap().frobenius_norm();
            prop_assert!(err <= prev + 1e-12, "rank {r}: {err} after {prev}");
            prev = err;
        }
    }

    #[test]
    fn group_codes_are_scale_equivariant(v in prop::collection::vec(-4.0f64..4.0, 1..40), c in 1e-3f64..1e3) {
        let spec = QuantSpec::w4(32);
        let q = quantize_group(&v, spec).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let qs = quantize_group(&scaled, spec).unwrap();
        prop_assert_eq!(q.codes, qs.codes);
    }

    #[test]
    fn group_error_is_within_half_a_step(v in prop::collection::vec(-4.0f64..4.0, 1..40)) {
        let q = quantize_group(&v, QuantSpec::w4(32)).unwrap();
        let (lo, hi) = QuantSpec::w4(32).code_range();
        for (i, &x) in v.iter().enumerate() {
            let s = q.scales[q.group_index(0, i)];
            let code = q.codes[i] as i32;
            prop_assert!(code >= lo && code <= hi);
            prop_assert!((code as f64 * s - x).abs() <= s / 2.0 + 1e-15);
        }
    }

    #[test]
    fn memory_reduction_is_non_increasing_in_retention(
        shapes in prop::collection::vec((1usize..80, 2usize..80), 1..12),
        phi in prop::collection::vec(0.0f64..10.0, 12),
    ) {
        let model = Stack(shapes.iter().enumerate().map(|(i, &(r, c))| {
            Linear::new(format!("l{i}"), Matrix::zeros(r, c), vec![0.0; r]).unwrap()
        }).collect());
        let sens = sensitivity(&phi[..shapes.len()]);
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let map = allocate_bits(&sens, k as f64 * 5.0).unwrap();
            let red = memory_report(&model, &map, 32).unwrap().reduction_fraction;
            prop_assert!(red <= prev + 1e-15, "k={}: {red} after {prev}", k * 5);
            prev = red;
        }
    }

    #[test]
    fn allocation_ignores_positive_rescaling(phi in prop::collection::vec(0.0f64..10.0, 1..20), c in 1e-6f64..1e6, k in 0.0f64..100.0) {
        let base = allocate_bits(&sensitivity(&phi), k).unwrap();
        let scaled: Vec<f64> = phi.iter().map(|v| v * c).collect();
        let other = allocate_bits(&sensitivity(&scaled), k).unwrap();
        prop_assert_eq!(&base, &other);
        let high = base.count(Precision::High16) as f64;
        prop_assert!((high - k / 100.0 * phi.len() as f64).abs() < 1.0 + 1e-9);
        let uniform = BitWidthMap::uniform(&base.entries.iter().map(|(id, _)| id.clone()).collect::<Vec<_>>(), Precision::W4);
        prop_assert_eq!(uniform.len(), base.len());
    }

    #[test]
    fn normalized_scores_have_unit_mean(actions in prop::collection::vec(prop::array::uniform7(-0.4f64..0.4), 1..40)) {
        let acts: Vec<ActionVector<f64>> = actions.into_iter().map(ActionVector).collect();
        let p = drift_scores(&acts, &DriftParams::default()).unwrap();
        let mean = p.s_hat.iter().sum::<f64>() / ACTION_DIM as f64;
        prop_assert!((mean - 1.0).abs() <= 1e-9);
        prop_assert!(p.s.iter().all(|&s| s >= 0.0));
    }

    /// Pairwise link angles under π/2 keep every added link pointing along
    /// the running sum, so the norms grow towards the base.
    #[test]
    fn translation_columns_shrink_towards_the_tip(theta in prop::array::uniform7(-0.78f64..0.78)) {
        let j = jacobian_at(&theta);
        for c in 0..ACTION_DIM - 1 {
            prop_assert!(translation_norm(&j, c) > translation_norm(&j, c + 1));
        }
        prop_assert_eq!(translation_norm(&j, ACTION_DIM - 1), 0.0);
        prop_assert!(j.rows[2].iter().all(|&v| v == 1.0));
    }

    /// With the `ε` floor the corrected std is `σ_fp σ_q / (σ_q + ε)`; that
    /// is within `1e-6` of `σ_fp` whenever the gain is at most one.
    #[test]
    fn unclipped_affine_matches_reference_moments(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 8..40),
        g_true in prop::array::uniform4(0.05f64..4.0),
        d_true in prop::array::uniform4(-1.0f64..1.0),
    ) {
        let fp: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().enumerate().map(|(i, v)| g_true[i] * v + d_true[i]).collect()).collect();
        let (mut mq, mut mf) = (Moments::new(4), Moments::new(4));
        for (q, f) in rows.iter().zip(&fp) {
            mq.push(q).unwrap();
            mf.push(f).unwrap();
        }
        let stats = ChannelStats::from_moments(&mf, &mq).unwrap();
        prop_assume!(stats.sigma_q.iter().all(|&s| s > 1e-2));
        let a = channel_affine(&stats, 1e-3, 1e3).unwrap();
        let mut mc = Moments::new(4);
        for q in &rows {
            mc.push(&apply_channel_affine(q, &a).unwrap()).unwrap();
        }
        let (sc, sf, sq) = (mc.std().unwrap(), mf.std().unwrap(), mq.std().unwrap());
        for i in 0..4 {
            prop_assert!((mc.mean()[i] - mf.mean()[i]).abs() <= 1e-6);
            let exact = sf[i] * sq[i] / (sq[i] + stats.epsilon);
            prop_assert!((sc[i] - exact).abs() <= 1e-12 * sf[i].max(1.0));
            if g_true[i] <= 1.0 {
                prop_assert!((sc[i] - sf[i]).abs() <= 1e-6);
            }
        }
    }
}

/// Outside the small-angle regime a folded-back link cancels the rest of the
/// chain, so column norms need not decrease for every |θ| < π/2.
#[test]
fn folded_chain_breaks_column_ordering() {
    let theta = [1.5, 1.5, 1.5, 1.5, -1.5, 1.5, 1.5];
    let j = jacobian_at(&theta);
    assert!(translation_norm(&j, 4) < translation_norm(&j, 5));
}

/// A single-column layer costs more at W4 (four bits plus a 16-bit group
/// scale) than at 16 bits, so promoting it raises the reduction.
#[test]
fn single_column_layer_is_cheaper_at_sixteen_bits() {
    let model = Stack(vec![Linear::new("l0", Matrix::zeros(3, 1), vec![0.0; 3]).unwrap()]);
    let w4 = memory_report(&model, &BitWidthMap::uniform(&["l0"], Precision::W4), 32).unwrap();
    let high = memory_report(&model, &BitWidthMap::uniform(&["l0"], Precision::High16), 32).unwrap();
    assert_eq!(w4.reduction_fraction, -0.25);
    assert_eq!(high.reduction_fraction, 0.0);
}
