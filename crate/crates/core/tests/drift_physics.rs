use drift_ptq_core::drift::{cumulative_theta, drift_scores, structural_jacobian, ActionVector, DriftParams, ACTION_DIM};
use drift_ptq_core::policy::Perturbed;
use drift_ptq_core::sim::{expert_episode, rollout_closed_loop, EnvSpec, ExpertController};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn column_norms_decrease_along_the_chain_at_small_angles() {
    let params = DriftParams::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..1000 {
        let mut a = [0.0; ACTION_DIM];
        a.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
        let j = structural_jacobian(&cumulative_theta(&ActionVector(a), params.gain));
        for c in 0..ACTION_DIM - 1 {
            assert!(j.column_norm(c) > j.column_norm(c + 1), "column {c} at {a:?}");
        }
    }
}

fn mean_gap(dim: usize, magnitude: f64, seeds: u64) -> f64 {
    let env = EnvSpec::default();
    let expert = ExpertController::default();
    let mut offset = [0.0; ACTION_DIM];
    offset[dim] = magnitude;
    let q = Perturbed { inner: &expert, offset };
    let total: f64 = (0..seeds)
        .map(|s| rollout_closed_loop(&expert, &q, &env, s, 64).unwrap().final_pose_gap)
        .sum();
    total / seeds as f64
}

/// Equal offsets on the base joint move the end effector further than on
/// the last planar joint, in agreement with the analytic scores.
#[test]
fn base_perturbation_outweighs_distal_one() {
    for magnitude in [0.01, -0.01] {
        let g1 = mean_gap(0, magnitude, 100);
        let g6 = mean_gap(5, magnitude, 100);
        assert!(g1 > g6, "offset {magnitude}: dim 1 gap {g1} vs dim 6 gap {g6}");
    }
    let env = EnvSpec::default();
    let expert = ExpertController::default();
    let actions: Vec<ActionVector<f64>> = (0..60)
        .flat_map(|e| expert_episode(&env, &expert, e, (e % 6) as usize, 64).unwrap())
        .map(|(_, a)| ActionVector(a))
        .collect();
    let prof = drift_scores(&actions, &DriftParams::default()).unwrap();
    assert!(prof.s_hat[0] > prof.s_hat[5], "{:?}", prof.s_hat);
}
