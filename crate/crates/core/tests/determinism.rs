use drift_ptq_core::policy::{ActionPolicy, DenoiserPolicy, DiffusionSample, PolicyConfig, Perturbed};
use drift_ptq_core::sim::{rollout_closed_loop, EnvSpec};

fn samples(p: &DenoiserPolicy) -> Vec<DiffusionSample> {
    let env = EnvSpec::default();
    (0..4u64)
        .map(|i| {
            let obs = env.episode(i).observation();
            DiffusionSample {
                x_t: [0.3, -0.2, 0.1, 0.0, 0.5, -0.4, 0.2],
                t: 1 + i as usize,
                z: p.encode(&obs).unwrap(),
                eps: [0.1, 0.2, -0.3, 0.4, -0.5, 0.6, -0.7],
            }
        })
        .collect()
}

#[test]
fn seed_fixes_weights_actions_gradients_and_rollouts() {
    let a = DenoiserPolicy::random(PolicyConfig::default(), 5).unwrap();
    let b = DenoiserPolicy::random(PolicyConfig::default(), 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, DenoiserPolicy::random(PolicyConfig::default(), 6).unwrap());

    let obs = EnvSpec::default().episode(3).observation();
    assert_eq!(a.act(&obs, 77).unwrap(), b.act(&obs, 77).unwrap());
    assert_ne!(a.act(&obs, 77).unwrap(), a.act(&obs, 78).unwrap());

    let s_hat = [1.0; 7];
    assert_eq!(a.backprop_grads(&samples(&a), &s_hat).unwrap(), b.backprop_grads(&samples(&b), &s_hat).unwrap());

    let env = EnvSpec::default();
    let q = Perturbed { inner: &b, offset: [0.002; 7] };
    let r1 = rollout_closed_loop(&a, &q, &env, 11, 16).unwrap();
    let r2 = rollout_closed_loop(&a, &q, &env, 11, 16).unwrap();
    assert_eq!(r1, r2);
}
