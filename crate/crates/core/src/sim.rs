//! Planar reaching environment on the virtual chain, a scripted expert and
//! paired closed-loop rollouts measuring quantization-induced drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drift::{damped_pinv_matrix, jacobian_at, ACTION_DIM, PLANAR_DIM};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::policy::{ActionPolicy, OBS_DIM};

/// Number of unit links contributing to the planar position.
pub const PLANAR_LINKS: usize = 6;
/// Position features are divided by this in observations.
const POSITION_NORM: f64 = 3.0;

/// SplitMix64 finalizer used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cumulative joint angles `θ_j = Σ_{i≤j} q_i`.
pub fn chain_angles(q: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    let mut th = [0.0; ACTION_DIM];
    let mut acc = 0.0;
    for (t, &qi) in th.iter_mut().zip(q) {
        acc += qi;
        *t = acc;
    }
    th
}

/// End-effector pose `(x, y, φ)` with unit links.
pub fn forward_kinematics(q: &[f64; ACTION_DIM]) -> [f64; PLANAR_DIM] {
    let th = chain_angles(q);
    let x = th[..PLANAR_LINKS].iter().map(|t| t.cos()).sum();
    let y = th[..PLANAR_LINKS].iter().map(|t| t.sin()).sum();
    [x, y, th[ACTION_DIM - 1]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSimState {
    pub q: [f64; ACTION_DIM],
    pub target: [f64; 2],
    pub t: usize,
}

impl ArmSimState {
    pub fn pose(&self) -> [f64; PLANAR_DIM] {
        forward_kinematics(&self.q)
    }

    pub fn observation(&self) -> Vec<f64> {
        let th = chain_angles(&self.q);
        let p = self.pose();
        let mut obs = Vec::with_capacity(OBS_DIM);
        obs.extend_from_slice(&th);
        obs.push(p[0] / POSITION_NORM);
        obs.push(p[1] / POSITION_NORM);
        obs.push(p[2]);
        obs.push(self.target[0] / POSITION_NORM);
        obs.push(self.target[1] / POSITION_NORM);
        obs
    }

    /// Inverse of [`ArmSimState::observation`]; the step counter is zero.
    pub fn from_observation(obs: &[f64]) -> Result<Self> {
        crate::error::ensure_len("observation", OBS_DIM, obs.len())?;
        let mut q = [0.0; ACTION_DIM];
        let mut prev = 0.0;
        for (qi, &th) in q.iter_mut().zip(&obs[..ACTION_DIM]) {
            *qi = th - prev;
            prev = th;
        }
        Ok(Self {
            q,
            target: [obs[OBS_DIM - 2] * POSITION_NORM, obs[OBS_DIM - 1] * POSITION_NORM],
            t: 0,
        })
    }

    pub fn distance_to_target(&self) -> f64 {
        let p = self.pose();
        ((p[0] - self.target[0]).powi(2) + (p[1] - self.target[1]).powi(2)).sqrt()
    }

    /// Applies the joint increments; rejects non-finite states.
    pub fn step(&mut self, a: &[f64; ACTION_DIM]) -> Result<()> {
        for (qi, ai) in self.q.iter_mut().zip(a) {
            *qi += ai;
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::RolloutAborted {
                step: self.t,
                reason: "non-finite joint state".into(),
            });
        }
        self.t += 1;
        Ok(())
    }
}

/// Target distribution: an annular sector split into radial × angular bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub radius: (f64, f64),
    pub max_angle: f64,
    pub radial_bins: usize,
    pub angular_bins: usize,
    /// Home configuration: base joint `home_base`, every other planar joint
    /// `home_bend`, so the chain starts curled away from the straight-arm
    /// singularity.
    pub home_base: f64,
    pub home_bend: f64,
    pub init_joint_range: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            radius: (2.5, 5.5),
            max_angle: 0.9,
            radial_bins: 2,
            angular_bins: 3,
            home_base: -0.75,
            home_bend: 0.3,
            init_joint_range: 0.2,
        }
    }
}

impl EnvSpec {
    pub fn bins(&self) -> usize {
        self.radial_bins * self.angular_bins
    }

    pub fn bin_of(&self, target: &[f64; 2]) -> usize {
        let r = (target[0].powi(2) + target[1].powi(2)).sqrt();
        let ang = target[1].atan2(target[0]);
        let rf = ((r - self.radius.0) / (self.radius.1 - self.radius.0)).clamp(0.0, 1.0 - 1e-12);
        let af = ((ang + self.max_angle) / (2.0 * self.max_angle)).clamp(0.0, 1.0 - 1e-12);
        let ri = (rf * self.radial_bins as f64) as usize;
        let ai = (af * self.angular_bins as f64) as usize;
        ri * self.angular_bins + ai
    }

    /// Initial state with a target drawn uniformly inside `bin`.
    pub fn initial_state(&self, seed: u64, bin: usize) -> ArmSimState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bin = bin % self.bins();
        let (ri, ai) = (bin / self.angular_bins, bin % self.angular_bins);
        let rw = (self.radius.1 - self.radius.0) / self.radial_bins as f64;
        let aw = 2.0 * self.max_angle / self.angular_bins as f64;
        let r = self.radius.0 + rw * (ri as f64 + rng.random::<f64>());
        let a = -self.max_angle + aw * (ai as f64 + rng.random::<f64>());
        let mut q = [0.0; ACTION_DIM];
        for (i, qi) in q.iter_mut().take(PLANAR_LINKS).enumerate() {
            let home = if i == 0 { self.home_base } else { self.home_bend };
            *qi = home + rng.random_range(-self.init_joint_range..self.init_joint_range);
        }
        ArmSimState {
            q,
            target: [r * a.cos(), r * a.sin()],
            t: 0,
        }
    }

    /// Evaluation episode for a seed; bins cycle with the seed.
    pub fn episode(&self, seed: u64) -> ArmSimState {
        self.initial_state(mix_seed(seed, 0xE7), (seed % self.bins() as u64) as usize)
    }
}

/// Damped-least-squares reaching controller on the planar links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertController {
    pub gain: f64,
    pub damping: f64,
    pub max_step: f64,
}

impl Default for ExpertController {
    fn default() -> Self {
        Self {
            gain: 0.3,
            damping: 1e-2,
            max_step: 0.2,
        }
    }
}

impl ExpertController {
    pub fn action(&self, s: &ArmSimState) -> Result<[f64; ACTION_DIM]> {
        let j = jacobian_at(&chain_angles(&s.q));
        let jxy = DenseMatrix::from_fn(2, PLANAR_LINKS, |r, c| j.rows[r][c]);
        let pinv = damped_pinv_matrix(&jxy, self.damping)?;
        let p = s.pose();
        let err = [self.gain * (s.target[0] - p[0]), self.gain * (s.target[1] - p[1])];
        let dq = pinv.matvec(&err)?;
        let mut a = [0.0; ACTION_DIM];
        for (ai, d) in a.iter_mut().zip(dq) {
            *ai = d.clamp(-self.max_step, self.max_step);
        }
        Ok(a)
    }
}

impl ActionPolicy for ExpertController {
    fn act(&self, obs: &[f64], _noise_seed: u64) -> Result<[f64; ACTION_DIM]> {
        self.action(&ArmSimState::from_observation(obs)?)
    }
}

/// Paired closed-loop rollout of a reference and a perturbed policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub seed: u64,
    /// `a_Q(s_Q) − a_FP(s_Q)` per step.
    pub eps: Vec<[f64; ACTION_DIM]>,
    /// `J(s_Q) ε_t` per step.
    pub delta_e: Vec<[f64; PLANAR_DIM]>,
    /// Running sum of `delta_e`.
    pub e_t: [f64; PLANAR_DIM],
    pub e_t_norm: f64,
    /// `‖E_T‖` with errors measured along the reference trajectory instead.
    pub open_loop_e_t_norm: f64,
    /// Planar distance between the two final end-effector positions.
    pub final_pose_gap: f64,
    pub fp_final_target_distance: f64,
    pub q_final_target_distance: f64,
}

impl RolloutReport {
    /// `‖Σ_{s≤t} δe_s‖` for each step.
    pub fn drift_curve(&self) -> Vec<f64> {
        let mut acc = [0.0; PLANAR_DIM];
        self.delta_e
            .iter()
            .map(|d| {
                for (a, v) in acc.iter_mut().zip(d) {
                    *a += v;
                }
                norm3(&acc)
            })
            .collect()
    }
}

fn norm3(v: &[f64; PLANAR_DIM]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Noise seed shared by both policies at step `t` of episode `seed`.
pub fn step_noise_seed(seed: u64, t: usize) -> u64 {
    mix_seed(mix_seed(seed, 0xD1F7), t as u64)
}

pub fn rollout_closed_loop<F, Q>(fp: &F, q: &Q, env: &EnvSpec, seed: u64, horizon: usize) -> Result<RolloutReport>
where
    F: ActionPolicy + ?Sized,
    Q: ActionPolicy + ?Sized,
{
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let start = env.episode(seed);
    let mut s_fp = start.clone();
    let mut s_q = start;
    let mut eps = Vec::with_capacity(horizon);
    let mut delta_e = Vec::with_capacity(horizon);
    let mut e_t = [0.0; PLANAR_DIM];
    let mut e_open = [0.0; PLANAR_DIM];
    let abort = |step: usize, e: Error| Error::RolloutAborted {
        step,
        reason: e.to_string(),
    };
    for t in 0..horizon {
        let ns = step_noise_seed(seed, t);
        let obs_q = s_q.observation();
        let obs_fp = s_fp.observation();
        let a_q = q.act(&obs_q, ns).map_err(|e| abort(t, e))?;
        let a_ref_at_q = fp.act(&obs_q, ns).map_err(|e| abort(t, e))?;
        let a_fp = fp.act(&obs_fp, ns).map_err(|e| abort(t, e))?;
        let a_q_at_fp = q.act(&obs_fp, ns).map_err(|e| abort(t, e))?;

        let mut e = [0.0; ACTION_DIM];
        let mut e_ol = [0.0; ACTION_DIM];
        for j in 0..ACTION_DIM {
            e[j] = a_q[j] - a_ref_at_q[j];
            e_ol[j] = a_q_at_fp[j] - a_fp[j];
        }
        let d = jacobian_at(&chain_angles(&s_q.q)).apply(&e)?;
        let d_ol = jacobian_at(&chain_angles(&s_fp.q)).apply(&e_ol)?;
        for k in 0..PLANAR_DIM {
            e_t[k] += d[k];
            e_open[k] += d_ol[k];
        }
        eps.push(e);
        delta_e.push(d);
        s_q.step(&a_q)?;
        s_fp.step(&a_fp)?;
    }
    let pq = s_q.pose();
    let pf = s_fp.pose();
    Ok(RolloutReport {
        seed,
        eps,
        delta_e,
        e_t,
        e_t_norm: norm3(&e_t),
        open_loop_e_t_norm: norm3(&e_open),
        final_pose_gap: ((pq[0] - pf[0]).powi(2) + (pq[1] - pf[1]).powi(2)).sqrt(),
        fp_final_target_distance: s_fp.distance_to_target(),
        q_final_target_distance: s_q.distance_to_target(),
    })
}

/// Scripted-expert episode: `(state before step, action)` pairs.
pub fn expert_episode(
    env: &EnvSpec,
    expert: &ExpertController,
    seed: u64,
    bin: usize,
    steps: usize,
) -> Result<Vec<(ArmSimState, [f64; ACTION_DIM])>> {
    let mut s = env.initial_state(seed, bin);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = expert.action(&s)?;
        out.push((s.clone(), a));
        s.step(&a)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant([f64; ACTION_DIM]);

    impl ActionPolicy for Constant {
        fn act(&self, _obs: &[f64], _seed: u64) -> Result<[f64; ACTION_DIM]> {
            Ok(self.0)
        }
    }

    #[test]
    fn straight_chain_pose() {
        assert_eq!(forward_kinematics(&[0.0; 7]), [6.0, 0.0, 0.0]);
    }

    #[test]
    fn bins_round_trip() {
        let env = EnvSpec::default();
        for bin in 0..6 {
            for seed in 0..20 {
                let s = env.initial_state(seed, bin);
                assert_eq!(env.bin_of(&s.target), bin);
            }
        }
    }

    #[test]
    fn expert_reduces_distance() {
        let env = EnvSpec::default();
        let ex = ExpertController::default();
        for bin in 0..6 {
            let mut s = env.initial_state(3, bin);
            let d0 = s.distance_to_target();
            for _ in 0..32 {
                let a = ex.action(&s).unwrap();
                assert!(a.iter().all(|v| v.abs() <= 0.2));
                s.step(&a).unwrap();
            }
            assert!(s.distance_to_target() < 0.5 * d0, "bin {bin}: {d0} -> {}", s.distance_to_target());
        }
    }

    #[test]
    fn expert_acts_on_observations() {
        let env = EnvSpec::default();
        let ex = ExpertController::default();
        let mut s = env.initial_state(5, 4);
        s.step(&[0.1, -0.05, 0.02, 0.0, 0.03, -0.1, 0.4]).unwrap();
        let back = ArmSimState::from_observation(&s.observation()).unwrap();
        for (a, b) in back.q.iter().zip(&s.q) {
            assert!((a - b).abs() < 1e-12);
        }
        let (a, b) = (ex.act(&s.observation(), 0).unwrap(), ex.action(&s).unwrap());
        for k in 0..ACTION_DIM {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_policies_do_not_drift() {
        let p = Constant([0.01, -0.02, 0.0, 0.03, 0.0, 0.0, 0.0]);
        let r = rollout_closed_loop(&p, &p, &EnvSpec::default(), 4, 10).unwrap();
        assert_eq!(r.e_t_norm, 0.0);
        assert_eq!(r.final_pose_gap, 0.0);
        assert!(r.eps.iter().all(|e| e.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_step_drift_is_one_term() {
        let fp = Constant([0.0; 7]);
        let q = Constant([0.01, 0.0, 0.0, 0.0, 0.0, 0.02, -0.01]);
        let env = EnvSpec::default();
        let r = rollout_closed_loop(&fp, &q, &env, 9, 1).unwrap();
        let start = env.episode(9);
        let expect = jacobian_at(&chain_angles(&start.q)).apply(&q.0).unwrap();
        assert_eq!(r.e_t, expect);
        assert_eq!(r.delta_e, vec![expect]);
    }

    #[test]
    fn accumulated_drift_equals_sum_of_steps() {
        let fp = Constant([0.01; 7]);
        let q = Constant([0.012, 0.009, 0.01, 0.011, 0.01, 0.0105, 0.01]);
        let r = rollout_closed_loop(&fp, &q, &EnvSpec::default(), 2, 25).unwrap();
        let mut sum = [0.0; 3];
        for d in &r.delta_e {
            for k in 0..3 {
                sum[k] += d[k];
            }
        }
        assert_eq!(sum, r.e_t);
        assert_eq!(*r.drift_curve().last().unwrap(), r.e_t_norm);
    }

    #[test]
    fn seeds_mix() {
        assert_ne!(mix_seed(1, 2), mix_seed(2, 1));
        assert_eq!(mix_seed(7, 7), mix_seed(7, 7));
    }
}
