//! Two-joint reach-and-balance arm with randomized drives and noisy observations.
//!
//! Joint 1 yaws about the world z axis, joint 2 pitches the second link away
//! from vertical. Each joint is driven by a stiffness/damping position drive
//! whose setpoint advances at the commanded velocity:
//!
//! ```text
//! s' = u,    q'' = k (s - q) - d q'
//! ```
//!
//! integrated over `substeps` sub-intervals, implicitly in velocity and with
//! the updated velocity for position. The episode ends when a joint reaches
//! its limit (checked once per control step) or after `horizon` steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation width: `[dx, dy, dz, q1, q2]`.
pub const OBS_DIM: usize = 5;
/// Action width: requested velocities of both joints, normalized to `[-1, 1]`.
pub const ACTION_DIM: usize = 2;

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Control period in seconds.
    pub dt: f64,
    /// Episode length `T` in control steps.
    pub horizon: usize,
    pub v_max_deg: f64,
    pub limit1_deg: f64,
    pub limit2_deg: f64,
    pub link1: f64,
    pub link2: f64,
    pub substeps: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            horizon: 100,
            v_max_deg: 20.0,
            limit1_deg: 150.0,
            limit2_deg: 80.0,
            link1: 0.36,
            link2: 0.42,
            substeps: 10,
        }
    }
}

impl EnvConfig {
    pub fn v_max(&self) -> f64 {
        self.v_max_deg.to_radians()
    }

    pub fn limits(&self) -> [f64; 2] {
        [self.limit1_deg.to_radians(), self.limit2_deg.to_radians()]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("env.dt", self.dt),
            ("env.v_max_deg", self.v_max_deg),
            ("env.limit1_deg", self.limit1_deg),
            ("env.limit2_deg", self.limit2_deg),
            ("env.link1", self.link1),
            ("env.link2", self.link2),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(
                    field,
                    format!("must be positive, got {v}"),
                ));
            }
        }
        if self.horizon == 0 {
            return Err(Error::validation("env.horizon", "must be >= 1"));
        }
        if self.substeps == 0 {
            return Err(Error::validation("env.substeps", "must be >= 1"));
        }
        Ok(())
    }
}

/// Ranges the randomizer draws drive and noise parameters from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainProfile {
    pub name: String,
    /// Relative observation noise, as a fraction.
    pub noise_pct: [f64; 2],
    pub stiffness: [f64; 2],
    pub damping: [f64; 2],
}

impl DomainProfile {
    /// Wide ranges used while pretraining.
    pub fn randomized() -> Self {
        Self {
            name: "randomized".into(),
            noise_pct: [0.2, 0.2],
            stiffness: [10.0, 1000.0],
            damping: [10.0, 1000.0],
        }
    }

    /// The shifted target domain: little noise, fixed soft drives.
    pub fn realistic() -> Self {
        Self {
            name: "realistic".into(),
            noise_pct: [0.0, 0.02],
            stiffness: [10.0, 10.0],
            damping: [20.0, 20.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, [lo, hi]) in [
            ("noise_pct", self.noise_pct),
            ("stiffness", self.stiffness),
            ("damping", self.damping),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return Err(Error::validation(
                    format!("domains.{}.{field}", self.name),
                    format!("need 0 <= lo <= hi, got [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }
}

/// One draw from a [`DomainProfile`] plus the episode's target.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainInstance {
    pub noise_pct: f64,
    pub stiffness: f64,
    pub damping: f64,
    /// 1-based index into the target set.
    pub target_id: usize,
    pub target_pos: Vec3,
}

fn draw<R: Rng + ?Sized>([lo, hi]: [f64; 2], rng: &mut R) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn sample_randomization<R: Rng + ?Sized>(
    profile: &DomainProfile,
    targets: &[Vec3],
    target_id: usize,
    rng: &mut R,
) -> Result<DomainInstance> {
    if targets.is_empty() {
        return Err(Error::Empty("target set"));
    }
    let target_pos = *target_id
        .checked_sub(1)
        .and_then(|i| targets.get(i))
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "target id {target_id} outside 1..={}",
                targets.len()
            ))
        })?;
    Ok(DomainInstance {
        noise_pct: draw(profile.noise_pct, rng),
        stiffness: draw(profile.stiffness, rng),
        damping: draw(profile.damping, rng),
        target_id,
        target_pos,
    })
}

/// End-effector position for joint angles `(q1, q2)`.
pub fn forward_kinematics(q1: f64, q2: f64, cfg: &EnvConfig) -> Vec3 {
    let radial = cfg.link2 * q2.sin();
    let z = cfg.link1 + cfg.link2 * q2.cos();
    let (s1, c1) = q1.sin_cos();
    [c1 * radial, s1 * radial, z]
}

/// Default target set: four yaw angles, each paired with a pitch in
/// `[55, 75]` degrees. Target 2 sits 5 degrees inside the joint-2 limit.
pub fn default_targets(cfg: &EnvConfig) -> Vec<Vec3> {
    [(-60.0, 65.0), (-20.0, 75.0), (20.0, 55.0), (60.0, 70.0)]
        .iter()
        .map(|&(yaw, pitch): &(f64, f64)| {
            forward_kinematics(yaw.to_radians(), pitch.to_radians(), cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    pub q: [f64; 2],
    pub qdot: [f64; 2],
    /// Drive setpoints, advanced by the commanded velocities.
    pub setpoint: [f64; 2],
    pub t: usize,
    pub target: Vec3,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Norm of the `(dx, dy, dz)` part.
    pub fn distance(&self) -> f64 {
        let [dx, dy, dz, _, _] = self.0;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: ArmState,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
    pub violated: bool,
    /// True end-effector to target distance after the step.
    pub distance: f64,
}

/// Which distance the reward and cost are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    TrueState,
    Observation,
}

pub fn env_reset(instance: &DomainInstance, _cfg: &EnvConfig) -> ArmState {
    ArmState {
        q: [0.0; 2],
        qdot: [0.0; 2],
        setpoint: [0.0; 2],
        t: 0,
        target: instance.target_pos,
        terminal: false,
    }
}

/// `(-d, 0)` while safe, `(0, d (T - t))` on the violating step.
pub fn reward_and_cost(distance: f64, violated: bool, t: usize, horizon: usize) -> (f64, f64) {
    if violated {
        (0.0, distance * horizon.saturating_sub(t) as f64)
    } else {
        (-distance, 0.0)
    }
}

fn distance(a: &Vec3, b: &Vec3) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn env_step(
    s: &ArmState,
    action: &[f64],
    inst: &DomainInstance,
    cfg: &EnvConfig,
) -> Result<StepOutcome> {
    if s.terminal || s.t >= cfg.horizon {
        return Err(Error::TerminalState(s.t));
    }
    if action.len() != ACTION_DIM {
        return Err(Error::DimensionMismatch {
            context: "env_step action",
            expected: ACTION_DIM,
            actual: action.len(),
        });
    }
    let v_max = cfg.v_max();
    let h = cfg.dt / cfg.substeps as f64;
    let (k, d) = (inst.stiffness, inst.damping);
    let denom = 1.0 + h * d + h * h * k;

    let mut next = s.clone();
    for (i, a) in action.iter().enumerate() {
        let u = a.clamp(-1.0, 1.0) * v_max;
        for _ in 0..cfg.substeps {
            next.setpoint[i] += u * h;
            next.qdot[i] = (next.qdot[i] + h * k * (next.setpoint[i] - next.q[i])) / denom;
            next.q[i] += h * next.qdot[i];
        }
    }

    let limits = cfg.limits();
    let violated = next.q.iter().zip(limits).any(|(q, lim)| q.abs() >= lim);
    let ee = forward_kinematics(next.q[0], next.q[1], cfg);
    let dist = distance(&ee, &s.target);
    let (reward, cost) = reward_and_cost(dist, violated, s.t, cfg.horizon);
    next.t = s.t + 1;
    let done = violated || next.t == cfg.horizon;
    next.terminal = done;
    Ok(StepOutcome {
        state: next,
        reward,
        cost,
        done,
        violated,
        distance: dist,
    })
}

/// Noise-free observation of `s`.
pub fn true_observation(s: &ArmState, cfg: &EnvConfig) -> Observation {
    let ee = forward_kinematics(s.q[0], s.q[1], cfg);
    Observation([
        s.target[0] - ee[0],
        s.target[1] - ee[1],
        s.target[2] - ee[2],
        s.q[0],
        s.q[1],
    ])
}

/// Observation with independent multiplicative noise `(1 + u)`,
/// `u ~ U(-noise_pct, noise_pct)`, on every component.
pub fn observe<R: Rng + ?Sized>(
    s: &ArmState,
    inst: &DomainInstance,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Observation {
    let mut obs = true_observation(s, cfg);
    if inst.noise_pct > 0.0 {
        for v in obs.0.iter_mut() {
            let u: f64 = rng.random_range(-1.0..=1.0) * inst.noise_pct;
            *v *= 1.0 + u;
        }
    }
    obs
}
