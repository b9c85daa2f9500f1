//! Closed-loop simulation: nonlinear plant, open-loop feedforward from a plan,
//! LQ feedback on the observer estimate, noisy and late pose fixes.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{rk_step, ControlInput, ModelError, ReducedState, RkOrder};
use crate::ocp::PlanTable;
use crate::params::ParamSet;
use crate::se2::{wrap_angle, GroupPose};
use crate::tracking::{
    guidance_error, FastMeasurement, GuidanceError, LinearModel, LqrDesign, Observer, ObserverNoise, PoseMeasurement,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("plant evaluation failed: {0}")]
    Model(#[from] ModelError),
    #[error("log csv: {0}")]
    Csv(String),
}

/// Measurement noise of the simulated sensors. Engineering defaults; the robot's
/// real figures are unknown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorNoise {
    pub pose_position: f64,
    pub pose_heading: f64,
    pub tilt: f64,
    pub gyro: f64,
    /// Standard deviation of one encoder reading, counts.
    pub encoder: f64,
    pub counts_per_rev: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self {
            pose_position: 2e-3,
            pose_heading: 1e-2,
            tilt: 5e-3,
            gyro: 2e-2,
            encoder: 1.0,
            counts_per_rev: 3600.0,
        }
    }
}

impl SensorNoise {
    pub fn zero() -> Self {
        Self {
            pose_position: 0.0,
            pose_heading: 0.0,
            tilt: 0.0,
            gyro: 0.0,
            encoder: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub plan: PlanTable,
    pub noise: SensorNoise,
    pub observer: ObserverNoise,
    pub pose_period: f64,
    pub delay_min: f64,
    pub delay_max: f64,
    pub control_period: f64,
    /// Plant integration step; RK4 needs it below about 0.7 ms for the motor
    /// circuits.
    pub substep: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(plan: PlanTable) -> Self {
        Self {
            plan,
            noise: SensorNoise::default(),
            observer: ObserverNoise::default(),
            pose_period: 0.02,
            delay_min: 0.013,
            delay_max: 0.148,
            control_period: 0.005,
            substep: 0.0005,
            seed: 0,
        }
    }

    /// Perfect sensors and an instant link.
    pub fn noiseless(plan: PlanTable) -> Self {
        Self {
            noise: SensorNoise::zero(),
            delay_min: 0.0,
            delay_max: 0.0,
            ..Self::new(plan)
        }
    }

    /// Reads the scenario text format; absent keys keep the defaults of
    /// [`Self::new`], or of [`Self::noiseless`] when `noiseless = true`.
    pub fn from_toml(src: &str, plan: PlanTable) -> Result<Self, SimError> {
        let f: ScenarioFile = toml::from_str(src).map_err(|e| SimError::Config(e.to_string()))?;
        let base = if f.noiseless { Self::noiseless(plan) } else { Self::new(plan) };
        let cfg = Self {
            noise: f.noise.unwrap_or(base.noise),
            pose_period: f.pose_period.unwrap_or(base.pose_period),
            delay_min: f.delay_min.unwrap_or(base.delay_min),
            delay_max: f.delay_max.unwrap_or(base.delay_max),
            control_period: f.control_period.unwrap_or(base.control_period),
            substep: f.substep.unwrap_or(base.substep),
            seed: f.seed.unwrap_or(base.seed),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn horizon(&self) -> f64 {
        self.plan.controls.len() as f64 * self.plan.step
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.control_period > 0.0 && self.pose_period > 0.0 && self.substep > 0.0) {
            return bad("periods must be positive");
        }
        if self.substep > 1e-3 {
            return bad("plant substep must not exceed 1 ms");
        }
        if !(0.0 <= self.delay_min && self.delay_min <= self.delay_max) {
            return bad("delay bounds must satisfy 0 <= min <= max");
        }
        if self.delay_max > 0.19 {
            return bad("delays beyond 190 ms exceed the observer buffer");
        }
        if self.plan.controls.is_empty() || self.plan.states.len() != self.plan.controls.len() + 1 {
            return bad("plan needs N controls and N + 1 states");
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    noiseless: bool,
    seed: Option<u64>,
    pose_period: Option<f64>,
    delay_min: Option<f64>,
    delay_max: Option<f64>,
    control_period: Option<f64>,
    substep: Option<f64>,
    noise: Option<SensorNoise>,
}

/// Plan state at time `t`, linear between nodes, held at the ends.
pub fn reference_at(plan: &PlanTable, t: f64) -> ReducedState {
    let n = plan.states.len() - 1;
    let s = (t / plan.step).max(0.0);
    let k = (s.floor() as usize).min(n);
    if k >= n {
        return plan.states[n];
    }
    let w = s - k as f64;
    let a = plan.states[k].to_array();
    let b = plan.states[k + 1].to_array();
    ReducedState::from_array(std::array::from_fn(|i| a[i] + w * (b[i] - a[i])))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimRecord {
    pub t: f64,
    pub truth: ReducedState,
    pub estimate: ReducedState,
    pub reference: ReducedState,
    pub feedforward: ControlInput,
    pub feedback: ControlInput,
    /// Saturated sum actually fed to the plant.
    pub applied: ControlInput,
    pub guidance: GuidanceError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub records: Vec<SimRecord>,
    /// Time at which the tilt left (-pi/2, pi/2), if it did.
    pub diverged_at: Option<f64>,
    pub pose_fixes: usize,
    pub stale_fixes: usize,
}

fn sat(u: f64, lim: f64) -> f64 {
    u.clamp(-lim, lim)
}

pub fn run_closed_loop(cfg: &ScenarioConfig, p: &ParamSet, design: &LqrDesign) -> Result<SimLog, SimError> {
    cfg.validate()?;
    let h = cfg.control_period;
    let ticks = (cfg.horizon() / h).round() as usize;
    let sub = (h / cfg.substep).ceil() as usize;
    let dt = h / sub as f64;
    let pose_every = ((cfg.pose_period / h).round() as usize).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = &cfg.noise;
    let gauss = |s: f64| Normal::new(0.0, s).expect("noise std is finite and non-negative");
    let (n_pos, n_head, n_tilt, n_gyro) = (gauss(n.pose_position), gauss(n.pose_heading), gauss(n.tilt), gauss(n.gyro));
    // Wheel speed from counts over one period, averaged over both wheels.
    let speed_std = n.encoder * std::f64::consts::TAU / n.counts_per_rev / h * p.wheel_radius / std::f64::consts::SQRT_2;
    let n_speed = gauss(speed_std);

    let model = LinearModel::new(p, h);
    let mut truth = cfg.plan.states[0];
    let mut obs = Observer::new(model, cfg.observer, truth, [1e-3; 9], 0.2);
    let mut pending: VecDeque<(f64, PoseMeasurement)> = VecDeque::new();
    let mut records = Vec::with_capacity(ticks);
    let mut u_prev = ControlInput::default();
    let mut fixes = 0;
    let mut diverged_at = None;

    for k in 0..ticks {
        let t = k as f64 * h;
        if k > 0 {
            let fast = FastMeasurement {
                alpha: truth.alpha + n_tilt.sample(&mut rng),
                v_alpha: truth.v_alpha + n_gyro.sample(&mut rng),
                v_d: truth.v_d + n_speed.sample(&mut rng),
                v_theta: truth.v_theta + n_gyro.sample(&mut rng),
            };
            obs.tick(u_prev, Some(fast));
        }
        if k % pose_every == 0 {
            let delay = if cfg.delay_max > cfg.delay_min {
                rng.random_range(cfg.delay_min..=cfg.delay_max)
            } else {
                cfg.delay_min
            };
            let m = PoseMeasurement {
                time: t,
                pose: GroupPose::new(
                    truth.x + n_pos.sample(&mut rng),
                    truth.y + n_pos.sample(&mut rng),
                    wrap_angle(truth.theta + n_head.sample(&mut rng)),
                ),
            };
            let at = pending.partition_point(|(a, _)| *a <= t + delay);
            pending.insert(at, (t + delay, m));
            fixes += 1;
        }
        while pending.front().is_some_and(|(a, _)| *a <= t + 1e-9) {
            let (_, m) = pending.pop_front().expect("front checked");
            obs.inject_pose(m);
        }

        let estimate = obs.estimate();
        let reference = reference_at(&cfg.plan, t);
        let feedforward = cfg.plan.control_at(t);
        let feedback = design.feedback(&estimate, &reference);
        let lim = p.bounds.voltage;
        let applied = ControlInput::new(
            sat(feedforward.u_r + feedback.u_r, lim),
            sat(feedforward.u_l + feedback.u_l, lim),
        );
        records.push(SimRecord {
            t,
            truth,
            estimate,
            reference,
            feedforward,
            feedback,
            applied,
            guidance: guidance_error(
                GroupPose::new(estimate.x, estimate.y, estimate.theta),
                GroupPose::new(reference.x, reference.y, reference.theta),
            ),
        });

        for _ in 0..sub {
            truth = rk_step(&truth, &applied, dt, RkOrder::Four, p)?;
        }
        u_prev = applied;
        if !(truth.alpha.abs() < std::f64::consts::FRAC_PI_2) || !truth.to_array().iter().all(|v| v.is_finite()) {
            diverged_at = Some(t + h);
            break;
        }
    }
    Ok(SimLog {
        records,
        diverged_at,
        pose_fixes: fixes,
        stale_fixes: obs.stale_dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TrackingMetrics {
    /// m
    pub position_max: f64,
    /// m
    pub position_rms: f64,
    /// rad
    pub heading_max: f64,
    /// rad
    pub heading_rms: f64,
    /// rad
    pub tilt_peak: f64,
    /// rad/s
    pub tilt_rate_peak: f64,
    /// V, over both channels
    pub feedback_peak: f64,
    /// V, over both channels
    pub feedback_rms: f64,
}

/// Errors are truth against reference.
pub fn tracking_metrics(records: &[SimRecord]) -> TrackingMetrics {
    let mut m = TrackingMetrics::default();
    if records.is_empty() {
        return m;
    }
    let (mut pos2, mut head2, mut fb2) = (0.0, 0.0, 0.0);
    for r in records {
        let e = (r.truth.x - r.reference.x).hypot(r.truth.y - r.reference.y);
        let eh = wrap_angle(r.truth.theta - r.reference.theta).abs();
        m.position_max = m.position_max.max(e);
        m.heading_max = m.heading_max.max(eh);
        m.tilt_peak = m.tilt_peak.max(r.truth.alpha.abs());
        m.tilt_rate_peak = m.tilt_rate_peak.max(r.truth.v_alpha.abs());
        m.feedback_peak = m.feedback_peak.max(r.feedback.u_r.abs()).max(r.feedback.u_l.abs());
        pos2 += e * e;
        head2 += eh * eh;
        fb2 += 0.5 * (r.feedback.u_r * r.feedback.u_r + r.feedback.u_l * r.feedback.u_l);
    }
    let n = records.len() as f64;
    m.position_rms = (pos2 / n).sqrt();
    m.heading_rms = (head2 / n).sqrt();
    m.feedback_rms = (fb2 / n).sqrt();
    m
}

impl TrackingMetrics {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metrics serialize")
    }
}

const STATE_COLS: [&str; 9] = ["x", "y", "theta", "alpha", "v_alpha", "v_d", "v_theta", "i_R", "i_L"];

/// Truth columns reuse the plan schema; estimate and reference carry prefixes.
pub fn log_csv_header() -> Vec<String> {
    let mut h: Vec<String> = vec!["t".into()];
    h.extend(STATE_COLS.iter().map(|s| s.to_string()));
    h.extend(["u_R", "u_L"].map(String::from));
    for prefix in ["est_", "ref_"] {
        h.extend(STATE_COLS.iter().map(|s| format!("{prefix}{s}")));
    }
    h.extend(["ff_R", "ff_L", "fb_R", "fb_L", "e_d", "e_theta"].map(String::from));
    h
}

pub fn write_log_csv<W: Write>(log: &SimLog, w: W) -> Result<(), SimError> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| SimError::Csv(e.to_string());
    wr.write_record(log_csv_header()).map_err(err)?;
    for r in &log.records {
        let mut v = vec![r.t];
        v.extend(r.truth.to_array());
        v.extend(r.applied.to_array());
        v.extend(r.estimate.to_array());
        v.extend(r.reference.to_array());
        v.extend(r.feedforward.to_array());
        v.extend(r.feedback.to_array());
        v.extend([r.guidance.e_d, r.guidance.e_theta]);
        wr.write_record(v.iter().map(|x| format!("{x}"))).map_err(err)?;
    }
    wr.flush().map_err(|e| SimError::Csv(e.to_string()))
}

pub fn read_log_csv<R: Read>(r: R) -> Result<Vec<SimRecord>, SimError> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| SimError::Csv(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != log_csv_header() {
        return Err(SimError::Csv("unexpected header".into()));
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| SimError::Csv(e.to_string()))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SimError::Csv(format!("row {}: {e}", line + 2)))?;
        if v.len() != header.len() {
            return Err(SimError::Csv(format!("row {}: {} columns", line + 2, v.len())));
        }
        let state = |o: usize| ReducedState::from_array(std::array::from_fn(|i| v[o + i]));
        out.push(SimRecord {
            t: v[0],
            truth: state(1),
            applied: ControlInput::new(v[10], v[11]),
            estimate: state(12),
            reference: state(21),
            feedforward: ControlInput::new(v[30], v[31]),
            feedback: ControlInput::new(v[32], v[33]),
            guidance: GuidanceError { e_d: v[34], e_theta: v[35] },
        });
    }
    Ok(out)
}
