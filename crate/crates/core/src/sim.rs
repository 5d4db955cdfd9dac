//! Fixed-step closed-loop simulation of the platoon.
//!
//! The plant integrates absolute gaps and speeds: the head vehicle follows a
//! prescribed speed profile, the CAV is a double integrator driven by its
//! delayed command, and the human drivers follow the optimal velocity model
//! (or its linearisation). The controller works on the linearised model:
//! prediction or predictor-observer, nominal feedback, barrier constraints
//! and the safety-filter QP.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{grid_steps, DelayedSignal};
use crate::model::{linearize_hv, AbsoluteState, Equilibrium, LinearHvCoeffs, OvmParams, Platoon, SystemMatrices};
use crate::numkernel::{expm, spectral_norm, DenseMatrix, DenseVector};
use crate::observer::{synthesize, ObserverDesign, ObserverState, OutputTransform};
use crate::predictor::{DisturbanceBounds, Predictor};
use crate::qp::{solve, FilterProblem};
use crate::safety::{
    assemble_constraints, h_vehicle, propagate_innovation, ConstraintContext, ConstraintMode, ErrorDecay,
    ObserverTerms, SafetyConstraint, SafetyParams,
};

/// Head-vehicle or follower disturbance applied from `onset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Head vehicle decelerates at `magnitude` for `duration`, then
    /// accelerates at `magnitude` back to the equilibrium speed.
    HeadBrake,
    /// The last follower accelerates at `magnitude` for `duration`, then
    /// returns to its car-following law.
    FollowerAccel,
    /// Head vehicle acceleration given piecewise constant over consecutive
    /// segments of `segment` seconds; zero afterwards.
    HeadSchedule { segment: f64, accels: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Acceleration magnitude (m/s²).
    pub magnitude: f64,
    /// Duration of the manoeuvre (s).
    pub duration: f64,
    /// Start of the manoeuvre (s).
    pub onset: f64,
    /// Simulated time (s).
    pub horizon: f64,
}

impl ScenarioSpec {
    /// Head braking with a recovery ramp and `settle` seconds to spare.
    pub fn head_brake(magnitude: f64, duration: f64, onset: f64, settle: f64) -> Self {
        Self { kind: ScenarioKind::HeadBrake, magnitude, duration, onset, horizon: onset + 2.0 * duration + settle }
    }

    pub fn follower_accel(magnitude: f64, duration: f64, onset: f64, settle: f64) -> Self {
        Self { kind: ScenarioKind::FollowerAccel, magnitude, duration, onset, horizon: onset + duration + settle }
    }

    pub fn head_schedule(segment: f64, accels: Vec<f64>, onset: f64, settle: f64) -> Self {
        let duration = segment * accels.len() as f64;
        Self {
            kind: ScenarioKind::HeadSchedule { segment, accels },
            magnitude: 0.0,
            duration,
            onset,
            horizon: onset + duration + settle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.magnitude, self.duration, self.onset, self.horizon].iter().all(|v| v.is_finite());
        if !finite || self.magnitude < 0.0 || self.duration < 0.0 || self.onset < 0.0 || self.horizon <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "scenario needs non-negative magnitude, duration and onset and a positive horizon: {self:?}"
            )));
        }
        if let ScenarioKind::HeadSchedule { segment, accels } = &self.kind {
            if !(*segment > 0.0) || accels.iter().any(|a| !a.is_finite()) {
                return Err(Error::InvalidInput(
                    "head schedule needs a positive segment and finite accelerations".into(),
                ));
            }
        }
        Ok(())
    }

    /// Head-vehicle acceleration before the speed clamp.
    fn raw_head_accel(&self, t: f64) -> f64 {
        let tt = t - self.onset;
        if tt < 0.0 {
            return 0.0;
        }
        match &self.kind {
            ScenarioKind::HeadBrake if tt < self.duration => -self.magnitude,
            ScenarioKind::HeadBrake if tt < 2.0 * self.duration => self.magnitude,
            ScenarioKind::HeadSchedule { segment, accels } => {
                accels.get((tt / segment).floor() as usize).copied().unwrap_or(0.0)
            }
            _ => 0.0,
        }
    }

    /// Override of the last follower's acceleration, if active at `t`.
    pub fn follower_override(&self, t: f64) -> Option<f64> {
        let tt = t - self.onset;
        match self.kind {
            ScenarioKind::FollowerAccel if (0.0..self.duration).contains(&tt) => Some(self.magnitude),
            _ => None,
        }
    }
}

/// Head-vehicle speed at time `t`, clamped at standstill.
pub fn head_profile(spec: &ScenarioSpec, t: f64, v_star: f64) -> f64 {
    let tt = t - spec.onset;
    if tt <= 0.0 {
        return v_star;
    }
    let speed = match &spec.kind {
        ScenarioKind::FollowerAccel => v_star,
        ScenarioKind::HeadBrake => {
            let (a, d) = (spec.magnitude, spec.duration);
            let bottom = (v_star - a * d).max(0.0);
            if tt < d {
                v_star - a * tt
            } else {
                (bottom + a * (tt - d)).min(v_star)
            }
        }
        ScenarioKind::HeadSchedule { segment, accels } => {
            // integrate segment by segment so the standstill clamp is sticky
            let mut v = v_star;
            let mut elapsed = 0.0;
            for &a in accels {
                if elapsed >= tt {
                    break;
                }
                let span = segment.min(tt - elapsed);
                v = (v + a * span).max(0.0);
                elapsed += segment;
            }
            v
        }
    };
    speed.max(0.0)
}

fn head_accel(spec: &ScenarioSpec, t: f64, v_star: f64) -> f64 {
    if head_profile(spec, t, v_star) <= 0.0 && spec.raw_head_accel(t) < 0.0 {
        0.0
    } else {
        spec.raw_head_accel(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    /// Predictor-based nominal feedback, no safety filter.
    Nominal,
    /// Safety filter designed for the undelayed system, fed the raw state.
    #[serde(rename = "stc-delayfree")]
    StcDelayFree,
    /// Delay-robust safety filter on the full-state prediction.
    #[serde(rename = "rstc-full")]
    RstcFullState,
    /// Delay- and estimation-robust filter on the predictor-observer.
    RstcObserver,
}

impl ControllerMode {
    pub const ALL: [ControllerMode; 4] = [
        ControllerMode::Nominal,
        ControllerMode::StcDelayFree,
        ControllerMode::RstcFullState,
        ControllerMode::RstcObserver,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerMode::Nominal => "nominal",
            ControllerMode::StcDelayFree => "stc-delayfree",
            ControllerMode::RstcFullState => "rstc-full",
            ControllerMode::RstcObserver => "rstc-observer",
        }
    }
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantModel {
    /// Optimal velocity model for the human drivers.
    Nonlinear,
    /// The same linearisation the controller uses.
    Linearized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Initial estimation-error bound used by the observer-robust constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsBarPolicy {
    /// 1.1 × the actual initial estimation error.
    Auto,
    Fixed(f64),
}

/// Physical and control parameters of one simulated platoon.
#[derive(Debug, Clone)]
pub struct PlatoonConfig {
    pub followers: usize,
    /// One driver model per follower; a single entry applies to all.
    pub drivers: Vec<OvmParams>,
    pub v_star: f64,
    pub dt: f64,
    pub tau_u: f64,
    pub tau_y: f64,
    pub safety: SafetyParams,
    pub bounds: DisturbanceBounds,
    /// Replaces the computed nominal gain when set.
    pub gain_override: Option<Vec<f64>>,
    /// Observer weights `Q = q·I`, `R = r·I`.
    pub observer_q: f64,
    pub observer_r: f64,
    pub eps_bar: EpsBarPolicy,
    /// Acceleration range of the human drivers (m/s²).
    pub hv_accel_limits: (f64, f64),
    /// Optional clamp of the filtered command (m/s²).
    pub u_limits: Option<(f64, f64)>,
    pub plant: PlantModel,
    pub integrator: Integrator,
}

impl Default for PlatoonConfig {
    fn default() -> Self {
        let followers = 4;
        let safety = SafetyParams::uniform(followers, 0.5, 1.0, 0.2, 3.0, 1e4);
        Self {
            followers,
            drivers: vec![OvmParams::default()],
            v_star: 20.0,
            dt: 0.01,
            tau_u: 0.4,
            tau_y: 0.8,
            safety,
            bounds: DisturbanceBounds::default(),
            gain_override: None,
            observer_q: 1.0,
            observer_r: 1.0,
            eps_bar: EpsBarPolicy::Auto,
            hv_accel_limits: (-8.0, f64::INFINITY),
            u_limits: None,
            plant: PlantModel::Nonlinear,
            integrator: Integrator::Euler,
        }
    }
}

impl PlatoonConfig {
    /// Copy with a different follower count; per-follower safety parameters
    /// are resized by repeating the last follower's entry.
    pub fn with_followers(&self, followers: usize) -> Self {
        let mut cfg = self.clone();
        cfg.followers = followers;
        let resize = |v: &mut Vec<f64>, n: usize| {
            let fill = v.last().copied().unwrap_or(1.0);
            v.resize(n, fill);
        };
        resize(&mut cfg.safety.psi, followers + 1);
        resize(&mut cfg.safety.eta, followers);
        resize(&mut cfg.safety.penalties, followers);
        let alpha_fill = *cfg.safety.alpha.last().expect("at least the CAV class-K function");
        cfg.safety.alpha.resize(followers + 1, alpha_fill);
        if cfg.drivers.len() > 1 {
            let fill = *cfg.drivers.last().expect("non-empty");
            cfg.drivers.resize(followers, fill);
        }
        if let Some(k) = &mut cfg.gain_override {
            k.resize(2 * followers + 2, 0.0);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.followers == 0 {
            return Err(Error::Config("the platoon needs at least one human-driven follower".into()));
        }
        if !(self.v_star > 0.0) {
            return Err(Error::Config(format!("v_star must be positive, got {}", self.v_star)));
        }
        grid_steps(self.tau_u, self.dt).map_err(|e| Error::Config(format!("tau_u: {e}")))?;
        grid_steps(self.tau_y, self.dt).map_err(|e| Error::Config(format!("tau_y: {e}")))?;
        if self.drivers.len() != 1 && self.drivers.len() != self.followers {
            return Err(Error::Config(format!(
                "{} driver models given for {} followers",
                self.drivers.len(),
                self.followers
            )));
        }
        for d in &self.drivers {
            d.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.safety.followers() != self.followers {
            return Err(Error::Config(format!(
                "safety parameters describe {} followers, platoon has {}",
                self.safety.followers(),
                self.followers
            )));
        }
        self.safety.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.bounds.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(k) = &self.gain_override {
            if k.len() != 2 * self.followers + 2 {
                return Err(Error::Config(format!(
                    "gain override has {} entries, state dimension is {}",
                    k.len(),
                    2 * self.followers + 2
                )));
            }
        }
        if !(self.observer_q > 0.0 && self.observer_r > 0.0) {
            return Err(Error::Config("observer weights must be positive".into()));
        }
        if let EpsBarPolicy::Fixed(v) = self.eps_bar {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("eps_bar must be non-negative, got {v}")));
            }
        }
        let (lo, hi) = self.hv_accel_limits;
        if !(lo < 0.0 && hi > 0.0) {
            return Err(Error::Config(format!("human-driver acceleration limits must bracket zero, got [{lo}, {hi}]")));
        }
        if let Some((lo, hi)) = self.u_limits {
            if !(lo < hi) {
                return Err(Error::Config(format!("command limits [{lo}, {hi}] are empty")));
            }
        }
        Ok(())
    }

    pub fn platoon(&self) -> Result<Platoon> {
        if self.drivers.len() == 1 {
            Platoon::homogeneous(self.followers, self.drivers[0], self.v_star)
        } else {
            Platoon::heterogeneous(self.drivers[0], self.drivers.clone(), self.v_star)
        }
    }

    /// Linearisation of the CAV's reference driver at the operating point,
    /// used by the nominal law.
    pub fn reference_coeffs(&self, platoon: &Platoon) -> LinearHvCoeffs {
        let eq = Equilibrium { v_star: platoon.v_star, s_star: platoon.gaps[0] };
        linearize_hv(&eq, &self.drivers[0])
    }

    /// `K = [a1, −a2, −2, 0.2, …, −2, 0.2]` unless overridden.
    pub fn nominal_gain(&self, platoon: &Platoon) -> DenseVector {
        if let Some(k) = &self.gain_override {
            return DenseVector::from_column_slice(k);
        }
        let c = self.reference_coeffs(platoon);
        let mut k = vec![c.a1, -c.a2];
        for _ in 0..platoon.followers() {
            k.extend([-2.0, 0.2]);
        }
        DenseVector::from_vec(k)
    }
}

/// Initial conditions different from the uniform-flow equilibrium.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Absolute initial gaps and speeds of vehicles `0..=N`.
    pub initial_state: Option<AbsoluteState>,
    /// Initial observer estimate (perturbation coordinates); zero by default.
    pub initial_estimate: Option<DenseVector>,
}

/// One logged control step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub head_speed: f64,
    /// Gaps of vehicles `0..=N` (m).
    pub gaps: Vec<f64>,
    /// Speeds of vehicles `0..=N` (m/s).
    pub speeds: Vec<f64>,
    /// Accelerations of vehicles `−1..=N` over the following step (m/s²).
    pub accels: Vec<f64>,
    pub u_nominal: f64,
    pub u_filtered: f64,
    /// `h_i = s_i − ψ_i v_i` for `i = 0..=N` on the true state.
    pub h: Vec<f64>,
    pub eps_norm: Option<f64>,
    /// Constraint rows and whether each was active at the QP optimum.
    pub constraints: Vec<(SafetyConstraint, bool)>,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub followers: usize,
    pub rows: Vec<StepRecord>,
}

/// First collision in a log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collision {
    pub t: f64,
    pub vehicle: usize,
}

/// Earliest grid time at which any gap is `≤ 0`.
pub fn detect_collision(log: &TrajectoryLog) -> Option<Collision> {
    log.rows
        .iter()
        .find_map(|row| row.gaps.iter().position(|&s| s <= 0.0).map(|vehicle| Collision { t: row.t, vehicle }))
}

/// Earliest collision of one vehicle with its leader.
pub fn detect_vehicle_collision(log: &TrajectoryLog, vehicle: usize) -> Option<Collision> {
    log.rows.iter().find(|row| row.gaps[vehicle] <= 0.0).map(|row| Collision { t: row.t, vehicle })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub collision: Option<Collision>,
    pub min_h: f64,
    pub min_gap: f64,
    pub max_abs_u: f64,
}

impl TrajectoryLog {
    pub fn summary(&self) -> Summary {
        let fold_min = |f: &dyn Fn(&StepRecord) -> f64| self.rows.iter().map(f).fold(f64::INFINITY, f64::min);
        Summary {
            collision: detect_collision(self),
            min_h: fold_min(&|r| r.h.iter().copied().fold(f64::INFINITY, f64::min)),
            min_gap: fold_min(&|r| r.gaps.iter().copied().fold(f64::INFINITY, f64::min)),
            max_abs_u: self.rows.iter().map(|r| r.u_filtered.abs()).fold(0.0, f64::max),
        }
    }

    /// Minimum over time of `h_i` for one vehicle.
    pub fn min_h_of(&self, vehicle: usize) -> f64 {
        self.rows.iter().map(|r| r.h[vehicle]).fold(f64::INFINITY, f64::min)
    }

    /// Column names of [`write_csv`](Self::write_csv).
    pub fn csv_header(&self) -> Vec<String> {
        let n = self.followers as isize;
        let mut cols = vec!["t".to_string()];
        cols.extend((-1..=n).map(|i| format!("s_{i}")));
        cols.extend((-1..=n).map(|i| format!("v_{i}")));
        cols.extend((-1..=n).map(|i| format!("a_{i}")));
        cols.push("u_nom".into());
        cols.push("u_filt".into());
        cols.extend((0..=n).map(|i| format!("h_{i}")));
        cols.push("eps_norm".into());
        cols
    }

    /// Writes one row per step. The head vehicle has no gap, so `s_-1` is
    /// always empty, as is `eps_norm` outside observer runs.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        let num = |v: f64| format!("{v:.6}");
        for row in &self.rows {
            let mut rec = vec![format!("{:.2}", row.t), String::new()];
            rec.extend(row.gaps.iter().map(|v| num(*v)));
            rec.push(num(row.head_speed));
            rec.extend(row.speeds.iter().map(|v| num(*v)));
            rec.extend(row.accels.iter().map(|v| num(*v)));
            rec.push(num(row.u_nominal));
            rec.push(num(row.u_filtered));
            rec.extend(row.h.iter().map(|v| num(*v)));
            rec.push(row.eps_norm.map(num).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Observer machinery of an observer-mode run.
#[derive(Debug, Clone)]
struct ObserverRig {
    state: ObserverState,
    transform: OutputTransform,
    transition_norm: f64,
    /// Perturbation states `x(t − k·dt)`, newest first.
    past_states: VecDeque<DenseVector>,
    channel_lags: Vec<usize>,
    big_y: DenseVector,
}

/// Step-by-step closed-loop simulation.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: PlatoonConfig,
    scenario: ScenarioSpec,
    mode: ControllerMode,
    platoon: Platoon,
    matrices: SystemMatrices,
    predictor: Predictor,
    gain: DenseVector,
    /// `a3`: feed-forward of the head-speed perturbation.
    feedforward: f64,
    u_hist: DelayedSignal,
    r_hist: DelayedSignal,
    observer: Option<ObserverRig>,
    state: AbsoluteState,
    step_index: usize,
    steps: usize,
    last_prediction: DenseVector,
}

impl Simulation {
    pub fn new(
        cfg: &PlatoonConfig,
        scenario: &ScenarioSpec,
        mode: ControllerMode,
        options: RunOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        scenario.validate().map_err(|e| Error::Config(e.to_string()))?;
        let platoon = cfg.platoon()?;
        let matrices = platoon.matrices();
        let predictor = Predictor::new(&matrices, cfg.tau_u, cfg.dt)?;
        let gain = cfg.nominal_gain(&platoon);
        let feedforward = cfg.reference_coeffs(&platoon).a3;
        let steps = (scenario.horizon / cfg.dt - 1e-9).ceil() as usize;
        let state = options.initial_state.clone().unwrap_or_else(|| platoon.equilibrium_state());
        if state.gaps.len() != cfg.followers + 1 || state.speeds.len() != cfg.followers + 1 {
            return Err(Error::InvalidInput("initial state has the wrong number of vehicles".into()));
        }
        let u_span = cfg.tau_u + cfg.tau_y;
        let u_hist = DelayedSignal::new(u_span, cfg.dt)?;
        let r_hist = DelayedSignal::new(cfg.tau_y, cfg.dt)?;

        let observer = if mode == ControllerMode::RstcObserver {
            let taus = [0.0, cfg.tau_y];
            let n = matrices.n;
            let ny = matrices.output_dim();
            let design: ObserverDesign = synthesize(
                &matrices,
                &taus,
                &(DenseMatrix::identity(n, n) * cfg.observer_q),
                &(DenseMatrix::identity(ny, ny) * cfg.observer_r),
            )?;
            let x0 = platoon.to_perturbation(&state);
            let x_hat = options.initial_estimate.clone().unwrap_or_else(|| DenseVector::zeros(n));
            if x_hat.len() != n {
                return Err(Error::InvalidInput("initial estimate has the wrong dimension".into()));
            }
            let eps_bar = match cfg.eps_bar {
                EpsBarPolicy::Auto => 1.1 * (&x0 - &x_hat).norm(),
                EpsBarPolicy::Fixed(v) => v,
            };
            let channel_lags: Vec<usize> = taus.iter().map(|&t| grid_steps(t, cfg.dt)).collect::<Result<_>>()?;
            let deepest = *channel_lags.iter().max().expect("two channels");
            // before the start the platoon coasts freely: x(θ) = e^{Aθ} x(0)
            let mut past_states = VecDeque::with_capacity(deepest + 1);
            for k in 0..=deepest {
                past_states.push_back(expm(&matrices.a, -(k as f64) * cfg.dt)? * &x0);
            }
            Some(ObserverRig {
                transition_norm: spectral_norm(predictor.transition())?,
                transform: OutputTransform::new(&matrices, cfg.tau_u, &taus, cfg.dt)?,
                state: ObserverState::new(x_hat, design, eps_bar)?,
                past_states,
                channel_lags,
                big_y: DenseVector::zeros(ny),
            })
        } else {
            None
        };

        Ok(Self {
            cfg: cfg.clone(),
            scenario: scenario.clone(),
            mode,
            last_prediction: DenseVector::zeros(matrices.n),
            platoon,
            matrices,
            predictor,
            gain,
            feedforward,
            u_hist,
            r_hist,
            observer,
            state,
            step_index: 0,
            steps,
        })
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.cfg.dt
    }

    pub fn is_finished(&self) -> bool {
        self.step_index >= self.steps
    }

    pub fn platoon(&self) -> &Platoon {
        &self.platoon
    }

    pub fn matrices(&self) -> &SystemMatrices {
        &self.matrices
    }

    pub fn state(&self) -> &AbsoluteState {
        &self.state
    }

    pub fn perturbation(&self) -> DenseVector {
        self.platoon.to_perturbation(&self.state)
    }

    /// Prediction formed during the last step (`x_p` or `x̂_p`).
    pub fn last_prediction(&self) -> &DenseVector {
        &self.last_prediction
    }

    pub fn observer_design(&self) -> Option<&ObserverDesign> {
        self.observer.as_ref().map(|o| &o.state.design)
    }

    pub fn eps_bar(&self) -> Option<f64> {
        self.observer.as_ref().map(|o| o.state.eps_bar)
    }

    /// Current estimate `x̂` (observer mode only).
    pub fn estimate(&self) -> Option<&DenseVector> {
        self.observer.as_ref().map(|o| &o.state.x_hat)
    }

    /// Transformed output `Y` formed during the last step.
    pub fn last_transformed_output(&self) -> Option<&DenseVector> {
        self.observer.as_ref().map(|o| &o.big_y)
    }

    /// Advances one control step and returns its record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.time();
        let dt = self.cfg.dt;
        let v_star = self.platoon.v_star;
        let x = self.platoon.to_perturbation(&self.state);
        let head_speed = head_profile(&self.scenario, t, v_star);
        let r = head_speed - v_star;
        self.r_hist.push(r);

        let mut eps_norm = None;
        let mut innovation_terms = None;
        let prediction_base = match &mut self.observer {
            Some(rig) => {
                let mut y = DenseVector::zeros(self.matrices.output_dim());
                for (c, &lag) in self.matrices.channels.iter().zip(&rig.channel_lags) {
                    y += c * &rig.past_states[lag];
                }
                rig.big_y = rig.transform.compose(&y, &self.u_hist, &self.r_hist)?;
                eps_norm = Some((&x - &rig.state.x_hat).norm());
                let innovation = rig.state.innovation(&rig.big_y);
                let propagated = propagate_innovation(self.predictor.transition(), &rig.state.design.gain, &innovation);
                let cert = rig.state.design.certificate;
                innovation_terms = Some((
                    propagated,
                    ErrorDecay {
                        transition_norm: rig.transition_norm,
                        upsilon: cert.upsilon,
                        lambda: cert.lambda,
                        eps_bar: rig.state.eps_bar,
                        t,
                    },
                ));
                rig.state.x_hat.clone()
            }
            None => x.clone(),
        };

        let delay_aware = self.mode != ControllerMode::StcDelayFree;
        let x_p = if delay_aware {
            self.predictor.predict_full(&prediction_base, &self.u_hist, r, t)?.x_p
        } else {
            prediction_base
        };
        let u_nominal = self.gain.dot(&x_p) + self.feedforward * r;

        let constraint_mode = match self.mode {
            ControllerMode::Nominal => None,
            ControllerMode::StcDelayFree => Some(ConstraintMode::DelayFree),
            ControllerMode::RstcFullState => Some(ConstraintMode::ActuatorRobust),
            ControllerMode::RstcObserver => Some(ConstraintMode::ObserverRobust),
        };
        let (mut u, constraints) = match constraint_mode {
            None => (u_nominal, Vec::new()),
            Some(cmode) => {
                let ctx = ConstraintContext {
                    platoon: &self.platoon,
                    matrices: &self.matrices,
                    params: &self.cfg.safety,
                    bounds: self.cfg.bounds,
                    tau_u: if delay_aware { self.cfg.tau_u } else { 0.0 },
                };
                let terms = innovation_terms
                    .as_ref()
                    .map(|(p, decay)| ObserverTerms { propagated_innovation: p, decay: *decay });
                let rows = assemble_constraints(&ctx, cmode, &x_p, r, terms.as_ref())?;
                let problem = FilterProblem::new(u_nominal, rows);
                let sol = solve(&problem)?;
                let flagged =
                    problem.constraints.into_iter().enumerate().map(|(k, c)| (c, sol.active.contains(&k))).collect();
                (sol.u, flagged)
            }
        };
        if let Some((lo, hi)) = self.cfg.u_limits {
            u = u.clamp(lo, hi);
        }
        self.last_prediction = x_p;

        self.u_hist.push(u);
        let u_applied = self.u_hist.sample(self.predictor.delay_steps())?;

        if let Some(rig) = &mut self.observer {
            let big_y = rig.big_y.clone();
            rig.state.step(&self.matrices, u_applied, r, &big_y, dt);
        }

        let mut accels = vec![head_accel(&self.scenario, t, v_star)];
        accels.extend(self.accelerations(t, &self.state, u_applied));
        let h = (0..=self.cfg.followers).map(|i| h_vehicle(i, &self.state, self.cfg.safety.psi[i])).collect();
        let record = StepRecord {
            t,
            head_speed,
            gaps: self.state.gaps.clone(),
            speeds: self.state.speeds.clone(),
            accels,
            u_nominal,
            u_filtered: u,
            h,
            eps_norm,
            constraints,
        };

        self.state = self.step_plant(t, u_applied);
        self.step_index += 1;
        if let Some(rig) = &mut self.observer {
            rig.past_states.pop_back();
            rig.past_states.push_front(self.platoon.to_perturbation(&self.state));
        }
        Ok(record)
    }

    /// Accelerations of vehicles `0..=N` at `(t, state)` for command `u_applied`.
    fn accelerations(&self, t: f64, state: &AbsoluteState, u_applied: f64) -> Vec<f64> {
        let n = self.cfg.followers;
        let (lo, hi) = self.cfg.hv_accel_limits;
        let mut acc = Vec::with_capacity(n + 1);
        acc.push(u_applied);
        for i in 1..=n {
            if i == n {
                if let Some(a) = self.scenario.follower_override(t) {
                    acc.push(a);
                    continue;
                }
            }
            let lead = state.speeds[i - 1];
            let raw = match self.cfg.plant {
                PlantModel::Nonlinear => {
                    let p = self.cfg.drivers.get(i - 1).unwrap_or(&self.cfg.drivers[0]);
                    p.accel(state.gaps[i], lead - state.speeds[i], state.speeds[i])
                }
                PlantModel::Linearized => {
                    let c = self.platoon.coeffs[i - 1];
                    let v_star = self.platoon.v_star;
                    c.a1 * (state.gaps[i] - self.platoon.gaps[i]) - c.a2 * (state.speeds[i] - v_star)
                        + c.a3 * (lead - v_star)
                }
            };
            acc.push(raw.clamp(lo, hi));
        }
        acc
    }

    fn derivative(&self, t: f64, state: &AbsoluteState, u_applied: f64) -> AbsoluteState {
        let head = head_profile(&self.scenario, t, self.platoon.v_star);
        let gaps =
            (0..state.gaps.len()).map(|i| if i == 0 { head } else { state.speeds[i - 1] } - state.speeds[i]).collect();
        AbsoluteState { gaps, speeds: self.accelerations(t, state, u_applied) }
    }

    /// Advances the plant by one step under a held CAV acceleration.
    pub fn step_plant(&self, t: f64, u_applied: f64) -> AbsoluteState {
        let dt = self.cfg.dt;
        let axpy = |base: &AbsoluteState, k: &AbsoluteState, h: f64| AbsoluteState {
            gaps: base.gaps.iter().zip(&k.gaps).map(|(a, b)| a + h * b).collect(),
            speeds: base.speeds.iter().zip(&k.speeds).map(|(a, b)| a + h * b).collect(),
        };
        let s = &self.state;
        match self.cfg.integrator {
            Integrator::Euler => axpy(s, &self.derivative(t, s, u_applied), dt),
            Integrator::Rk4 => {
                let k1 = self.derivative(t, s, u_applied);
                let k2 = self.derivative(t + 0.5 * dt, &axpy(s, &k1, 0.5 * dt), u_applied);
                let k3 = self.derivative(t + 0.5 * dt, &axpy(s, &k2, 0.5 * dt), u_applied);
                let k4 = self.derivative(t + dt, &axpy(s, &k3, dt), u_applied);
                let combine = |a: &[f64], b: &[f64], c: &[f64], d: &[f64], base: &[f64]| -> Vec<f64> {
                    (0..base.len()).map(|i| base[i] + dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i])).collect()
                };
                AbsoluteState {
                    gaps: combine(&k1.gaps, &k2.gaps, &k3.gaps, &k4.gaps, &s.gaps),
                    speeds: combine(&k1.speeds, &k2.speeds, &k3.speeds, &k4.speeds, &s.speeds),
                }
            }
        }
    }

    /// Runs to the horizon.
    pub fn run_to_end(mut self) -> Result<TrajectoryLog> {
        let mut log = TrajectoryLog { followers: self.cfg.followers, rows: Vec::with_capacity(self.steps) };
        while !self.is_finished() {
            log.rows.push(self.step()?);
        }
        Ok(log)
    }
}

pub fn run(cfg: &PlatoonConfig, scenario: &ScenarioSpec, mode: ControllerMode) -> Result<TrajectoryLog> {
    run_with(cfg, scenario, mode, RunOptions::default())
}

pub fn run_with(
    cfg: &PlatoonConfig,
    scenario: &ScenarioSpec,
    mode: ControllerMode,
    options: RunOptions,
) -> Result<TrajectoryLog> {
    Simulation::new(cfg, scenario, mode, options)?.run_to_end()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn row(t: f64, gaps: Vec<f64>) -> StepRecord {
        let n = gaps.len();
        StepRecord {
            t,
            head_speed: 20.0,
            gaps,
            speeds: vec![20.0; n],
            accels: vec![0.0; n + 1],
            u_nominal: 0.0,
            u_filtered: 0.0,
            h: vec![1.0; n],
            eps_norm: None,
            constraints: Vec::new(),
        }
    }

    #[test]
    fn head_brake_profile_is_a_symmetric_ramp() {
        let s = ScenarioSpec::head_brake(5.0, 3.5, 5.0, 20.0);
        assert_eq!(head_profile(&s, 0.0, 20.0), 20.0);
        assert_eq!(head_profile(&s, 5.0, 20.0), 20.0);
        assert_relative_eq!(head_profile(&s, 6.0, 20.0), 15.0, epsilon = 1e-12);
        assert_relative_eq!(head_profile(&s, 8.5, 20.0), 2.5, epsilon = 1e-12);
        assert_relative_eq!(head_profile(&s, 10.0, 20.0), 10.0, epsilon = 1e-12);
        assert_relative_eq!(head_profile(&s, 12.0, 20.0), 20.0, epsilon = 1e-12);
        assert_eq!(head_profile(&s, 30.0, 20.0), 20.0);
        assert_relative_eq!(s.horizon, 32.0);
    }

    #[test]
    fn head_speed_never_goes_negative() {
        let s = ScenarioSpec::head_brake(5.0, 6.0, 0.0, 1.0);
        assert_eq!(head_profile(&s, 5.0, 20.0), 0.0);
        assert_eq!(head_accel(&s, 5.0, 20.0), 0.0);
        // recovery starts from standstill, not from the unclamped −10 m/s
        assert_relative_eq!(head_profile(&s, 7.0, 20.0), 5.0, epsilon = 1e-12);

        let sched = ScenarioSpec::head_schedule(1.0, vec![-15.0, -15.0, 4.0], 0.0, 1.0);
        assert_eq!(head_profile(&sched, 2.0, 20.0), 0.0);
        assert_relative_eq!(head_profile(&sched, 2.5, 20.0), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn schedule_integrates_piecewise_constant_acceleration() {
        let s = ScenarioSpec::head_schedule(0.5, vec![2.0, -4.0, 1.0], 1.0, 2.0);
        assert_relative_eq!(head_profile(&s, 1.25, 20.0), 20.5, epsilon = 1e-12);
        assert_relative_eq!(head_profile(&s, 2.0, 20.0), 19.0, epsilon = 1e-12);
        assert_relative_eq!(head_profile(&s, 2.5, 20.0), 19.5, epsilon = 1e-12);
        assert_relative_eq!(head_profile(&s, 4.0, 20.0), 19.5, epsilon = 1e-12);
        assert_eq!(s.raw_head_accel(1.6), -4.0);
        assert_eq!(s.raw_head_accel(2.6), 0.0);
    }

    #[test]
    fn follower_override_window() {
        let s = ScenarioSpec::follower_accel(5.0, 2.6, 5.0, 20.0);
        assert_eq!(s.follower_override(4.99), None);
        assert_eq!(s.follower_override(5.0), Some(5.0));
        assert_eq!(s.follower_override(7.59), Some(5.0));
        assert_eq!(s.follower_override(7.61), None);
        assert_eq!(head_profile(&s, 6.0, 20.0), 20.0);
    }

    #[test]
    fn collision_detection() {
        let calm =
            TrajectoryLog { followers: 1, rows: (0..10).map(|k| row(k as f64 * 0.01, vec![24.0, 24.0])).collect() };
        assert_eq!(detect_collision(&calm), None);

        let mut rows: Vec<_> = (0..10).map(|k| row(k as f64 * 0.01, vec![24.0 - 4.0 * k as f64, 24.0])).collect();
        rows[8].gaps[1] = -1.0;
        let log = TrajectoryLog { followers: 1, rows };
        // s_0 = 24 − 4k reaches 0 at k = 6
        assert_eq!(detect_collision(&log), Some(Collision { t: 0.06, vehicle: 0 }));
        assert_eq!(detect_vehicle_collision(&log, 1), Some(Collision { t: 0.08, vehicle: 1 }));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ControllerMode::ALL {
            assert_eq!(m.as_str().parse::<ControllerMode>().unwrap(), m);
        }
        assert!("theorem".parse::<ControllerMode>().is_err());
    }

    #[test]
    fn serde_names_match_cli_names() {
        #[derive(Deserialize)]
        struct Wrap {
            mode: ControllerMode,
        }
        for m in ControllerMode::ALL {
            let w: Wrap = toml::from_str(&format!("mode = \"{}\"", m.as_str())).unwrap();
            assert_eq!(w.mode, m);
        }
    }

    #[test]
    fn configuration_errors_are_caught_before_running() {
        let base = PlatoonConfig::default();
        let bad = [
            PlatoonConfig { dt: 0.013, ..base.clone() },
            PlatoonConfig { followers: 0, ..base.clone() },
            PlatoonConfig { hv_accel_limits: (1.0, 2.0), ..base.clone() },
            PlatoonConfig { eps_bar: EpsBarPolicy::Fixed(-1.0), ..base.clone() },
            PlatoonConfig { gain_override: Some(vec![1.0; 3]), ..base.clone() },
            PlatoonConfig { followers: 3, ..base.clone() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(base.validate().is_ok());
        assert!(base.with_followers(2).validate().is_ok());
    }

    #[test]
    fn resized_platoon_keeps_per_vehicle_parameters_consistent() {
        let cfg = PlatoonConfig::default().with_followers(6);
        assert_eq!(cfg.safety.psi.len(), 7);
        assert_eq!(cfg.safety.alpha.len(), 7);
        assert_eq!(cfg.safety.eta.len(), 6);
        assert_eq!(cfg.nominal_gain(&cfg.platoon().unwrap()).len(), 14);
    }

    #[test]
    fn delay_free_and_robust_filters_agree_without_delay() {
        // with no delay the predictor is the identity on the state
        let cfg = PlatoonConfig { tau_u: 0.0, ..PlatoonConfig::default() };
        let s = ScenarioSpec::head_brake(5.0, 1.0, 0.2, 1.0);
        let a = run(&cfg, &s, ControllerMode::StcDelayFree).unwrap();
        let b = run(&cfg, &s, ControllerMode::RstcFullState).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert!((x.u_filtered - y.u_filtered).abs() < 1e-9, "t = {}", x.t);
        }
    }
}
