//! TOML run configuration.
//!
//! Every section and key is optional; omitted values take the defaults
//! below, which are the published experiment's values where it states them.
//! `config/default.toml` spells the whole file out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OvmParams;
use crate::predictor::DisturbanceBounds;
use crate::safety::{ClassK, SafetyParams};
use crate::sim::{ControllerMode, EpsBarPolicy, Integrator, PlantModel, PlatoonConfig, ScenarioSpec};
use crate::sweep::{SweepScenario, SweepSettings};

/// A scalar applied to every vehicle, or one value per vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerVehicle<T> {
    All(T),
    Each(Vec<T>),
}

impl<T: Clone> PerVehicle<T> {
    fn expand(&self, count: usize, key: &str) -> Result<Vec<T>> {
        match self {
            PerVehicle::All(v) => Ok(vec![v.clone(); count]),
            PerVehicle::Each(vs) if vs.len() == count => Ok(vs.clone()),
            PerVehicle::Each(vs) => Err(Error::Config(format!("{key}: expected {count} entries, found {}", vs.len()))),
        }
    }
}

/// `eps_bar = "auto"` or a non-negative number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsBarSetting(pub EpsBarPolicy);

impl Serialize for EpsBarSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            EpsBarPolicy::Auto => s.serialize_str("auto"),
            EpsBarPolicy::Fixed(v) => s.serialize_f64(v),
        }
    }
}

impl<'de> Deserialize<'de> for EpsBarSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Self(EpsBarPolicy::Fixed(v))),
            Raw::Int(v) => Ok(Self(EpsBarPolicy::Fixed(v as f64))),
            Raw::Word(w) if w == "auto" => Ok(Self(EpsBarPolicy::Auto)),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("eps_bar must be a number or \"auto\", got \"{w}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatoonSection {
    /// Number of human-driven followers `N`.
    pub followers: usize,
    pub v_star: f64,
    /// Driver model shared by all followers, unless `drivers` is given.
    pub ovm: OvmParams,
    /// One driver model per follower.
    pub drivers: Option<Vec<OvmParams>>,
    /// Lower acceleration limit of the human drivers (m/s²).
    pub hv_accel_min: f64,
    /// Upper acceleration limit of the human drivers (m/s²); omit for none.
    pub hv_accel_max: Option<f64>,
}

impl Default for PlatoonSection {
    fn default() -> Self {
        Self {
            followers: 4,
            v_star: 20.0,
            ovm: OvmParams::default(),
            drivers: None,
            hv_accel_min: -8.0,
            hv_accel_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelaySection {
    pub dt: f64,
    pub tau_u: f64,
    pub tau_y: f64,
}

impl Default for DelaySection {
    fn default() -> Self {
        Self { dt: 0.01, tau_u: 0.4, tau_y: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetySection {
    /// CAV time headway (s).
    pub psi0: f64,
    /// Follower time headways (s).
    pub psi: PerVehicle<f64>,
    pub eta: PerVehicle<f64>,
    /// Class-K functions of the CAV row followed by the follower rows, or
    /// one function for all.
    pub class_k: PerVehicle<ClassK>,
    /// Slack penalties of the follower rows.
    pub penalty: PerVehicle<f64>,
    /// Bounds on the head-vehicle acceleration (m/s²).
    pub a_low: f64,
    pub a_up: f64,
    pub eps_bar: EpsBarSetting,
}

impl Default for SafetySection {
    fn default() -> Self {
        Self {
            psi0: 0.5,
            psi: PerVehicle::All(1.0),
            eta: PerVehicle::All(0.2),
            class_k: PerVehicle::All(ClassK::Linear { gamma: 3.0 }),
            penalty: PerVehicle::All(1e4),
            a_low: -5.0,
            a_up: 5.0,
            eps_bar: EpsBarSetting(EpsBarPolicy::Auto),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub mode: ControllerMode,
    /// Full nominal gain; by default `[a1, −a2, −2, 0.2, …]` from the
    /// linearisation.
    pub gain: Option<Vec<f64>>,
    pub u_min: Option<f64>,
    pub u_max: Option<f64>,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self { mode: ControllerMode::RstcFullState, gain: None, u_min: None, u_max: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manoeuvre {
    pub magnitude: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: SweepScenario,
    pub onset: f64,
    /// Simulated time after the manoeuvre ends (s).
    pub settle: f64,
    pub head_brake: Manoeuvre,
    pub follower_accel: Manoeuvre,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            kind: SweepScenario::HeadBrake,
            onset: 5.0,
            settle: 20.0,
            head_brake: Manoeuvre { magnitude: 5.0, duration: 3.5 },
            follower_accel: Manoeuvre { magnitude: 5.0, duration: 2.6 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverSection {
    /// `Q = q·I`.
    pub q: f64,
    /// `R = r·I`.
    pub r: f64,
}

impl Default for ObserverSection {
    fn default() -> Self {
        Self { q: 1.0, r: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub integrator: Integrator,
    pub plant: PlantModel,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { integrator: Integrator::Euler, plant: PlantModel::Nonlinear }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Platoon size used by sweeps, independent of `platoon.followers`.
    pub followers: usize,
    pub scenarios: Vec<SweepScenario>,
    pub modes: Vec<ControllerMode>,
    pub taus: Vec<f64>,
    pub resolution: f64,
    pub head_brake_cap: f64,
    pub follower_accel_cap: f64,
    pub settle: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = SweepSettings::default();
        Self {
            followers: 2,
            scenarios: vec![SweepScenario::HeadBrake, SweepScenario::FollowerAccel],
            modes: vec![ControllerMode::Nominal, ControllerMode::RstcFullState],
            taus: vec![0.2, 0.4, 0.6, 0.8],
            resolution: s.resolution,
            head_brake_cap: s.head_brake_cap,
            follower_accel_cap: s.follower_accel_cap,
            settle: s.settle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub trajectory: String,
    pub sweep: String,
    pub constraints: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            trajectory: "trajectory.csv".into(),
            sweep: "safety_region.csv".into(),
            constraints: "constraints.txt".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub platoon: PlatoonSection,
    pub delays: DelaySection,
    pub safety: SafetySection,
    pub controller: ControllerSection,
    pub scenario: ScenarioSection,
    pub observer: ObserverSection,
    pub sim: SimSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks everything that can be checked without running a simulation.
    pub fn validate(&self) -> Result<()> {
        self.platoon_config()?.validate()?;
        self.scenario_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        let sweep = &self.sweep;
        if sweep.followers == 0 {
            return Err(Error::Config("sweep.followers must be at least 1".into()));
        }
        if sweep.modes.is_empty() || sweep.scenarios.is_empty() || sweep.taus.is_empty() {
            return Err(Error::Config("sweep needs at least one scenario, mode and delay".into()));
        }
        for &tau in &sweep.taus {
            crate::history::grid_steps(tau, self.delays.dt).map_err(|e| Error::Config(format!("sweep.taus: {e}")))?;
        }
        self.sweep_settings().validate()?;
        Ok(())
    }

    /// Safety parameters for a platoon of `followers`.
    fn safety_params(&self, followers: usize) -> Result<SafetyParams> {
        let s = &self.safety;
        let mut psi = vec![s.psi0];
        psi.extend(s.psi.expand(followers, "safety.psi")?);
        Ok(SafetyParams {
            psi,
            eta: s.eta.expand(followers, "safety.eta")?,
            alpha: s.class_k.expand(followers + 1, "safety.class_k")?,
            penalties: s.penalty.expand(followers, "safety.penalty")?,
        })
    }

    /// Simulation parameters for `platoon.followers` followers.
    pub fn platoon_config(&self) -> Result<PlatoonConfig> {
        self.platoon_config_for(self.platoon.followers)
    }

    /// Sweep platoons may differ in size from the simulated one; per-vehicle
    /// lists must then be scalars.
    pub fn sweep_platoon_config(&self) -> Result<PlatoonConfig> {
        self.platoon_config_for(self.sweep.followers)
    }

    fn platoon_config_for(&self, followers: usize) -> Result<PlatoonConfig> {
        let p = &self.platoon;
        let drivers = match &p.drivers {
            Some(d) if d.len() == followers => d.clone(),
            Some(d) => {
                return Err(Error::Config(format!("platoon.drivers: expected {followers} entries, found {}", d.len())))
            }
            None => vec![p.ovm],
        };
        let u_limits = match (self.controller.u_min, self.controller.u_max) {
            (None, None) => None,
            (lo, hi) => Some((lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))),
        };
        Ok(PlatoonConfig {
            followers,
            drivers,
            v_star: p.v_star,
            dt: self.delays.dt,
            tau_u: self.delays.tau_u,
            tau_y: self.delays.tau_y,
            safety: self.safety_params(followers)?,
            bounds: DisturbanceBounds { a_low: self.safety.a_low, a_up: self.safety.a_up },
            gain_override: self.controller.gain.clone(),
            observer_q: self.observer.q,
            observer_r: self.observer.r,
            eps_bar: self.safety.eps_bar.0,
            hv_accel_limits: (p.hv_accel_min, p.hv_accel_max.unwrap_or(f64::INFINITY)),
            u_limits,
            plant: self.sim.plant,
            integrator: self.sim.integrator,
        })
    }

    pub fn scenario_spec(&self) -> ScenarioSpec {
        let s = &self.scenario;
        match s.kind {
            SweepScenario::HeadBrake => {
                ScenarioSpec::head_brake(s.head_brake.magnitude, s.head_brake.duration, s.onset, s.settle)
            }
            SweepScenario::FollowerAccel => {
                ScenarioSpec::follower_accel(s.follower_accel.magnitude, s.follower_accel.duration, s.onset, s.settle)
            }
        }
    }

    pub fn sweep_settings(&self) -> SweepSettings {
        SweepSettings {
            head_brake_accel: self.scenario.head_brake.magnitude,
            follower_accel: self.scenario.follower_accel.magnitude,
            head_brake_cap: self.sweep.head_brake_cap,
            follower_accel_cap: self.sweep.follower_accel_cap,
            resolution: self.sweep.resolution,
            onset: self.scenario.onset,
            settle: self.sweep.settle,
        }
    }
}
