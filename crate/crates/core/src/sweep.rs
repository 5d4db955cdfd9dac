//! Safety regions: the largest disturbance, expressed as a speed, that a
//! controller survives without a rear-end collision.
//!
//! The disturbance acceleration is held at its configured magnitude and the
//! manoeuvre duration is bisected on a fixed grid. Scenario 1 maps a duration
//! `t` to the head vehicle's minimum speed `v* − a·t`; Scenario 2 maps it to
//! the last follower's peak speed `v* + a·t`.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{detect_vehicle_collision, run, ControllerMode, PlatoonConfig, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepScenario {
    HeadBrake,
    FollowerAccel,
}

impl SweepScenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepScenario::HeadBrake => "head-brake",
            SweepScenario::FollowerAccel => "follower-accel",
        }
    }
}

impl fmt::Display for SweepScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a region is classified on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionTarget {
    Vehicle(usize),
    /// Any gap in the platoon.
    Chain,
}

impl fmt::Display for RegionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionTarget::Vehicle(0) => f.write_str("cav"),
            RegionTarget::Vehicle(i) => write!(f, "hv{i}"),
            RegionTarget::Chain => f.write_str("chain"),
        }
    }
}

/// Disturbance grid shared by every point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub head_brake_accel: f64,
    pub follower_accel: f64,
    /// Longest duration tried per scenario (s).
    pub head_brake_cap: f64,
    pub follower_accel_cap: f64,
    /// Bisection resolution in duration (s).
    pub resolution: f64,
    pub onset: f64,
    /// Simulated time after the manoeuvre ends (s).
    pub settle: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            head_brake_accel: 5.0,
            follower_accel: 5.0,
            // the head vehicle stops after v*/a = 4 s
            head_brake_cap: 4.0,
            // reaches 50 m/s from 20 m/s
            follower_accel_cap: 6.0,
            resolution: 0.02,
            onset: 5.0,
            settle: 20.0,
        }
    }
}

impl SweepSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.head_brake_accel,
            self.follower_accel,
            self.head_brake_cap,
            self.follower_accel_cap,
            self.resolution,
            self.settle,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.onset >= 0.0) {
            return Err(Error::Config(format!("sweep settings must be positive: {self:?}")));
        }
        Ok(())
    }

    fn accel(&self, scenario: SweepScenario) -> f64 {
        match scenario {
            SweepScenario::HeadBrake => self.head_brake_accel,
            SweepScenario::FollowerAccel => self.follower_accel,
        }
    }

    fn cap(&self, scenario: SweepScenario) -> f64 {
        match scenario {
            SweepScenario::HeadBrake => self.head_brake_cap,
            SweepScenario::FollowerAccel => self.follower_accel_cap,
        }
    }

    pub fn scenario(&self, scenario: SweepScenario, duration: f64) -> ScenarioSpec {
        let a = self.accel(scenario);
        match scenario {
            SweepScenario::HeadBrake => ScenarioSpec::head_brake(a, duration, self.onset, self.settle),
            SweepScenario::FollowerAccel => ScenarioSpec::follower_accel(a, duration, self.onset, self.settle),
        }
    }

    /// `v* − a·t` for head braking, `v* + a·t` for follower acceleration.
    pub fn boundary_speed(&self, scenario: SweepScenario, v_star: f64, duration: f64) -> f64 {
        match scenario {
            SweepScenario::HeadBrake => v_star - self.head_brake_accel * duration,
            SweepScenario::FollowerAccel => v_star + self.follower_accel * duration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boundary {
    pub target: RegionTarget,
    /// Longest collision-free duration on the grid (s).
    pub safe_duration: f64,
    pub boundary_speed: f64,
    /// The cap itself was collision-free; the true boundary lies beyond.
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyRegionResult {
    pub scenario: SweepScenario,
    pub mode: ControllerMode,
    pub tau_u: f64,
    /// One entry per vehicle `0..=N`, then the chain.
    pub boundaries: Vec<Boundary>,
}

impl SafetyRegionResult {
    pub fn chain(&self) -> &Boundary {
        self.boundaries.iter().find(|b| b.target == RegionTarget::Chain).expect("chain boundary is always present")
    }

    pub fn vehicle(&self, i: usize) -> Option<&Boundary> {
        self.boundaries.iter().find(|b| b.target == RegionTarget::Vehicle(i))
    }
}

/// Per-vehicle collision flags of one simulation, memoised by grid index.
struct Oracle<'a> {
    cfg: &'a PlatoonConfig,
    settings: &'a SweepSettings,
    scenario: SweepScenario,
    mode: ControllerMode,
    cache: HashMap<usize, Vec<bool>>,
}

impl Oracle<'_> {
    fn collided(&mut self, index: usize, target: RegionTarget) -> Result<bool> {
        if !self.cache.contains_key(&index) {
            let duration = index as f64 * self.settings.resolution;
            let log = run(self.cfg, &self.settings.scenario(self.scenario, duration), self.mode)?;
            let flags = (0..=self.cfg.followers).map(|i| detect_vehicle_collision(&log, i).is_some()).collect();
            self.cache.insert(index, flags);
        }
        let flags = &self.cache[&index];
        Ok(match target {
            RegionTarget::Vehicle(i) => flags[i],
            RegionTarget::Chain => flags.iter().any(|&c| c),
        })
    }
}

/// Safety region of one controller at one actuator delay.
///
/// Collision is assumed monotone in the manoeuvre duration; zero duration is
/// the undisturbed equilibrium and is never simulated.
pub fn safety_region(
    cfg: &PlatoonConfig,
    mode: ControllerMode,
    scenario: SweepScenario,
    tau_u: f64,
    settings: &SweepSettings,
) -> Result<SafetyRegionResult> {
    settings.validate()?;
    let cfg = PlatoonConfig { tau_u, ..cfg.clone() };
    cfg.validate()?;
    let top = (settings.cap(scenario) / settings.resolution).round() as usize;
    let mut oracle = Oracle { cfg: &cfg, settings, scenario, mode, cache: HashMap::new() };

    let targets = (0..=cfg.followers).map(RegionTarget::Vehicle).chain([RegionTarget::Chain]);
    let mut boundaries = Vec::with_capacity(cfg.followers + 2);
    for target in targets {
        let (safe, capped) = if !oracle.collided(top, target)? {
            (top, true)
        } else {
            // invariant: `lo` safe, `hi` collides
            let (mut lo, mut hi) = (0usize, top);
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if oracle.collided(mid, target)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            (lo, false)
        };
        let safe_duration = safe as f64 * settings.resolution;
        boundaries.push(Boundary {
            target,
            safe_duration,
            boundary_speed: settings.boundary_speed(scenario, cfg.v_star, safe_duration),
            capped,
        });
    }
    Ok(SafetyRegionResult { scenario, mode, tau_u, boundaries })
}

/// Cross product of scenarios, modes and delays, computed in parallel on the
/// current rayon pool. Row order is deterministic: scenario, mode, delay.
pub fn sweep_delays(
    cfg: &PlatoonConfig,
    scenarios: &[SweepScenario],
    modes: &[ControllerMode],
    taus: &[f64],
    settings: &SweepSettings,
) -> Result<Vec<SafetyRegionResult>> {
    if scenarios.is_empty() || modes.is_empty() || taus.is_empty() {
        return Err(Error::Config("a sweep needs at least one scenario, mode and delay".into()));
    }
    let grid: Vec<_> =
        scenarios.iter().flat_map(|&s| modes.iter().flat_map(move |&m| taus.iter().map(move |&t| (s, m, t)))).collect();
    grid.into_par_iter().map(|(s, m, t)| safety_region(cfg, m, s, t, settings)).collect()
}

pub const CSV_HEADER: [&str; 5] = ["scenario", "mode", "tau_u", "vehicle", "boundary_speed_mps"];

pub fn write_table<W: Write>(results: &[SafetyRegionResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for res in results {
        for b in &res.boundaries {
            w.write_record([
                res.scenario.to_string(),
                res.mode.to_string(),
                format!("{:.2}", res.tau_u),
                b.target.to_string(),
                format!("{:.2}", b.boundary_speed),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn boundary_speed_mapping() {
        let s = SweepSettings::default();
        assert_relative_eq!(s.boundary_speed(SweepScenario::HeadBrake, 20.0, 3.5), 2.5, epsilon = 1e-12);
        assert_relative_eq!(s.boundary_speed(SweepScenario::FollowerAccel, 20.0, 6.0), 50.0, epsilon = 1e-12);
        // one bisection cell is 0.1 m/s
        assert_relative_eq!(s.resolution * s.head_brake_accel, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn target_labels() {
        assert_eq!(RegionTarget::Vehicle(0).to_string(), "cav");
        assert_eq!(RegionTarget::Vehicle(2).to_string(), "hv2");
        assert_eq!(RegionTarget::Chain.to_string(), "chain");
    }

    #[test]
    fn empty_grid_is_rejected() {
        let cfg = PlatoonConfig::default().with_followers(2);
        let err = sweep_delays(&cfg, &[SweepScenario::HeadBrake], &[], &[0.4], &SweepSettings::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn bisection_brackets_the_boundary() {
        let cfg = PlatoonConfig::default().with_followers(2);
        let settings = SweepSettings { settle: 15.0, ..SweepSettings::default() };
        let res = safety_region(&cfg, ControllerMode::Nominal, SweepScenario::HeadBrake, 0.4, &settings).unwrap();
        let chain = *res.chain();
        assert!(!chain.capped);
        let tau_cfg = PlatoonConfig { tau_u: 0.4, ..cfg };
        let collides = |d: f64| {
            let log = run(&tau_cfg, &settings.scenario(SweepScenario::HeadBrake, d), ControllerMode::Nominal).unwrap();
            crate::sim::detect_collision(&log).is_some()
        };
        assert!(!collides(chain.safe_duration));
        assert!(collides(chain.safe_duration + settings.resolution));
        // the chain is no safer than its weakest vehicle
        for b in &res.boundaries {
            assert!(chain.safe_duration <= b.safe_duration + 1e-12);
        }
    }
}
