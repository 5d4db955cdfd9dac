//! Car-following model and linearised platoon dynamics.
//!
//! Vehicle indices: `-1` is the head human-driven vehicle, `0` the CAV and
//! `1..=N` the human-driven followers behind it. The perturbation state is
//! ordered
//!
//! ```text
//! x = [s̃_0, ṽ_0, s̃_1, ṽ_1, …, s̃_N, ṽ_N]ᵀ,   n = 2N + 2
//! ```
//!
//! where `s̃_i = s_i − s_i*` is the gap deviation of vehicle `i` to its leader
//! and `ṽ_i = v_i − v*` its speed deviation. Every other module relies on this
//! ordering; [`gap_index`] and [`speed_index`] are the only place it is
//! spelled out.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{DenseMatrix, DenseVector};

/// Bisection stops once the speed residual drops below this value.
const EQUILIBRIUM_TOL: f64 = 1e-10;

/// Position of `s̃_i` in the perturbation state.
pub const fn gap_index(i: usize) -> usize {
    2 * i
}

/// Position of `ṽ_i` in the perturbation state.
pub const fn speed_index(i: usize) -> usize {
    2 * i + 1
}

/// Optimal-velocity-model constants for one human driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OvmParams {
    /// Sensitivity to the desired-speed mismatch (1/s).
    pub alpha: f64,
    /// Sensitivity to the relative speed (1/s).
    pub beta: f64,
    /// Standstill spacing (m).
    pub s_st: f64,
    /// Free-flow spacing (m).
    pub s_go: f64,
    /// Speed limit (m/s).
    pub v_max: f64,
}

impl Default for OvmParams {
    fn default() -> Self {
        Self { alpha: 0.6, beta: 0.9, s_st: 5.0, s_go: 40.0, v_max: 35.0 }
    }
}

impl OvmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.beta > 0.0
            && self.s_st > 0.0
            && self.s_go > self.s_st
            && self.v_max > 0.0
            && [self.alpha, self.beta, self.s_st, self.s_go, self.v_max].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "OVM parameters require alpha > 0, beta > 0, 0 < s_st < s_go, v_max > 0; got {self:?}"
            )))
        }
    }

    /// Range policy `V(s)`: zero below standstill spacing, `v_max` beyond
    /// free-flow spacing, cosine blend in between.
    pub fn desired_speed(&self, s: f64) -> f64 {
        if s <= self.s_st {
            0.0
        } else if s >= self.s_go {
            self.v_max
        } else {
            0.5 * self.v_max * (1.0 - (PI * (s - self.s_st) / (self.s_go - self.s_st)).cos())
        }
    }

    /// Analytic derivative `V'(s)`.
    pub fn desired_speed_slope(&self, s: f64) -> f64 {
        if s <= self.s_st || s >= self.s_go {
            0.0
        } else {
            let width = self.s_go - self.s_st;
            0.5 * self.v_max * PI / width * (PI * (s - self.s_st) / width).sin()
        }
    }

    /// Human-driver acceleration `α(V(s) − v) + β ṡ`.
    pub fn accel(&self, s: f64, s_dot: f64, v: f64) -> f64 {
        self.alpha * (self.desired_speed(s) - v) + self.beta * s_dot
    }
}

/// Uniform-flow operating point of one driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibrium {
    pub v_star: f64,
    pub s_star: f64,
}

/// Finds the gap `s*` with `V(s*) = v*` by bisection on `[s_st, s_go]`.
pub fn solve_equilibrium_gap(v_star: f64, p: &OvmParams) -> Result<Equilibrium> {
    p.validate()?;
    if !(v_star > 0.0 && v_star < p.v_max) {
        return Err(Error::NoEquilibrium { v_star, v_max: p.v_max });
    }
    let (mut lo, mut hi) = (p.s_st, p.s_go);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let residual = p.desired_speed(mid) - v_star;
        if residual.abs() <= EQUILIBRIUM_TOL || hi - lo <= f64::EPSILON * hi {
            break;
        }
        if residual < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Equilibrium { v_star, s_star: mid })
}

/// Coefficients of the linearised driver `ṽ̇_i = a1 s̃_i − a2 ṽ_i + a3 ṽ_{i−1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearHvCoeffs {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

pub fn linearize_hv(eq: &Equilibrium, p: &OvmParams) -> LinearHvCoeffs {
    LinearHvCoeffs { a1: p.alpha * p.desired_speed_slope(eq.s_star), a2: p.alpha + p.beta, a3: p.beta }
}

/// Linearised platoon `ẋ = A x + B u(t − τ_u) + D r`, observed through
/// channels `y = Σ_j C_j x(t − τ_j)`.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub a: DenseMatrix,
    pub b: DenseVector,
    pub d: DenseVector,
    /// One observation matrix per measurement delay channel; all share the
    /// same row count.
    pub channels: Vec<DenseMatrix>,
    pub n: usize,
}

impl SystemMatrices {
    pub fn followers(&self) -> usize {
        self.n / 2 - 1
    }

    pub fn output_dim(&self) -> usize {
        self.channels.first().map_or(0, |c| c.nrows())
    }

    /// Replaces the observation channels; every matrix must be `n_y × n`.
    pub fn with_channels(mut self, channels: Vec<DenseMatrix>) -> Result<Self> {
        let ny = channels.first().map_or(0, |c| c.nrows());
        if channels.is_empty() || channels.iter().any(|c| c.shape() != (ny, self.n)) {
            return Err(Error::InvalidInput(format!("observation channels must be non-empty and all {ny}x{}", self.n)));
        }
        self.channels = channels;
        Ok(self)
    }
}

/// Default observation layout: the CAV's own gap and speed without delay,
/// and the last follower's speed through a delayed channel.
pub fn default_channels(n: usize) -> (DenseMatrix, DenseMatrix) {
    let mut c1 = DenseMatrix::zeros(3, n);
    c1[(0, 0)] = 1.0;
    c1[(1, 1)] = 1.0;
    let mut c2 = DenseMatrix::zeros(3, n);
    c2[(2, n - 1)] = 1.0;
    (c1, c2)
}

pub fn build_matrices(coeffs: &[LinearHvCoeffs]) -> SystemMatrices {
    let followers = coeffs.len();
    let n = 2 * followers + 2;
    let mut a = DenseMatrix::zeros(n, n);
    a[(gap_index(0), speed_index(0))] = -1.0;
    for (k, c) in coeffs.iter().enumerate() {
        let i = k + 1;
        let (gap, speed, lead_speed) = (gap_index(i), speed_index(i), speed_index(i - 1));
        a[(gap, lead_speed)] = 1.0;
        a[(gap, speed)] = -1.0;
        a[(speed, lead_speed)] = c.a3;
        a[(speed, gap)] = c.a1;
        a[(speed, speed)] = -c.a2;
    }
    let mut b = DenseVector::zeros(n);
    b[speed_index(0)] = 1.0;
    let mut d = DenseVector::zeros(n);
    d[gap_index(0)] = 1.0;
    let (c1, c2) = default_channels(n);
    SystemMatrices { a, b, d, channels: vec![c1, c2], n }
}

/// Absolute gaps and speeds of vehicles `0..=N` (head vehicle excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct AbsoluteState {
    pub gaps: Vec<f64>,
    pub speeds: Vec<f64>,
}

/// Operating point and linearisation of the whole platoon.
#[derive(Debug, Clone)]
pub struct Platoon {
    pub v_star: f64,
    /// Equilibrium gaps `s_i*` for `i = 0..=N`.
    pub gaps: Vec<f64>,
    /// Driver models for followers `1..=N`.
    pub drivers: Vec<OvmParams>,
    pub coeffs: Vec<LinearHvCoeffs>,
}

impl Platoon {
    /// `followers` identical drivers; the CAV keeps the same equilibrium gap.
    pub fn homogeneous(followers: usize, params: OvmParams, v_star: f64) -> Result<Self> {
        Self::heterogeneous(params, vec![params; followers], v_star)
    }

    /// Per-follower drivers. The CAV's equilibrium gap is taken from
    /// `cav_reference`, since the CAV itself has no range policy.
    pub fn heterogeneous(cav_reference: OvmParams, drivers: Vec<OvmParams>, v_star: f64) -> Result<Self> {
        let mut gaps = vec![solve_equilibrium_gap(v_star, &cav_reference)?.s_star];
        let mut coeffs = Vec::with_capacity(drivers.len());
        for p in &drivers {
            let eq = solve_equilibrium_gap(v_star, p)?;
            gaps.push(eq.s_star);
            coeffs.push(linearize_hv(&eq, p));
        }
        Ok(Self { v_star, gaps, drivers, coeffs })
    }

    pub fn followers(&self) -> usize {
        self.drivers.len()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.followers() + 2
    }

    pub fn matrices(&self) -> SystemMatrices {
        build_matrices(&self.coeffs)
    }

    pub fn equilibrium_state(&self) -> AbsoluteState {
        AbsoluteState { gaps: self.gaps.clone(), speeds: vec![self.v_star; self.gaps.len()] }
    }

    pub fn to_perturbation(&self, abs: &AbsoluteState) -> DenseVector {
        let mut x = DenseVector::zeros(self.state_dim());
        for i in 0..self.gaps.len() {
            x[gap_index(i)] = abs.gaps[i] - self.gaps[i];
            x[speed_index(i)] = abs.speeds[i] - self.v_star;
        }
        x
    }

    pub fn to_absolute(&self, x: &DenseVector) -> AbsoluteState {
        let count = self.gaps.len();
        AbsoluteState {
            gaps: (0..count).map(|i| x[gap_index(i)] + self.gaps[i]).collect(),
            speeds: (0..count).map(|i| x[speed_index(i)] + self.v_star).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn paper() -> OvmParams {
        OvmParams::default()
    }

    #[test]
    fn desired_speed_branches() {
        let p = paper();
        assert_eq!(p.desired_speed(5.0), 0.0);
        assert_eq!(p.desired_speed(-3.0), 0.0);
        assert_eq!(p.desired_speed(40.0), 35.0);
        assert_eq!(p.desired_speed(100.0), 35.0);
        // 17.5 (1 − cos(19π/35))
        let expected = 17.5 * (1.0 - (19.0 * PI / 35.0).cos());
        assert_relative_eq!(p.desired_speed(24.0), expected, epsilon = 1e-12);
        assert_relative_eq!(p.desired_speed(24.0), 19.849, epsilon = 1e-3);
    }

    #[test]
    fn accel_examples() {
        let p = paper();
        let base = p.accel(24.0, 0.0, 20.0);
        assert_relative_eq!(base, 0.6 * (p.desired_speed(24.0) - 20.0), epsilon = 1e-14);
        assert_relative_eq!(base, -0.0906, epsilon = 1e-3);
        assert_relative_eq!(p.accel(24.0, 1.0, 20.0) - base, 0.9, epsilon = 1e-14);
    }

    #[test]
    fn equilibrium_examples() {
        let p = paper();
        let eq = solve_equilibrium_gap(20.0, &p).unwrap();
        assert!((p.desired_speed(eq.s_star) - 20.0).abs() <= 1e-10);
        assert_relative_eq!(eq.s_star, 24.098, epsilon = 1e-3);
        assert!(p.accel(eq.s_star, 0.0, 20.0).abs() <= 1e-9);

        let mid = solve_equilibrium_gap(17.5, &p).unwrap();
        assert_relative_eq!(mid.s_star, 22.5, epsilon = 1e-9);

        for bad in [35.0, 0.0, -1.0, 50.0, f64::NAN] {
            assert!(matches!(solve_equilibrium_gap(bad, &p), Err(Error::NoEquilibrium { .. })));
        }
    }

    #[test]
    fn rejects_bad_params() {
        let p = OvmParams { s_go: 4.0, ..paper() };
        assert!(solve_equilibrium_gap(10.0, &p).is_err());
    }

    fn finite_difference_coeffs(eq: &Equilibrium, p: &OvmParams) -> LinearHvCoeffs {
        // F(s, ṡ, v) with ṡ = v_lead − v; differentiate w.r.t. s, v and v_lead.
        let h = 1e-5;
        let f = |s: f64, v_lead: f64, v: f64| p.accel(s, v_lead - v, v);
        let (s, v) = (eq.s_star, eq.v_star);
        LinearHvCoeffs {
            a1: (f(s + h, v, v) - f(s - h, v, v)) / (2.0 * h),
            a2: -(f(s, v, v + h) - f(s, v, v - h)) / (2.0 * h),
            a3: (f(s, v + h, v) - f(s, v - h, v)) / (2.0 * h),
        }
    }

    #[test]
    fn linearisation_matches_finite_differences() {
        let p = paper();
        let eq = solve_equilibrium_gap(20.0, &p).unwrap();
        let c = linearize_hv(&eq, &p);
        assert_eq!(c.a2, 1.5);
        assert_eq!(c.a3, 0.9);
        assert_relative_eq!(c.a1, 0.9328, epsilon = 1e-4);
        let fd = finite_difference_coeffs(&eq, &p);
        assert!((c.a1 - fd.a1).abs() <= 1e-6);
        assert!((c.a2 - fd.a2).abs() <= 1e-6);
        assert!((c.a3 - fd.a3).abs() <= 1e-6);
    }

    #[test]
    fn matrices_without_followers() {
        let m = build_matrices(&[]);
        assert_eq!(m.a, DenseMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]));
        assert_eq!(m.b.as_slice(), &[0.0, 1.0]);
        assert_eq!(m.d.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn matrices_block_pattern() {
        let p = paper();
        let eq = solve_equilibrium_gap(20.0, &p).unwrap();
        let c = linearize_hv(&eq, &p);
        let m = build_matrices(&[c]);
        let row: Vec<f64> = m.a.row(3).iter().copied().collect();
        assert_eq!(row, vec![0.0, 0.9, c.a1, -1.5]);
        assert_eq!(m.a.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, -1.0]);
        assert_eq!(m.followers(), 1);
    }

    #[test]
    fn default_channels_select_expected_states() {
        let m = build_matrices(&[linearize_hv(&solve_equilibrium_gap(20.0, &paper()).unwrap(), &paper()); 4]);
        let (c1, c2) = (&m.channels[0], &m.channels[1]);
        assert_eq!(m.output_dim(), 3);
        assert_eq!(c1[(0, 0)], 1.0);
        assert_eq!(c1[(1, 1)], 1.0);
        assert_eq!(c1.iter().filter(|v| **v != 0.0).count(), 2);
        assert_eq!(c2[(2, 9)], 1.0);
        assert_eq!(c2.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn with_channels_checks_shapes() {
        let m = build_matrices(&[]);
        assert!(m.clone().with_channels(vec![DenseMatrix::identity(2, 3)]).is_err());
        assert!(m.clone().with_channels(vec![]).is_err());
        let generic = vec![DenseMatrix::identity(2, 2); 3];
        assert_eq!(m.with_channels(generic).unwrap().channels.len(), 3);
    }

    #[test]
    fn heterogeneous_platoon_uses_per_driver_gaps() {
        let slow = OvmParams { s_go: 50.0, ..paper() };
        let platoon = Platoon::heterogeneous(paper(), vec![paper(), slow], 20.0).unwrap();
        assert!(platoon.gaps[2] > platoon.gaps[1]);
        assert_eq!(platoon.gaps[0], platoon.gaps[1]);
        assert_ne!(platoon.coeffs[0].a1, platoon.coeffs[1].a1);
    }

    proptest! {
        #[test]
        fn desired_speed_monotone_with_matching_slope(s in 5.01f64..39.99, ds in 0.0f64..5.0) {
            let p = paper();
            prop_assert!(p.desired_speed(s + ds) >= p.desired_speed(s));
            let h = 1e-5;
            let fd = (p.desired_speed(s + h) - p.desired_speed(s - h)) / (2.0 * h);
            prop_assert!((fd - p.desired_speed_slope(s)).abs() <= 1e-6);
        }

        #[test]
        fn random_equilibria_linearise_consistently(v_star in 0.5f64..34.5) {
            let p = paper();
            let eq = solve_equilibrium_gap(v_star, &p).unwrap();
            prop_assert!(eq.s_star > p.s_st && eq.s_star < p.s_go);
            let c = linearize_hv(&eq, &p);
            let fd = finite_difference_coeffs(&eq, &p);
            prop_assert!(c.a1 > 0.0 && c.a2 > c.a3 && c.a3 > 0.0);
            prop_assert!((c.a1 - fd.a1).abs() <= 1e-6);
        }

        #[test]
        fn structural_zero_first_column(followers in 0usize..8) {
            let platoon = Platoon::homogeneous(followers, paper(), 20.0).unwrap();
            let m = platoon.matrices();
            prop_assert!(m.a.column(0).iter().all(|v| *v == 0.0));
            prop_assert!((&m.a * &m.d).iter().all(|v| *v == 0.0));
            prop_assert_eq!(m.b.iter().filter(|v| **v != 0.0).count(), 1);
            prop_assert_eq!(m.b[1], 1.0);
            prop_assert_eq!(m.d[0], 1.0);
        }

        #[test]
        fn perturbation_round_trip(raw in proptest::collection::vec(-30.0f64..60.0, 10)) {
            let platoon = Platoon::homogeneous(4, paper(), 20.0).unwrap();
            let abs = AbsoluteState {
                gaps: raw.iter().step_by(2).copied().collect(),
                speeds: raw.iter().skip(1).step_by(2).copied().collect(),
            };
            let back = platoon.to_absolute(&platoon.to_perturbation(&abs));
            for (a, b) in back.gaps.iter().chain(&back.speeds).zip(abs.gaps.iter().chain(&abs.speeds)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
