//! Barrier functions for the platoon and their conversion into linear
//! constraints on the CAV command `u`.
//!
//! Safety of vehicle `i` means the constant-time-headway condition
//! `h_i = s_i − ψ_i v_i ≥ 0`, evaluated on absolute gaps and speeds. The CAV
//! constraint uses `h_0` directly; for followers, whose `h_i` has high
//! relative degree in `u`, the reduced function `h_i^r = h_i − η_i h_0` is
//! used instead (`h_i^r ≥ 0` and `h_0 ≥ 0` imply `h_i ≥ 0`).
//!
//! Every constraint is written `coeff_u · u + σ ≥ rhs`, with `σ` a slack that
//! only follower rows own.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gap_index, speed_index, AbsoluteState, Platoon, SystemMatrices};
use crate::numkernel::{DenseMatrix, DenseVector};
use crate::predictor::DisturbanceBounds;

/// Extended class-K∞ function used in a barrier condition `ḣ ≥ −α(h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassK {
    /// `α(h) = γ h`.
    Linear { gamma: f64 },
    /// `α(h) = γ h + c h³`.
    Cubic { gamma: f64, cubic: f64 },
}

impl ClassK {
    pub fn eval(&self, h: f64) -> f64 {
        match *self {
            ClassK::Linear { gamma } => gamma * h,
            ClassK::Cubic { gamma, cubic } => gamma * h + cubic * h * h * h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ClassK::Linear { gamma } => gamma > 0.0 && gamma.is_finite(),
            ClassK::Cubic { gamma, cubic } => gamma > 0.0 && cubic >= 0.0 && gamma.is_finite() && cubic.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("{self:?} is not a class-K function")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyParams {
    /// Time headways `ψ_0..=ψ_N` (s).
    pub psi: Vec<f64>,
    /// Reduction coefficients `η_1..=η_N`, stored at index `i − 1`.
    pub eta: Vec<f64>,
    /// Class-K functions `α_0..=α_N`.
    pub alpha: Vec<ClassK>,
    /// Slack penalties `p_1..=p_N`, stored at index `i − 1`.
    pub penalties: Vec<f64>,
}

impl SafetyParams {
    pub fn uniform(followers: usize, psi0: f64, psi: f64, eta: f64, gamma: f64, penalty: f64) -> Self {
        let mut headways = vec![psi0];
        headways.extend(std::iter::repeat_n(psi, followers));
        Self {
            psi: headways,
            eta: vec![eta; followers],
            alpha: vec![ClassK::Linear { gamma }; followers + 1],
            penalties: vec![penalty; followers],
        }
    }

    pub fn followers(&self) -> usize {
        self.eta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.followers();
        if self.psi.len() != n + 1 || self.alpha.len() != n + 1 || self.penalties.len() != n {
            return Err(Error::InvalidInput(format!(
                "safety parameters inconsistent: {} headways, {} reduction coefficients, {} class-K functions, {} penalties",
                self.psi.len(),
                n,
                self.alpha.len(),
                self.penalties.len()
            )));
        }
        let positive = |name: &str, values: &[f64]| -> Result<()> {
            match values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
                Some(k) => Err(Error::InvalidInput(format!("{name}[{k}] must be positive, got {}", values[k]))),
                None => Ok(()),
            }
        };
        positive("psi", &self.psi)?;
        positive("eta", &self.eta)?;
        positive("penalty", &self.penalties)?;
        self.alpha.iter().try_for_each(ClassK::validate)
    }

    /// `ν_i = 1 − η_i + ψ_i − η_i ψ_0`, the weight of follower `i` in the
    /// observer-error margin.
    pub fn nu(&self, i: usize) -> f64 {
        let eta = self.eta[i - 1];
        1.0 - eta + self.psi[i] - eta * self.psi[0]
    }
}

/// `h_i = s_i − ψ_i v_i` on absolute quantities, `i = 0..=N`.
pub fn h_vehicle(i: usize, abs: &AbsoluteState, psi_i: f64) -> f64 {
    abs.gaps[i] - psi_i * abs.speeds[i]
}

pub fn h0(abs: &AbsoluteState, psi0: f64) -> f64 {
    h_vehicle(0, abs, psi0)
}

/// `h_i^r = h_i − η_i h_0` for follower `i ≥ 1`.
pub fn h_reduced(i: usize, abs: &AbsoluteState, params: &SafetyParams) -> f64 {
    h_vehicle(i, abs, params.psi[i]) - params.eta[i - 1] * h0(abs, params.psi[0])
}

/// Gradient of `h_0` with respect to the perturbation state.
pub fn grad_h0(n: usize, psi0: f64) -> DenseVector {
    let mut g = DenseVector::zeros(n);
    g[gap_index(0)] = 1.0;
    g[speed_index(0)] = -psi0;
    g
}

/// Gradient of `h_i^r` with respect to the perturbation state.
pub fn grad_h_reduced(i: usize, n: usize, params: &SafetyParams) -> DenseVector {
    let mut g = grad_h0(n, params.psi[0]) * -params.eta[i - 1];
    g[gap_index(i)] += 1.0;
    g[speed_index(i)] -= params.psi[i];
    g
}

/// Actuator-delay margin for the CAV row:
/// `α(h) − α(h + ½a̲τ²) − (∇h·D)(r + a̲τ)`.
pub fn m_term_cav(h: f64, grad_d: f64, r: f64, bounds: &DisturbanceBounds, tau_u: f64, alpha: &ClassK) -> f64 {
    let a_low = bounds.a_low;
    alpha.eval(h) - alpha.eval(h + 0.5 * a_low * tau_u * tau_u) - grad_d * (r + a_low * tau_u)
}

/// Actuator-delay margin for follower `i`:
/// `α(h^r) − α(h^r − ½a̲η_iτ²) − (∇h^r·D)(r + āτ)`.
pub fn m_term_hv(
    h_r: f64,
    grad_d: f64,
    eta: f64,
    r: f64,
    bounds: &DisturbanceBounds,
    tau_u: f64,
    alpha: &ClassK,
) -> f64 {
    alpha.eval(h_r) - alpha.eval(h_r - 0.5 * bounds.a_low * eta * tau_u * tau_u) - grad_d * (r + bounds.a_up * tau_u)
}

/// Observer-error margin
/// `α(h_R) − α(h_R − wΞ) − ∇h·e^{Aτ_u}L(Y − C̄x̂) − λwΞ`, `Ξ = ‖e^{Aτ_u}‖Υε̄e^{−λt}`.
///
/// `h_shifted` is the delay-tightened value (`h_0 + ½a̲τ²` for the CAV,
/// `h_i^r − ½a̲η_iτ²` for followers) and `weight` is `1 + ψ_0` or `ν_i`.
pub fn z_term(h_shifted: f64, weight: f64, correction: f64, decay: &ErrorDecay, alpha: &ClassK) -> f64 {
    let margin = weight * decay.envelope();
    alpha.eval(h_shifted) - alpha.eval(h_shifted - margin) - correction - decay.lambda * margin
}

/// Decaying bound on the propagated estimation error at the current time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorDecay {
    /// `‖e^{Aτ_u}‖₂`.
    pub transition_norm: f64,
    pub upsilon: f64,
    pub lambda: f64,
    pub eps_bar: f64,
    /// Time since the observer started (s).
    pub t: f64,
}

impl ErrorDecay {
    /// `‖e^{Aτ_u}‖ Υ ε̄ e^{−λt}`.
    pub fn envelope(&self) -> f64 {
        self.transition_norm * self.upsilon * self.eps_bar * (-self.lambda * self.t).exp()
    }
}

/// Observer quantities entering the sensor-delay-robust constraints.
#[derive(Debug, Clone, Copy)]
pub struct ObserverTerms<'a> {
    /// `e^{Aτ_u} L (Y − C̄x̂)`.
    pub propagated_innovation: &'a DenseVector,
    pub decay: ErrorDecay,
}

/// Which barrier condition the constraints encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    /// Undelayed conditions on the current state, drift `A x + D r`.
    DelayFree,
    /// Predicted state with actuator-delay margins.
    ActuatorRobust,
    /// Estimated prediction with actuator-delay and observer-error margins.
    ObserverRobust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintLabel {
    Cav,
    Hv(usize),
}

impl fmt::Display for ConstraintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintLabel::Cav => write!(f, "cav"),
            ConstraintLabel::Hv(i) => write!(f, "hv{i}"),
        }
    }
}

/// `coeff_u · u + σ ≥ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyConstraint {
    pub label: ConstraintLabel,
    pub coeff_u: f64,
    pub rhs: f64,
    /// Penalty of the owned slack; `None` marks a hard row.
    pub slack_penalty: Option<f64>,
    /// Barrier value (`h_0` or `h_i^r`) at the evaluation state.
    pub h_value: f64,
    pub m: f64,
    pub z: f64,
}

impl SafetyConstraint {
    pub fn is_hard(&self) -> bool {
        self.slack_penalty.is_none()
    }

    /// Constraint violation of `u` before slack.
    pub fn deficit(&self, u: f64) -> f64 {
        self.rhs - self.coeff_u * u
    }
}

/// Static data shared by every constraint assembly of one run.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintContext<'a> {
    pub platoon: &'a Platoon,
    pub matrices: &'a SystemMatrices,
    pub params: &'a SafetyParams,
    pub bounds: DisturbanceBounds,
    pub tau_u: f64,
}

/// Builds the `N + 1` constraint rows.
///
/// `state` is the current perturbation state for [`ConstraintMode::DelayFree`],
/// the prediction `x_p` for [`ConstraintMode::ActuatorRobust`] and the estimated
/// prediction `x̂_p` for [`ConstraintMode::ObserverRobust`], which additionally
/// requires `observer`.
pub fn assemble_constraints(
    ctx: &ConstraintContext<'_>,
    mode: ConstraintMode,
    state: &DenseVector,
    r: f64,
    observer: Option<&ObserverTerms<'_>>,
) -> Result<Vec<SafetyConstraint>> {
    let m = ctx.matrices;
    let params = ctx.params;
    let followers = params.followers();
    if followers != m.followers() || state.len() != m.n {
        return Err(Error::InvalidInput(format!(
            "constraint assembly: {} followers in safety parameters, {} in the model, state of length {}",
            followers,
            m.followers(),
            state.len()
        )));
    }
    if mode == ConstraintMode::ObserverRobust && observer.is_none() {
        return Err(Error::InvalidInput("observer-robust constraints need observer terms".into()));
    }

    let abs = ctx.platoon.to_absolute(state);
    let drift: DenseVector = match mode {
        ConstraintMode::DelayFree => &m.a * state + &m.d * r,
        ConstraintMode::ActuatorRobust | ConstraintMode::ObserverRobust => &m.a * state,
    };
    let delay_robust = mode != ConstraintMode::DelayFree;
    let tau = ctx.tau_u;
    let half_sq = 0.5 * ctx.bounds.a_low * tau * tau;

    let mut rows = Vec::with_capacity(followers + 1);

    let grad = grad_h0(m.n, params.psi[0]);
    let h = h0(&abs, params.psi[0]);
    let alpha = &params.alpha[0];
    let m_term = if delay_robust { m_term_cav(h, grad.dot(&m.d), r, &ctx.bounds, tau, alpha) } else { 0.0 };
    let z = match (mode, observer) {
        (ConstraintMode::ObserverRobust, Some(obs)) => {
            z_term(h + half_sq, 1.0 + params.psi[0], grad.dot(obs.propagated_innovation), &obs.decay, alpha)
        }
        _ => 0.0,
    };
    rows.push(SafetyConstraint {
        label: ConstraintLabel::Cav,
        coeff_u: grad.dot(&m.b),
        rhs: -grad.dot(&drift) - alpha.eval(h) + m_term + z,
        slack_penalty: None,
        h_value: h,
        m: m_term,
        z,
    });

    for i in 1..=followers {
        let grad = grad_h_reduced(i, m.n, params);
        let h_r = h_reduced(i, &abs, params);
        let eta = params.eta[i - 1];
        let alpha = &params.alpha[i];
        let m_term = if delay_robust { m_term_hv(h_r, grad.dot(&m.d), eta, r, &ctx.bounds, tau, alpha) } else { 0.0 };
        let z = match (mode, observer) {
            (ConstraintMode::ObserverRobust, Some(obs)) => {
                z_term(h_r - half_sq * eta, params.nu(i), grad.dot(obs.propagated_innovation), &obs.decay, alpha)
            }
            _ => 0.0,
        };
        rows.push(SafetyConstraint {
            label: ConstraintLabel::Hv(i),
            coeff_u: grad.dot(&m.b),
            rhs: -grad.dot(&drift) - alpha.eval(h_r) + m_term + z,
            slack_penalty: Some(params.penalties[i - 1]),
            h_value: h_r,
            m: m_term,
            z,
        });
    }

    debug_assert!(rows[0].coeff_u < 0.0 && rows[1..].iter().all(|c| c.coeff_u > 0.0));
    Ok(rows)
}

/// `e^{Aτ_u} L (Y − C̄x̂)`.
pub fn propagate_innovation(transition: &DenseMatrix, gain: &DenseMatrix, innovation: &DenseVector) -> DenseVector {
    transition * (gain * innovation)
}

/// Header of the per-step constraint dump.
pub const DUMP_HEADER: &str = "t,label,coeff_u,rhs,h_value,M,Z,active";

/// One dump line, `t,label,coeff_u,rhs,h_value,M,Z,active`.
pub fn dump_line(t: f64, c: &SafetyConstraint, active: bool) -> String {
    format!(
        "{t:.4},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
        c.label,
        c.coeff_u,
        c.rhs,
        c.h_value,
        c.m,
        c.z,
        u8::from(active)
    )
}
