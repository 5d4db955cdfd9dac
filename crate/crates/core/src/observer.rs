//! Predictor-observer for delayed partial measurements.
//!
//! Each measurement channel `j` delivers `C_j x(t − τ_j)`. Folding the known
//! input and disturbance histories back into the measurement yields the
//! undelayed output `Y(t) = C̄ x(t)` with `C̄ = Σ_j C_j e^{−Aτ_j}`, on which a
//! standard Luenberger observer runs.

use crate::error::{Error, Result};
use crate::history::{grid_steps, DelayedSignal};
use crate::model::SystemMatrices;
use crate::numkernel::{expm, solve_lyapunov, solve_riccati_dual, sym_eigen, DenseMatrix, DenseVector};
use crate::predictor::held_input_cells;

fn check_delays(m: &SystemMatrices, tau_ys: &[f64]) -> Result<()> {
    if tau_ys.len() != m.channels.len() {
        return Err(Error::InvalidInput(format!(
            "{} sensor delays given for {} observation channels",
            tau_ys.len(),
            m.channels.len()
        )));
    }
    Ok(())
}

/// `C̄ = Σ_j C_j e^{−Aτ_j}`.
pub fn build_cbar(m: &SystemMatrices, tau_ys: &[f64]) -> Result<DenseMatrix> {
    check_delays(m, tau_ys)?;
    let mut cbar = DenseMatrix::zeros(m.output_dim(), m.n);
    for (c, &tau) in m.channels.iter().zip(tau_ys) {
        cbar += c * expm(&m.a, -tau)?;
    }
    Ok(cbar)
}

#[derive(Debug, Clone)]
struct Channel {
    /// `C_j e^{−Aτ_j}`.
    advanced: DenseMatrix,
    steps: usize,
    tau: f64,
}

/// Maps raw delayed measurements `y(t)` to `Y(t) = C̄ x(t)`.
#[derive(Debug, Clone)]
pub struct OutputTransform {
    channels: Vec<Channel>,
    cells: Vec<DenseVector>,
    actuator_steps: usize,
    d: DenseVector,
}

impl OutputTransform {
    pub fn new(m: &SystemMatrices, tau_u: f64, tau_ys: &[f64], dt: f64) -> Result<Self> {
        check_delays(m, tau_ys)?;
        let actuator_steps = grid_steps(tau_u, dt)?;
        let mut channels = Vec::with_capacity(tau_ys.len());
        for (c, &tau) in m.channels.iter().zip(tau_ys) {
            channels.push(Channel { advanced: c * expm(&m.a, -tau)?, steps: grid_steps(tau, dt)?, tau });
        }
        let longest = channels.iter().map(|c| c.steps).max().unwrap_or(0);
        Ok(Self { channels, cells: held_input_cells(&m.a, &m.b, dt, longest)?, actuator_steps, d: m.d.clone() })
    }

    /// Command history length needed by [`compose`](Self::compose).
    pub fn required_input_span_steps(&self) -> usize {
        self.actuator_steps + self.cells.len()
    }

    /// `Y = y + Σ_j C_j e^{−Aτ_j} [∫ e^{−A(θ+τ_u)} B u(t+θ) dθ + ∫ e^{−Aθ} D r(t+θ) dθ]`.
    ///
    /// `u_hist` has the last issued command as its newest sample (the command
    /// being computed now is excluded); `r_hist` has `r(t)` as its newest
    /// sample.
    pub fn compose(&self, y: &DenseVector, u_hist: &DelayedSignal, r_hist: &DelayedSignal) -> Result<DenseVector> {
        if u_hist.len() < self.required_input_span_steps() {
            return Err(Error::History(format!(
                "command history holds {} samples, output transform needs {}",
                u_hist.len(),
                self.required_input_span_steps()
            )));
        }
        let mut big_y = y.clone();
        for ch in &self.channels {
            if ch.steps == 0 {
                continue;
            }
            // commands applied over [t − τ_j, t) were issued τ_u earlier
            let mut folded = u_hist
                .held_integral(&self.cells[..ch.steps], self.actuator_steps)?
                .expect("channel delay spans at least one cell");
            // e^{−Aθ}D = D because A D = 0
            let r_integral = r_hist.weighted_integral(-ch.tau, 0.0, |_| DenseVector::from_element(1, 1.0))?[0];
            folded += &self.d * r_integral;
            big_y += &ch.advanced * folded;
        }
        Ok(big_y)
    }
}

/// Certified decay constants of `ε̇ = (A − L C̄) ε`:
/// `‖ε(t)‖ ≤ Υ ‖ε(0)‖ e^{−λt}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayCertificate {
    pub upsilon: f64,
    pub lambda: f64,
}

/// Solves `FᵀP + PF = −I` for `F = A − L C̄` and reads off
/// `λ = 1/(2 λ_max(P))`, `Υ = √(λ_max(P)/λ_min(P))`.
pub fn certify_decay(a: &DenseMatrix, gain: &DenseMatrix, cbar: &DenseMatrix) -> Result<DecayCertificate> {
    let closed = a - gain * cbar;
    let n = closed.nrows();
    let p = solve_lyapunov(&closed, &DenseMatrix::identity(n, n))?;
    let eig = sym_eigen(&p)?;
    Ok(DecayCertificate { upsilon: (eig.max() / eig.min()).sqrt(), lambda: 1.0 / (2.0 * eig.max()) })
}

/// Observer gain together with its certificate.
#[derive(Debug, Clone)]
pub struct ObserverDesign {
    pub gain: DenseMatrix,
    pub cbar: DenseMatrix,
    pub certificate: DecayCertificate,
    pub riccati_iterations: usize,
    pub riccati_residual: f64,
}

/// Riccati-based gain `L` for the pair `(A, C̄)` with state weight `q` and
/// output weight `r`.
pub fn synthesize(m: &SystemMatrices, tau_ys: &[f64], q: &DenseMatrix, r: &DenseMatrix) -> Result<ObserverDesign> {
    let cbar = build_cbar(m, tau_ys)?;
    let sol = solve_riccati_dual(&m.a, &cbar, q, r)?;
    let certificate = certify_decay(&m.a, &sol.gain, &cbar)?;
    Ok(ObserverDesign {
        gain: sol.gain,
        cbar,
        certificate,
        riccati_iterations: sol.iterations,
        riccati_residual: sol.residual,
    })
}

/// Running estimate `x̂` together with the constants of its design.
#[derive(Debug, Clone)]
pub struct ObserverState {
    pub x_hat: DenseVector,
    pub design: ObserverDesign,
    /// Upper bound on the initial estimation error `‖ε(0)‖`.
    pub eps_bar: f64,
}

impl ObserverState {
    pub fn new(x_hat: DenseVector, design: ObserverDesign, eps_bar: f64) -> Result<Self> {
        if !(eps_bar >= 0.0) {
            return Err(Error::InvalidInput(format!("eps_bar must be non-negative, got {eps_bar}")));
        }
        if x_hat.len() != design.cbar.ncols() {
            return Err(Error::InvalidInput("initial estimate has the wrong dimension".into()));
        }
        Ok(Self { x_hat, design, eps_bar })
    }

    /// `Y − C̄ x̂`.
    pub fn innovation(&self, big_y: &DenseVector) -> DenseVector {
        big_y - &self.design.cbar * &self.x_hat
    }

    /// One explicit Euler step of
    /// `x̂̇ = A x̂ + B u(t − τ_u) + D r + L (Y − C̄ x̂)`.
    pub fn step(&mut self, m: &SystemMatrices, u_applied: f64, r: f64, big_y: &DenseVector, dt: f64) {
        let innovation = self.innovation(big_y);
        let rate = &m.a * &self.x_hat + &m.b * u_applied + &m.d * r + &self.design.gain * innovation;
        self.x_hat += rate * dt;
    }
}
