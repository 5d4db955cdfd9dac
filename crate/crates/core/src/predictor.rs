//! Actuator-delay compensation: predicts the platoon state one actuator
//! delay ahead from the current (or estimated) state, the commands still in
//! flight and the current head-vehicle speed deviation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{grid_steps, DelayedSignal};
use crate::model::SystemMatrices;
use crate::numkernel::{expm, DenseMatrix, DenseVector};

/// Known bounds on the head-vehicle acceleration `ṙ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceBounds {
    pub a_low: f64,
    pub a_up: f64,
}

impl Default for DisturbanceBounds {
    fn default() -> Self {
        Self { a_low: -5.0, a_up: 5.0 }
    }
}

impl DisturbanceBounds {
    pub fn new(a_low: f64, a_up: f64) -> Result<Self> {
        let b = Self { a_low, a_up };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_low < 0.0 && self.a_up > 0.0 && self.a_low.is_finite() && self.a_up.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "disturbance bounds need a_low < 0 < a_up, got [{}, {}]",
                self.a_low, self.a_up
            )))
        }
    }
}

/// Interval containing the CAV-gap prediction error `s̃_0,p − s̃_0(t+τ_u)`
/// whenever the head acceleration respects `bounds`.
pub fn prediction_error_bounds(bounds: &DisturbanceBounds, tau_u: f64) -> (f64, f64) {
    let half_sq = 0.5 * tau_u * tau_u;
    (bounds.a_low * half_sq, bounds.a_up * half_sq)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub x_p: DenseVector,
    /// Time at which the prediction was formed (s).
    pub t: f64,
    /// Prediction horizon, equal to the actuator delay (s).
    pub horizon: f64,
}

/// Kernels `G_m = e^{A(m−1)dt} ∫_0^{dt} e^{As} ds B`, `m = 1..=count`.
///
/// `G_m` integrates `e^{A(τ−σ)} B` over the grid cell that ends `(m−1)·dt`
/// before the horizon, so a zero-order-held command sequence is integrated
/// exactly.
pub fn held_input_cells(a: &DenseMatrix, b: &DenseVector, dt: f64, count: usize) -> Result<Vec<DenseVector>> {
    let n = a.nrows();
    let mut augmented = DenseMatrix::zeros(n + 1, n + 1);
    augmented.view_mut((0, 0), (n, n)).copy_from(a);
    augmented.view_mut((0, n), (n, 1)).copy_from(b);
    let block = expm(&augmented, dt)?;
    let step = block.view((0, 0), (n, n)).into_owned();
    let mut cell: DenseVector = block.view((0, n), (n, 1)).column(0).into_owned();
    let mut cells = Vec::with_capacity(count);
    for _ in 0..count {
        cells.push(cell.clone());
        cell = &step * cell;
    }
    Ok(cells)
}

/// Precomputed predictor for fixed `(A, B, D, τ_u, dt)`.
#[derive(Debug, Clone)]
pub struct Predictor {
    tau_u: f64,
    delay_steps: usize,
    transition: DenseMatrix,
    cells: Vec<DenseVector>,
    d: DenseVector,
}

impl Predictor {
    pub fn new(m: &SystemMatrices, tau_u: f64, dt: f64) -> Result<Self> {
        let delay_steps = grid_steps(tau_u, dt)?;
        Ok(Self {
            tau_u,
            delay_steps,
            transition: expm(&m.a, tau_u)?,
            cells: held_input_cells(&m.a, &m.b, dt, delay_steps)?,
            d: m.d.clone(),
        })
    }

    pub fn horizon(&self) -> f64 {
        self.tau_u
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    /// `e^{Aτ_u}`.
    pub fn transition(&self) -> &DenseMatrix {
        &self.transition
    }

    /// Contribution of the commands still in the actuator pipeline.
    ///
    /// `u_hist` holds issued commands with the most recent one as its newest
    /// sample; the command about to be computed is not yet included.
    pub fn input_contribution(&self, u_hist: &DelayedSignal) -> Result<DenseVector> {
        if u_hist.len() < self.delay_steps {
            return Err(Error::History(format!(
                "command history holds {} samples, prediction needs {}",
                u_hist.len(),
                self.delay_steps
            )));
        }
        Ok(u_hist.held_integral(&self.cells, 0)?.unwrap_or_else(|| DenseVector::zeros(self.d.len())))
    }

    /// `x_p = e^{Aτ_u} x + ∫_{−τ_u}^0 e^{−Aθ} B u(t+θ) dθ + D τ_u r`.
    pub fn predict_full(&self, x: &DenseVector, u_hist: &DelayedSignal, r: f64, t: f64) -> Result<Prediction> {
        if x.len() != self.d.len() {
            return Err(Error::InvalidInput(format!("state has {} entries, model expects {}", x.len(), self.d.len())));
        }
        let x_p = &self.transition * x + self.input_contribution(u_hist)? + &self.d * (self.tau_u * r);
        Ok(Prediction { x_p, t, horizon: self.tau_u })
    }

    /// Same map applied to a state estimate.
    pub fn predict_observed(&self, x_hat: &DenseVector, u_hist: &DelayedSignal, r: f64, t: f64) -> Result<Prediction> {
        self.predict_full(x_hat, u_hist, r, t)
    }
}
