//! Uniform-grid delay buffers for scalar signals (CAV command, head-vehicle
//! disturbance) and the quadratures over their recent past.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numkernel::DenseVector;

const GRID_TOL: f64 = 1e-9;

/// Converts a duration to a whole number of grid steps, rejecting values that
/// are not integer multiples of `dt`.
pub fn grid_steps(duration: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(Error::InvalidInput(format!("duration must be non-negative, got {duration}")));
    }
    let steps = duration / dt;
    let rounded = steps.round();
    if (steps - rounded).abs() > GRID_TOL * rounded.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "duration {duration} s is not an integer multiple of the time step {dt} s"
        )));
    }
    Ok(rounded as usize)
}

/// Ring buffer of a scalar signal sampled every `dt`, newest sample last.
///
/// The buffer starts zero-filled over its whole span, i.e. the signal is
/// taken to be zero before the first push.
#[derive(Debug, Clone)]
pub struct DelayedSignal {
    dt: f64,
    samples: VecDeque<f64>,
}

impl DelayedSignal {
    /// Buffer covering offsets `0, −dt, …, −span`; holds `span/dt + 1` samples.
    pub fn new(span: f64, dt: f64) -> Result<Self> {
        let steps = grid_steps(span, dt)?;
        Ok(Self { dt, samples: VecDeque::from(vec![0.0; steps + 1]) })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn span(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.dt
    }

    /// Number of stored grid points.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends the newest sample and evicts the oldest.
    pub fn push(&mut self, value: f64) {
        self.samples.pop_front();
        self.samples.push_back(value);
    }

    /// Sample `lag` grid steps before the newest one.
    pub fn sample(&self, lag: usize) -> Result<f64> {
        let len = self.samples.len();
        if lag >= len {
            return Err(Error::History(format!("lag of {lag} steps exceeds buffer of {len} samples")));
        }
        Ok(self.samples[len - 1 - lag])
    }

    /// Sample at time offset `offset ≤ 0` relative to the newest sample.
    pub fn at(&self, offset: f64) -> Result<f64> {
        let lag = grid_steps(-offset, self.dt).map_err(|e| Error::History(e.to_string()))?;
        self.sample(lag)
    }

    /// Composite trapezoid rule for `∫_{from}^{to} W(θ) sig(θ) dθ` over grid
    /// offsets `−span ≤ from < to ≤ 0`.
    pub fn weighted_integral<W>(&self, from: f64, to: f64, weight: W) -> Result<DenseVector>
    where
        W: Fn(f64) -> DenseVector,
    {
        if !(from < to) {
            return Err(Error::History(format!("empty integration interval [{from}, {to}]")));
        }
        let to_err = |e: Error| Error::History(e.to_string());
        let first = grid_steps(-from, self.dt).map_err(to_err)?;
        let last = grid_steps(-to.min(0.0), self.dt).map_err(to_err)?;
        if to > GRID_TOL * self.dt {
            return Err(Error::History(format!("upper offset {to} lies in the future")));
        }
        if first >= self.samples.len() {
            return Err(Error::History(format!("offset {from} s is older than the buffer span {} s", self.span())));
        }
        let mut acc: Option<DenseVector> = None;
        for lag in last..=first {
            let theta = -(lag as f64) * self.dt;
            let w = if lag == last || lag == first { 0.5 * self.dt } else { self.dt };
            let term = weight(theta) * (w * self.sample(lag)?);
            acc = Some(match acc {
                Some(sum) => sum + term,
                None => term,
            });
        }
        Ok(acc.expect("interval contains at least two grid points"))
    }

    /// `Σ_m cells[m] · sample(first_lag + m)` — exact integral of a
    /// zero-order-held signal when `cells[m]` is the integrated kernel over
    /// the `m`-th grid cell.
    pub fn held_integral(&self, cells: &[DenseVector], first_lag: usize) -> Result<Option<DenseVector>> {
        let mut acc: Option<DenseVector> = None;
        for (m, cell) in cells.iter().enumerate() {
            let term = cell * self.sample(first_lag + m)?;
            acc = Some(match acc {
                Some(sum) => sum + term,
                None => term,
            });
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit(_: f64) -> DenseVector {
        DenseVector::from_element(1, 1.0)
    }

    #[test]
    fn grid_alignment() {
        assert_eq!(grid_steps(0.4, 0.01).unwrap(), 40);
        assert_eq!(grid_steps(0.0, 0.01).unwrap(), 0);
        assert!(grid_steps(0.4, 0.013).is_err());
        assert!(grid_steps(-0.1, 0.01).is_err());
        assert!(grid_steps(0.4, 0.0).is_err());
    }

    #[test]
    fn push_and_sample() {
        let mut sig = DelayedSignal::new(0.4, 0.01).unwrap();
        assert_eq!(sig.len(), 41);
        sig.push(1.0);
        assert_eq!(sig.sample(0).unwrap(), 1.0);
        for k in 2..=10 {
            sig.push(k as f64);
        }
        assert_eq!(sig.sample(9).unwrap(), 1.0);
        assert_eq!(sig.at(-0.09).unwrap(), 1.0);
        assert_eq!(sig.sample(10).unwrap(), 0.0);
        assert!(sig.sample(41).is_err());
        assert!(sig.at(-0.005).is_err());
    }

    #[test]
    fn oldest_sample_is_evicted() {
        let mut sig = DelayedSignal::new(0.02, 0.01).unwrap();
        for v in [1.0, 2.0, 3.0, 4.0] {
            sig.push(v);
        }
        assert_eq!(sig.len(), 3);
        assert_eq!(sig.sample(2).unwrap(), 2.0);
    }

    #[test]
    fn trapezoid_on_zero_and_constant() {
        let mut sig = DelayedSignal::new(0.4, 0.01).unwrap();
        assert_eq!(sig.weighted_integral(-0.4, 0.0, unit).unwrap()[0], 0.0);
        for _ in 0..41 {
            sig.push(3.0);
        }
        let v = sig.weighted_integral(-0.4, 0.0, |_| DenseVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(v[0], 1.2, epsilon = 1e-13);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn trapezoid_exact_for_linear_signal() {
        let mut sig = DelayedSignal::new(0.4, 0.01).unwrap();
        for k in (0..=40).rev() {
            sig.push(-(k as f64) * 0.01);
        }
        let v = sig.weighted_integral(-0.4, 0.0, unit).unwrap();
        assert_relative_eq!(v[0], -0.08, epsilon = 1e-14);
        // affine signal times constant matrix weight
        let w = DenseVector::from_vec(vec![2.0, -1.0]);
        let v = sig.weighted_integral(-0.3, -0.1, |_| w.clone()).unwrap();
        let exact = -(0.1f64.powi(2) - 0.3f64.powi(2)) / 2.0;
        assert_relative_eq!(v[0], 2.0 * -exact, epsilon = 1e-13);
        assert_relative_eq!(v[1], exact, epsilon = 1e-13);
    }

    #[test]
    fn trapezoid_rejects_bad_intervals() {
        let sig = DelayedSignal::new(0.4, 0.01).unwrap();
        assert!(sig.weighted_integral(-0.5, 0.0, unit).is_err());
        assert!(sig.weighted_integral(-0.1, -0.1, unit).is_err());
        assert!(sig.weighted_integral(-0.105, 0.0, unit).is_err());
        assert!(sig.weighted_integral(-0.1, 0.05, unit).is_err());
    }

    #[test]
    fn trapezoid_converges_second_order() {
        let error = |dt: f64| {
            let mut sig = DelayedSignal::new(1.0, dt).unwrap();
            let steps = grid_steps(1.0, dt).unwrap();
            for k in (0..=steps).rev() {
                sig.push((-(k as f64) * dt * 3.0).sin());
            }
            let exact = ((-3.0f64).cos() - 1.0) / 3.0;
            (sig.weighted_integral(-1.0, 0.0, unit).unwrap()[0] - exact).abs()
        };
        let ratio = error(0.02) / error(0.01);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn held_integral_weights_lags() {
        let mut sig = DelayedSignal::new(0.03, 0.01).unwrap();
        for v in [1.0, 2.0, 3.0, 4.0] {
            sig.push(v);
        }
        let cells = vec![DenseVector::from_element(1, 1.0), DenseVector::from_element(1, 10.0)];
        assert_eq!(sig.held_integral(&cells, 1).unwrap().unwrap()[0], 3.0 + 20.0);
        assert!(sig.held_integral(&[], 0).unwrap().is_none());
        assert!(sig.held_integral(&cells, 3).is_err());
    }
}
