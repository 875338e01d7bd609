//! Deterministic evidence-accumulation trajectories.
//!
//! Evidence starts at 0.5 and rises along a normalized logistic curve to the
//! classifier's boundary probability `R_p`, reaching it after `N_t` frames.
//! The curve is rescaled so both endpoints are hit exactly for any
//! steepness.

use std::io::Write;

use tracing::warn;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_STEEPNESS: f64 = 6.0;
/// Boundaries at or below the start point are lifted to this value.
pub const MIN_BOUNDARY: f64 = 0.51;
pub const MIN_RT: f64 = 0.2;
pub const MAX_RT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceTrajectory<T> {
    start: T,
    boundary: T,
    response_time: T,
    frame_rate: u32,
    values: Vec<T>,
    delta_p: T,
}

impl<T: Scalar> EvidenceTrajectory<T> {
    /// Evidence at the start of every trial.
    pub fn start_point() -> T {
        T::lit(0.5)
    }

    /// Builds the trajectory for boundary `r_p`, baseline time `r_t` seconds,
    /// frame rate `f` and logistic steepness `k`.
    pub fn build(r_p: T, r_t: T, f: u32, k: T) -> Result<Self> {
        let start = Self::start_point();
        if !r_p.is_finite() || r_p > T::one() {
            return Err(Error::invalid(format!("boundary must lie in (0.5, 1], got {r_p}")));
        }
        if !(r_t >= T::lit(MIN_RT) && r_t <= T::lit(MAX_RT)) {
            return Err(Error::invalid(format!(
                "baseline rt must lie in [{MIN_RT}, {MAX_RT}], got {r_t}"
            )));
        }
        if f < 1 {
            return Err(Error::invalid("frame rate must be >= 1"));
        }
        if !(k > T::zero()) {
            return Err(Error::invalid(format!("steepness must be > 0, got {k}")));
        }
        let boundary = if r_p <= start {
            warn!(r_p = r_p.to_f64_lossy(), "degenerate boundary lifted to {MIN_BOUNDARY}");
            T::lit(MIN_BOUNDARY)
        } else {
            r_p
        };

        let fr = T::from_u32(f).expect("u32 fits");
        let steps = round_half_up(fr * r_t).max(1);
        let span = boundary - start;
        let n = T::from_usize(steps).expect("usize fits");
        let mut values = Vec::with_capacity(steps + 1);
        values.push(start);
        for i in 1..steps {
            let x = T::from_usize(i).expect("usize fits") / n;
            values.push(start + span * normalized_logistic(x, k));
        }
        values.push(boundary);

        Ok(Self {
            start,
            boundary,
            response_time: r_t,
            frame_rate: f,
            values,
            delta_p: span.abs() / (fr * r_t),
        })
    }

    pub fn start(&self) -> T {
        self.start
    }

    pub fn boundary(&self) -> T {
        self.boundary
    }

    pub fn response_time(&self) -> T {
        self.response_time
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    /// `N_t`: frames until the unbiased accumulator reaches the boundary.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    /// `T(0..=N_t)`.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Evidence at frame `i`, held at the boundary past `N_t`.
    pub fn at(&self, i: usize) -> T {
        self.values[i.min(self.steps())]
    }

    /// Evidence per frame, `|R_p - S_p| / (f * R_t)`.
    pub fn delta_p(&self) -> T {
        self.delta_p
    }

    /// Writes `step,evidence` rows with a header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["step", "evidence"])?;
        for (i, v) in self.values.iter().enumerate() {
            wtr.write_record([i.to_string(), v.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// `g(x) = (σ(k(2x-1)) - σ(-k)) / (σ(k) - σ(-k))`, mapping `[0,1]` onto `[0,1]`.
pub fn normalized_logistic<T: Scalar>(x: T, k: T) -> T {
    let lo = (-k).sigmoid();
    let hi = k.sigmoid();
    ((k * (x + x - T::one())).sigmoid() - lo) / (hi - lo)
}

fn round_half_up<T: Scalar>(x: T) -> usize {
    (x + T::lit(0.5)).floor().to_usize().unwrap_or(0)
}
