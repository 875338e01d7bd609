//! Progress-bar time-pressure stimulus rendered as grayscale frames.
//!
//! The bar gains one unit per elapsed second and empties after the fifth.
//! Pressure frames draw a border at half intensity so that the empty bar at
//! `t < 1 s` is still distinguishable from a blank (no-pressure) frame.

use std::io::Write;

use crate::error::{Error, Result};

pub const FRAME_WIDTH: usize = 100;
pub const FRAME_HEIGHT: usize = 12;
pub const FRAME_LEN: usize = FRAME_WIDTH * FRAME_HEIGHT;
/// Units in a full bar; the count resets when it would reach this value.
pub const BAR_UNITS: u32 = 5;

const BORDER: f32 = 0.5;
const FILL: f32 = 1.0;
const INNER_WIDTH: usize = FRAME_WIDTH - 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResetDisplay {
    /// Count `floor(t) mod 5`: the bar is empty at every reset.
    #[default]
    Empty,
    /// Show a full bar for the second in which the count would be 5.
    FullThenReset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusFrame {
    pixels: Vec<f32>,
    filled_units: u32,
    pressure_on: bool,
}

impl StimulusFrame {
    pub fn blank() -> Self {
        Self {
            pixels: vec![0.0; FRAME_LEN],
            filled_units: 0,
            pressure_on: false,
        }
    }

    /// Row-major values in `[0, 1]`.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn filled_units(&self) -> u32 {
        self.filled_units
    }

    pub fn pressure_on(&self) -> bool {
        self.pressure_on
    }

    pub fn pixel(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * FRAME_WIDTH + x]
    }

    /// Fraction of interior columns that are filled.
    pub fn filled_fraction(&self) -> f64 {
        let y = FRAME_HEIGHT / 2;
        let filled = (1..=INNER_WIDTH)
            .filter(|&x| self.pixel(x, y) == FILL)
            .count();
        filled as f64 / INNER_WIDTH as f64
    }

    /// Binary PGM (P5), 8-bit.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{FRAME_WIDTH} {FRAME_HEIGHT}\n255\n")?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)
    }
}

pub fn units_at(t: f64, reset: ResetDisplay) -> u32 {
    let secs = t.floor() as u64;
    let units = (secs % BAR_UNITS as u64) as u32;
    match reset {
        ResetDisplay::FullThenReset if units == 0 && secs > 0 => BAR_UNITS,
        _ => units,
    }
}

pub fn render_frame(t: f64, pressure_on: bool) -> Result<StimulusFrame> {
    render_frame_with(t, pressure_on, ResetDisplay::default())
}

pub fn render_frame_with(t: f64, pressure_on: bool, reset: ResetDisplay) -> Result<StimulusFrame> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("stimulus time must be >= 0, got {t}")));
    }
    if !pressure_on {
        return Ok(StimulusFrame::blank());
    }
    let units = units_at(t, reset);
    let mut pixels = vec![0.0f32; FRAME_LEN];
    for x in 0..FRAME_WIDTH {
        pixels[x] = BORDER;
        pixels[(FRAME_HEIGHT - 1) * FRAME_WIDTH + x] = BORDER;
    }
    for y in 0..FRAME_HEIGHT {
        pixels[y * FRAME_WIDTH] = BORDER;
        pixels[y * FRAME_WIDTH + FRAME_WIDTH - 1] = BORDER;
    }
    let filled_cols =
        (units as usize * INNER_WIDTH + BAR_UNITS as usize / 2) / BAR_UNITS as usize;
    for y in 1..FRAME_HEIGHT - 1 {
        for x in 1..=filled_cols {
            pixels[y * FRAME_WIDTH + x] = FILL;
        }
    }
    Ok(StimulusFrame {
        pixels,
        filled_units: units,
        pressure_on,
    })
}

/// Frames sampled at `t = i / f` for `i in 0..round(duration * f)`.
pub fn frame_sequence(duration: f64, f: u32, pressure_on: bool) -> Result<Vec<StimulusFrame>> {
    if !(duration > 0.0) || f < 1 {
        return Err(Error::invalid(format!(
            "need duration > 0 and f >= 1, got {duration} s at {f} Hz"
        )));
    }
    let n = (duration * f as f64).round() as usize;
    (0..n)
        .map(|i| render_frame(i as f64 / f as f64, pressure_on))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Second-by-second counter that resets when it reaches five units.
    fn counter_oracle(t: f64) -> u32 {
        let mut units = 0;
        for _ in 0..(t.floor() as u64) {
            units += 1;
            if units == BAR_UNITS {
                units = 0;
            }
        }
        units
    }

    #[test]
    fn unit_counts() {
        assert_eq!(render_frame(0.0, true).unwrap().filled_units(), 0);
        assert_eq!(render_frame(1.2, true).unwrap().filled_units(), 1);
        assert_eq!(counter_oracle(6.0), 1);
        assert_eq!(render_frame(6.0, true).unwrap().filled_units(), 1);
        assert!(render_frame(-0.1, true).is_err());
    }

    #[test]
    fn blank_and_pressure_differ_at_zero() {
        let blank = render_frame(0.0, false).unwrap();
        assert!(blank.pixels().iter().all(|&v| v == 0.0));
        let on = render_frame(0.0, true).unwrap();
        assert_ne!(blank, on);
        assert_eq!(on.filled_fraction(), 0.0);
    }

    #[test]
    fn sequences() {
        assert_eq!(frame_sequence(5.0, 5, true).unwrap().len(), 25);
        assert_eq!(frame_sequence(10.0, 5, true).unwrap().len(), 50);
        let off = frame_sequence(1.0, 5, false).unwrap();
        assert_eq!(off.len(), 5);
        assert!(off.iter().all(|fr| fr.pixels().iter().all(|&v| v == 0.0)));
        assert!(frame_sequence(0.0, 5, true).is_err());
    }

    #[test]
    fn full_then_reset_variant() {
        assert_eq!(units_at(5.5, ResetDisplay::FullThenReset), 5);
        assert_eq!(units_at(0.5, ResetDisplay::FullThenReset), 0);
        assert_eq!(units_at(6.5, ResetDisplay::FullThenReset), 1);
    }

    #[test]
    fn pgm_header() {
        let mut buf = Vec::new();
        render_frame(2.0, true).unwrap().write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n100 12\n255\n"));
        assert_eq!(buf.len(), 14 + FRAME_LEN);
    }

    proptest! {
        #[test]
        fn matches_counter_and_fraction(t in 0.0f64..60.0) {
            let fr = render_frame(t, true).unwrap();
            prop_assert_eq!(fr.filled_units(), counter_oracle(t));
            let want = fr.filled_units() as f64 / BAR_UNITS as f64;
            prop_assert!((fr.filled_fraction() - want).abs() <= 1.0 / INNER_WIDTH as f64);
            prop_assert!(fr.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn periodic_and_deterministic(t in 0.0f64..20.0) {
            let a = render_frame(t, true).unwrap();
            prop_assert_eq!(&a, &render_frame(t + 5.0, true).unwrap());
            prop_assert_eq!(&a, &render_frame(t, true).unwrap());
        }
    }
}
