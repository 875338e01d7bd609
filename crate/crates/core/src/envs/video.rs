use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::stimuli::{StimulusFrame, FRAME_HEIGHT, FRAME_WIDTH};

/// Frames in one 5 s stimulus video at 5 Hz.
pub const VIDEO_FRAMES: usize = 25;

/// Maps a stimulus frame to a fixed-width feature vector.
pub trait FrameExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, frame: &StimulusFrame) -> Vec<f64>;
}

const PATCH: usize = 4;
const FILTERS: usize = 8;

/// Untrained convolution (4x4 patches, stride 4, ReLU) followed by a random
/// linear projection and `tanh`, all drawn from a fixed seed.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    kernels: Array2<f64>,
    kernel_bias: Array1<f64>,
    projection: Array2<f64>,
}

impl RandomConvExtractor {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let n_patch = (FRAME_WIDTH / PATCH) * (FRAME_HEIGHT / PATCH);
        let conv_out = n_patch * FILTERS;
        let mut draw = |rows, cols, scale: f64| {
            Array2::from_shape_simple_fn((rows, cols), || unit.sample(&mut rng) * scale)
        };
        let kernels = draw(FILTERS, PATCH * PATCH, 1.0 / PATCH as f64);
        let kernel_bias = draw(1, FILTERS, 0.1).row(0).to_owned();
        let projection = draw(dim, conv_out, 1.0 / (conv_out as f64).sqrt());
        Self {
            kernels,
            kernel_bias,
            projection,
        }
    }
}

impl FrameExtractor for RandomConvExtractor {
    fn dim(&self) -> usize {
        self.projection.nrows()
    }

    fn extract(&self, frame: &StimulusFrame) -> Vec<f64> {
        let px = frame.pixels();
        let (pw, ph) = (FRAME_WIDTH / PATCH, FRAME_HEIGHT / PATCH);
        let mut conv = Array1::zeros(pw * ph * FILTERS);
        let mut patch = [0.0f64; PATCH * PATCH];
        for py in 0..ph {
            for pxi in 0..pw {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let (x, y) = (pxi * PATCH + dx, py * PATCH + dy);
                        patch[dy * PATCH + dx] = f64::from(px[y * FRAME_WIDTH + x]);
                    }
                }
                let base = (py * pw + pxi) * FILTERS;
                for f in 0..FILTERS {
                    let z: f64 = self
                        .kernels
                        .row(f)
                        .iter()
                        .zip(&patch)
                        .map(|(k, p)| k * p)
                        .sum::<f64>()
                        + self.kernel_bias[f];
                    conv[base + f] = z.max(0.0);
                }
            }
        }
        self.projection.dot(&conv).mapv(f64::tanh).to_vec()
    }
}

/// Per-frame features of a 25-frame video, one row per frame.
pub fn extract_video_features<E: FrameExtractor + ?Sized>(
    frames: &[StimulusFrame],
    extractor: &E,
) -> Result<Array2<f64>> {
    if frames.len() != VIDEO_FRAMES {
        return Err(Error::invalid(format!(
            "expected {VIDEO_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let d = extractor.dim();
    let mut out = Array2::zeros((VIDEO_FRAMES, d));
    for (i, f) in frames.iter().enumerate() {
        out.row_mut(i).assign(&Array1::from(extractor.extract(f)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::frame_sequence;

    #[test]
    fn shapes_and_determinism() {
        let ex = RandomConvExtractor::new(2048, 3);
        let video = frame_sequence(5.0, 5, true).unwrap();
        let f = extract_video_features(&video, &ex).unwrap();
        assert_eq!(f.dim(), (25, 2048));
        let again = extract_video_features(&video, &RandomConvExtractor::new(2048, 3)).unwrap();
        assert_eq!(f, again);
        // frames 0 and 1 show the same bar state
        assert_eq!(f.row(0), f.row(1));
        assert_ne!(f.row(0), f.row(5));
        assert!(extract_video_features(&video[..24], &ex).is_err());
    }

    #[test]
    fn blank_video_rows_are_equal() {
        let ex = RandomConvExtractor::new(16, 0);
        let f = extract_video_features(&frame_sequence(5.0, 5, false).unwrap(), &ex).unwrap();
        for r in f.rows() {
            assert_eq!(r, f.row(0));
        }
    }
}
