//! Video feature ingestion: pre-cropped face frames -> fixed 50-timestep
//! 64x64 grayscale tensor with values in [0, 1].

pub mod frames;

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::cache::TensorRecord;
pub use frames::load_frames;

/// Frame edge length expected by the backbone.
pub const FRAME_SIZE: usize = 64;
/// Fixed number of timesteps after normalization.
pub const TARGET_TIMESTEPS: usize = 50;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("{0}: {1}")]
    Io(String, #[source] io::Error),
    #[error("no frames found")]
    NoFrames,
    #[error("frames have inconsistent dimensions")]
    InconsistentDimensions,
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("expected {FRAME_SIZE}x{FRAME_SIZE} frames, got {0}x{1}")]
    WrongFrameSize(usize, usize),
}

/// Grayscale frame sequence, row-major `t x h x w` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub pixels: Vec<u8>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl FrameSequence {
    pub fn frame(&self, i: usize) -> &[u8] {
        let span = self.h * self.w;
        &self.pixels[i * span..(i + 1) * span]
    }
}

/// Normalized video features: `50 x 64 x 64 x 1`, values = pixel / 255.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatureTensor {
    values: Vec<f64>,
}

impl VideoFeatureTensor {
    pub fn shape(&self) -> [usize; 4] {
        [TARGET_TIMESTEPS, FRAME_SIZE, FRAME_SIZE, 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_record(&self) -> TensorRecord {
        TensorRecord::new(
            vec![TARGET_TIMESTEPS, FRAME_SIZE, FRAME_SIZE, 1],
            self.values.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Fix the timestep count: subsample uniformly (both endpoints included)
/// when too long, repeat the last frame when too short.
pub fn normalize_timesteps(seq: &FrameSequence, target: usize) -> Result<FrameSequence, VideoError> {
    if seq.h != FRAME_SIZE || seq.w != FRAME_SIZE {
        return Err(VideoError::WrongFrameSize(seq.h, seq.w));
    }
    if seq.t == 0 {
        return Err(VideoError::NoFrames);
    }
    let span = seq.h * seq.w;
    let mut pixels = Vec::with_capacity(target * span);
    if seq.t >= target {
        for i in 0..target {
            let idx = if target == 1 {
                0
            } else {
                ((i * (seq.t - 1)) as f64 / (target - 1) as f64).round() as usize
            };
            pixels.extend_from_slice(seq.frame(idx));
        }
    } else {
        pixels.extend_from_slice(&seq.pixels);
        for _ in seq.t..target {
            pixels.extend_from_slice(seq.frame(seq.t - 1));
        }
    }
    Ok(FrameSequence { pixels, t: target, h: seq.h, w: seq.w })
}

/// Scale a normalized sequence into [0, 1].
pub fn to_feature_tensor(seq: &FrameSequence) -> Result<VideoFeatureTensor, VideoError> {
    if seq.h != FRAME_SIZE || seq.w != FRAME_SIZE {
        return Err(VideoError::WrongFrameSize(seq.h, seq.w));
    }
    if seq.t != TARGET_TIMESTEPS {
        return Err(VideoError::MalformedImage(format!(
            "sequence has {} timesteps, expected {TARGET_TIMESTEPS} (normalize first)",
            seq.t
        )));
    }
    Ok(VideoFeatureTensor { values: seq.pixels.iter().map(|&p| p as f64 / 255.0).collect() })
}

/// Full pipeline: EMSF file or PGM directory -> 50x64x64x1 tensor.
pub fn video_features(path: &Path) -> Result<VideoFeatureTensor, VideoError> {
    let seq = load_frames(path)?;
    let normalized = normalize_timesteps(&seq, TARGET_TIMESTEPS)?;
    to_feature_tensor(&normalized)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_with_marked_frames(t: usize) -> FrameSequence {
        // Frame i is filled with the value i (mod 256).
        let span = FRAME_SIZE * FRAME_SIZE;
        let mut pixels = Vec::with_capacity(t * span);
        for i in 0..t {
            pixels.extend(std::iter::repeat(i as u8).take(span));
        }
        FrameSequence { pixels, t, h: FRAME_SIZE, w: FRAME_SIZE }
    }

    #[test]
    fn fifty_frames_pass_through_unchanged() {
        let seq = seq_with_marked_frames(50);
        let out = normalize_timesteps(&seq, 50).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn thirty_frames_pad_with_the_last() {
        let seq = seq_with_marked_frames(30);
        let out = normalize_timesteps(&seq, 50).unwrap();
        assert_eq!(out.t, 50);
        for i in 0..30 {
            assert_eq!(out.frame(i)[0], i as u8);
        }
        for i in 30..50 {
            assert_eq!(out.frame(i)[0], 29);
        }
    }

    #[test]
    fn ninety_nine_frames_select_even_indices() {
        let seq = seq_with_marked_frames(99);
        let out = normalize_timesteps(&seq, 50).unwrap();
        for i in 0..50 {
            assert_eq!(out.frame(i)[0], (2 * i) as u8, "selected frame {i}");
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        for t in [1, 7, 49, 50, 51, 120] {
            let once = normalize_timesteps(&seq_with_marked_frames(t), 50).unwrap();
            let twice = normalize_timesteps(&once, 50).unwrap();
            assert_eq!(once, twice, "t = {t}");
        }
    }

    #[test]
    fn subsampling_preserves_temporal_order() {
        for t in [50, 53, 77, 100, 149] {
            let out = normalize_timesteps(&seq_with_marked_frames(t), 50).unwrap();
            for i in 1..50 {
                assert!(out.frame(i)[0] >= out.frame(i - 1)[0], "t = {t}, step {i}");
            }
        }
    }

    #[test]
    fn wrong_frame_size_is_rejected() {
        let seq = FrameSequence { pixels: vec![0; 32 * 32], t: 1, h: 32, w: 32 };
        assert!(matches!(normalize_timesteps(&seq, 50), Err(VideoError::WrongFrameSize(32, 32))));
    }

    #[test]
    fn pixel_scaling_matches_definition() {
        let mut seq = seq_with_marked_frames(50);
        seq.pixels[0] = 0;
        seq.pixels[1] = 255;
        seq.pixels[2] = 128;
        let tensor = to_feature_tensor(&seq).unwrap();
        assert_eq!(tensor.values()[0], 0.0);
        assert_eq!(tensor.values()[1], 1.0);
        assert!((tensor.values()[2] - 0.50196).abs() < 1e-5);
        assert_eq!(tensor.shape(), [50, 64, 64, 1]);
        assert!(tensor.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn all_zero_frames_give_an_all_zero_tensor() {
        let seq = FrameSequence {
            pixels: vec![0; 50 * FRAME_SIZE * FRAME_SIZE],
            t: 50,
            h: FRAME_SIZE,
            w: FRAME_SIZE,
        };
        let tensor = to_feature_tensor(&seq).unwrap();
        assert!(tensor.values().iter().all(|&v| v == 0.0));
    }
}
