//! Multimodal emotion recognition over audio/video clip pairs.
//!
//! The pipeline converts each clip into fixed-shape features (windowed MFCC
//! tensors for audio, normalized face-frame sequences for video), runs both
//! through per-modality CNN backbones, summarizes the resulting sequences
//! with one of four interchangeable heads (LSTM, GRU, transformer encoder,
//! or max-over-time pooling), and classifies the fused summary into six
//! emotion classes. Training is speaker-disjoint with Adam, cross-entropy,
//! and early stopping; results are reported as per-class precision/recall/F1
//! plus their harmonic means.
//!
//! Everything runs on the CPU in double precision on a reverse-mode
//! differentiation tape, so gradients can be validated against finite
//! differences end to end.

pub mod audio;
pub mod autograd;
pub mod cache;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod model;
pub mod train;
pub mod video;

/// The six emotion classes, in canonical label order.
pub const EMOTIONS: [&str; 6] = ["angry", "happy", "sad", "neutral", "disgust", "fear"];

/// Number of emotion classes.
pub const NUM_CLASSES: usize = EMOTIONS.len();

/// Parse an emotion label given either as an index (`0..=5`) or a canonical
/// name (case-insensitive).
pub fn parse_label(s: &str) -> Option<usize> {
    let t = s.trim();
    if let Ok(idx) = t.parse::<usize>() {
        return (idx < NUM_CLASSES).then_some(idx);
    }
    let lower = t.to_ascii_lowercase();
    EMOTIONS.iter().position(|name| *name == lower)
}
