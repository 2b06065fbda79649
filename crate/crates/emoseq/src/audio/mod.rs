//! Audio feature extraction: WAV -> 5 s @ 22.05 kHz clip -> 216x40 MFCC
//! matrix -> 9x40x40 windowed feature tensor.
//!
//! The MFCC chain is: centered framing with reflect padding, periodic Hann
//! window, magnitude-squared FFT, 128-band triangular mel projection,
//! decibel scaling with an 80 dB dynamic-range clamp, and an orthonormal
//! DCT-II keeping coefficients 0..39. The whole pipeline is a pure function
//! of the input bytes.

pub mod mel;
pub mod wav;

use std::io;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::cache::TensorRecord;
use mel::{DctBasis, MelFilterbank};
pub use wav::{load_wav, write_wav_mono16};

/// Target sample rate after preparation, in Hz.
pub const TARGET_SAMPLE_RATE: u32 = 22_050;
/// Clip length after preparation: exactly five seconds.
pub const CLIP_SAMPLES: usize = 110_250;
pub const N_FFT: usize = 2048;
pub const HOP: usize = 512;
pub const N_MFCC: usize = 40;
pub const N_MELS: usize = 128;
/// Frames produced by a prepared clip: 1 + 110250/512.
pub const FRAMES_PER_CLIP: usize = 1 + CLIP_SAMPLES / HOP;
pub const WINDOW_FRAMES: usize = 40;
pub const WINDOW_STRIDE: usize = 20;
/// Time windows per prepared clip.
pub const WINDOWS_PER_CLIP: usize = 9;

const DB_FLOOR: f64 = 1e-10;
const DB_RANGE: f64 = 80.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{0}: {1}")]
    Io(String, #[source] io::Error),
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("audio contains non-finite samples")]
    NonFiniteInput,
    #[error("need at least {WINDOW_FRAMES} frames, got {0}")]
    TooFewFrames(usize),
}

/// A mono audio signal with its sample rate.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

/// MFCC coefficients, row-major `frames x 40`.
#[derive(Debug, Clone)]
pub struct MfccMatrix {
    frames: usize,
    values: Vec<f64>,
}

impl MfccMatrix {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coeffs(&self) -> usize {
        N_MFCC
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * N_MFCC..(t + 1) * N_MFCC]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Overlapping time windows of an [`MfccMatrix`]: `windows x 40 x 40`.
///
/// A prepared clip always yields exactly nine windows.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureTensor {
    windows: usize,
    values: Vec<f64>,
}

impl AudioFeatureTensor {
    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.windows, WINDOW_FRAMES, N_MFCC]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn window(&self, k: usize) -> &[f64] {
        let span = WINDOW_FRAMES * N_MFCC;
        &self.values[k * span..(k + 1) * span]
    }

    pub fn to_record(&self) -> TensorRecord {
        TensorRecord::new(
            vec![self.windows, WINDOW_FRAMES, N_MFCC],
            self.values.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Resample to 22 050 Hz (linear interpolation) and zero-pad or truncate to
/// exactly five seconds.
pub fn prepare_clip(clip: &AudioClip) -> Result<AudioClip, AudioError> {
    if clip.samples.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    let mut samples = if clip.sample_rate_hz == TARGET_SAMPLE_RATE {
        clip.samples.clone()
    } else {
        resample_linear(&clip.samples, clip.sample_rate_hz, TARGET_SAMPLE_RATE)
    };
    samples.resize(CLIP_SAMPLES, 0.0);
    Ok(AudioClip { samples, sample_rate_hz: TARGET_SAMPLE_RATE })
}

fn resample_linear(samples: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    let ratio = from_hz as f64 / to_hz as f64;
    let out_len = ((samples.len() as f64 / ratio).round() as usize).max(1);
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = pos - i0 as f64;
            samples[i0] * (1.0 - frac) + samples[i1] * frac
        })
        .collect()
}

/// Reusable MFCC extractor; construction precomputes the window, filterbank,
/// and DCT basis.
pub struct MfccExtractor {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    dct: DctBasis,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(n_fft: usize, hop: usize, n_mfcc: usize) -> Self {
        // Periodic Hann window.
        let window: Vec<f64> = (0..n_fft)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos())
            .collect();
        let sr = TARGET_SAMPLE_RATE as f64;
        Self {
            n_fft,
            hop,
            window,
            filterbank: MelFilterbank::new(N_MELS, n_fft, sr, 0.0, sr / 2.0),
            dct: DctBasis::new(n_mfcc, N_MELS),
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        }
    }

    /// One-sided power spectrogram, row-major `frames x (1 + n_fft/2)`.
    ///
    /// Frames are centered: the signal is reflect-padded by `n_fft/2` on both
    /// ends, so frame `t` covers padded samples `[t*hop, t*hop + n_fft)`.
    pub fn power_spectrogram(&self, samples: &[f64]) -> Result<(usize, Vec<f64>), AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptyAudio);
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(AudioError::NonFiniteInput);
        }
        let n = samples.len();
        let frames = 1 + n / self.hop;
        let n_bins = 1 + self.n_fft / 2;
        let pad = self.n_fft / 2;

        let mut power = vec![0.0; frames * n_bins];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = t * self.hop + i;
                let sample = samples[reflect_index(idx as isize - pad as isize, n)];
                *slot = Complex::new(sample * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            let out = &mut power[t * n_bins..(t + 1) * n_bins];
            for (slot, c) in out.iter_mut().zip(&buf[..n_bins]) {
                *slot = c.re * c.re + c.im * c.im;
            }
        }
        Ok((frames, power))
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MfccMatrix, AudioError> {
        let (frames, power) = self.power_spectrogram(&clip.samples)?;
        let n_bins = 1 + self.n_fft / 2;

        // Mel projection, then decibels clamped to [peak - 80 dB, peak].
        let n_mels = self.filterbank.n_mels();
        let mut mel_db = vec![0.0; frames * n_mels];
        for t in 0..frames {
            self.filterbank
                .project(&power[t * n_bins..(t + 1) * n_bins], &mut mel_db[t * n_mels..(t + 1) * n_mels]);
        }
        let mut peak = f64::NEG_INFINITY;
        for v in mel_db.iter_mut() {
            *v = 10.0 * v.max(DB_FLOOR).log10();
            peak = peak.max(*v);
        }
        let floor = peak - DB_RANGE;
        for v in mel_db.iter_mut() {
            *v = v.max(floor);
        }

        let mut values = vec![0.0; frames * N_MFCC];
        for t in 0..frames {
            self.dct.apply(
                &mel_db[t * n_mels..(t + 1) * n_mels],
                &mut values[t * N_MFCC..(t + 1) * N_MFCC],
            );
        }
        Ok(MfccMatrix { frames, values })
    }
}

/// Reflect (mirror without edge duplication) an out-of-range index into `[0, n)`.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Extract the 40-coefficient MFCC matrix of a prepared clip.
pub fn extract_mfcc(clip: &AudioClip) -> Result<MfccMatrix, AudioError> {
    MfccExtractor::new(N_FFT, HOP, N_MFCC).extract(clip)
}

/// Cut an MFCC matrix into overlapping windows of 40 frames with stride 20.
/// Trailing frames that do not fill a window are discarded.
pub fn window_chunks(mfcc: &MfccMatrix) -> Result<AudioFeatureTensor, AudioError> {
    let frames = mfcc.frames();
    if frames < WINDOW_FRAMES {
        return Err(AudioError::TooFewFrames(frames));
    }
    let windows = (frames - WINDOW_FRAMES) / WINDOW_STRIDE + 1;
    let span = WINDOW_FRAMES * N_MFCC;
    let mut values = Vec::with_capacity(windows * span);
    for k in 0..windows {
        let start = k * WINDOW_STRIDE * N_MFCC;
        values.extend_from_slice(&mfcc.values()[start..start + span]);
    }
    Ok(AudioFeatureTensor { windows, values })
}

/// Full pipeline: WAV file -> prepared clip -> MFCC -> 9x40x40 tensor.
pub fn audio_features(path: &Path) -> Result<AudioFeatureTensor, AudioError> {
    let clip = load_wav(path)?;
    features_from_clip(&clip)
}

/// Same pipeline starting from an in-memory clip.
pub fn features_from_clip(clip: &AudioClip) -> Result<AudioFeatureTensor, AudioError> {
    let prepared = prepare_clip(clip)?;
    let mfcc = extract_mfcc(&prepared)?;
    let tensor = window_chunks(&mfcc)?;
    debug_assert_eq!(tensor.windows(), WINDOWS_PER_CLIP);
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(duration_s: f64, rate: u32, freq: f64) -> AudioClip {
        let n = (duration_s * rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() * 0.5)
            .collect();
        AudioClip { samples, sample_rate_hz: rate }
    }

    #[test]
    fn three_second_clip_pads_with_exact_zeros() {
        let clip = tone(3.0, 22050, 440.0);
        let prepared = prepare_clip(&clip).unwrap();
        assert_eq!(prepared.samples.len(), CLIP_SAMPLES);
        assert!(prepared.samples[CLIP_SAMPLES - 44_100..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn five_seconds_at_44100_resamples_to_clip_length() {
        let clip = tone(5.0, 44100, 440.0);
        let prepared = prepare_clip(&clip).unwrap();
        assert_eq!(prepared.samples.len(), CLIP_SAMPLES);
        // No padding happened: the final samples come from the signal.
        assert!(prepared.samples[CLIP_SAMPLES - 100..].iter().any(|&s| s != 0.0));
    }

    #[test]
    fn seven_second_clip_keeps_the_first_five() {
        let mut clip = tone(7.0, 22050, 440.0);
        // Mark a sample inside the kept region.
        clip.samples[CLIP_SAMPLES - 1] = 0.123;
        let prepared = prepare_clip(&clip).unwrap();
        assert_eq!(prepared.samples.len(), CLIP_SAMPLES);
        assert_eq!(prepared.samples[CLIP_SAMPLES - 1], 0.123);
    }

    #[test]
    fn empty_clip_is_rejected() {
        let clip = AudioClip { samples: vec![], sample_rate_hz: 22050 };
        assert!(matches!(prepare_clip(&clip), Err(AudioError::EmptyAudio)));
    }

    #[test]
    fn prepared_clip_yields_216_by_40() {
        let prepared = prepare_clip(&tone(2.0, 22050, 440.0)).unwrap();
        let mfcc = extract_mfcc(&prepared).unwrap();
        assert_eq!(mfcc.frames(), FRAMES_PER_CLIP);
        assert_eq!(mfcc.frames(), 216);
        assert_eq!(mfcc.coeffs(), 40);
        assert!(mfcc.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn silence_has_constant_frames_and_zero_higher_coefficients() {
        let clip = AudioClip { samples: vec![0.0; CLIP_SAMPLES], sample_rate_hz: 22050 };
        let mfcc = extract_mfcc(&clip).unwrap();
        let first = mfcc.row(0).to_vec();
        assert!(first[0] < 0.0);
        for c in &first[1..] {
            assert_eq!(*c, 0.0);
        }
        for t in 1..mfcc.frames() {
            assert_eq!(mfcc.row(t), &first[..]);
        }
    }

    #[test]
    fn non_finite_samples_are_rejected() {
        let mut clip = tone(1.0, 22050, 100.0);
        clip.samples[42] = f64::NAN;
        assert!(matches!(extract_mfcc(&clip), Err(AudioError::NonFiniteInput)));
    }

    #[test]
    fn windowing_216_frames_gives_nine_windows() {
        let prepared = prepare_clip(&tone(4.0, 22050, 300.0)).unwrap();
        let mfcc = extract_mfcc(&prepared).unwrap();
        let tensor = window_chunks(&mfcc).unwrap();
        assert_eq!(tensor.shape(), [9, 40, 40]);
    }

    #[test]
    fn window_zero_equals_the_first_forty_rows() {
        let prepared = prepare_clip(&tone(4.0, 22050, 300.0)).unwrap();
        let mfcc = extract_mfcc(&prepared).unwrap();
        let tensor = window_chunks(&mfcc).unwrap();
        assert_eq!(tensor.window(0), &mfcc.values()[..40 * 40]);
        // Window k starts at frame 20k.
        assert_eq!(tensor.window(3), &mfcc.values()[60 * 40..100 * 40]);
    }

    #[test]
    fn forty_frames_give_exactly_one_window() {
        let mfcc = MfccMatrix { frames: 40, values: vec![1.5; 40 * N_MFCC] };
        let tensor = window_chunks(&mfcc).unwrap();
        assert_eq!(tensor.windows(), 1);
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let mfcc = MfccMatrix { frames: 39, values: vec![0.0; 39 * N_MFCC] };
        assert!(matches!(window_chunks(&mfcc), Err(AudioError::TooFewFrames(39))));
    }

    #[test]
    fn pipeline_is_bitwise_deterministic() {
        let clip = tone(1.7, 44100, 523.25);
        let a = features_from_clip(&clip).unwrap();
        let b = features_from_clip(&clip).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reflect_index_matches_mirror_convention() {
        // For n = 5: ..., x3, x2, x1 | x0 x1 x2 x3 x4 | x3, x2, ...
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(8, 5), 0);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-7, 1), 0);
    }
}
