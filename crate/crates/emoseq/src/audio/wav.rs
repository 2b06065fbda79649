//! Minimal RIFF/WAVE reader and writer.
//!
//! Reads PCM-16 and IEEE-float (32/64-bit) files with 1 or 2 channels,
//! including WAVE_FORMAT_EXTENSIBLE wrappers of those encodings. Writes
//! mono PCM-16, which is all the synthetic generator needs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{AudioClip, AudioError};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Load a RIFF/WAVE file as a mono clip.
///
/// Stereo channels are averaged; PCM-16 samples are scaled to [-1, 1] by
/// division by 32768.
pub fn load_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let bytes = std::fs::read(path).map_err(|e| AudioError::Io(path.display().to_string(), e))?;
    parse_wav(&bytes)
}

pub(crate) fn parse_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedWav("missing RIFF/WAVE header".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| AudioError::MalformedWav("chunk size exceeds file length".into()))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => fmt = Some(FmtChunk::parse(body)?),
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| AudioError::MalformedWav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedWav("missing data chunk".into()))?;

    if fmt.channels == 0 || fmt.channels > 2 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{} channels (only mono and stereo are supported)",
            fmt.channels
        )));
    }
    let bytes_per_sample = match (fmt.format, fmt.bits_per_sample) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_IEEE_FLOAT, 32) => 4,
        (FORMAT_IEEE_FLOAT, 64) => 8,
        (FORMAT_PCM, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!("{bits}-bit PCM")));
        }
        (FORMAT_IEEE_FLOAT, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!("{bits}-bit float")));
        }
        (code, _) => {
            return Err(AudioError::UnsupportedEncoding(format!("format code {code:#06x}")));
        }
    };

    let frame_size = bytes_per_sample * fmt.channels as usize;
    let n_frames = data.len() / frame_size;
    if n_frames == 0 {
        return Err(AudioError::EmptyAudio);
    }

    let mut samples = Vec::with_capacity(n_frames);
    for frame in 0..n_frames {
        let mut acc = 0.0f64;
        for ch in 0..fmt.channels as usize {
            let off = frame * frame_size + ch * bytes_per_sample;
            let v = match bytes_per_sample {
                2 => i16::from_le_bytes(data[off..off + 2].try_into().unwrap()) as f64 / 32768.0,
                4 => f32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(data[off..off + 8].try_into().unwrap()),
            };
            acc += v;
        }
        samples.push(acc / fmt.channels as f64);
    }

    if samples.iter().any(|v| !v.is_finite()) {
        return Err(AudioError::NonFiniteInput);
    }

    Ok(AudioClip { samples, sample_rate_hz: fmt.sample_rate })
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

impl FmtChunk {
    fn parse(body: &[u8]) -> Result<Self, AudioError> {
        if body.len() < 16 {
            return Err(AudioError::MalformedWav("fmt chunk too short".into()));
        }
        let mut format = u16::from_le_bytes(body[0..2].try_into().unwrap());
        let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
        let sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
        let bits_per_sample = u16::from_le_bytes(body[14..16].try_into().unwrap());
        if format == FORMAT_EXTENSIBLE {
            // The real format code is the first u16 of the sub-format GUID.
            if body.len() < 26 {
                return Err(AudioError::MalformedWav("extensible fmt chunk too short".into()));
            }
            format = u16::from_le_bytes(body[24..26].try_into().unwrap());
        }
        if sample_rate == 0 {
            return Err(AudioError::MalformedWav("zero sample rate".into()));
        }
        Ok(Self { format, channels, sample_rate, bits_per_sample })
    }
}

/// Write a mono PCM-16 WAV file. Samples are clamped to [-1, 1].
pub fn write_wav_mono16(path: &Path, samples: &[f64], sample_rate_hz: u32) -> Result<(), AudioError> {
    let mut w = BufWriter::new(
        File::create(path).map_err(|e| AudioError::Io(path.display().to_string(), e))?,
    );
    let data_len = samples.len() * 2;
    let io = |e| AudioError::Io(path.display().to_string(), e);

    w.write_all(b"RIFF").map_err(io)?;
    w.write_all(&(36 + data_len as u32).to_le_bytes()).map_err(io)?;
    w.write_all(b"WAVE").map_err(io)?;
    w.write_all(b"fmt ").map_err(io)?;
    w.write_all(&16u32.to_le_bytes()).map_err(io)?;
    w.write_all(&FORMAT_PCM.to_le_bytes()).map_err(io)?;
    w.write_all(&1u16.to_le_bytes()).map_err(io)?;
    w.write_all(&sample_rate_hz.to_le_bytes()).map_err(io)?;
    w.write_all(&(sample_rate_hz * 2).to_le_bytes()).map_err(io)?;
    w.write_all(&2u16.to_le_bytes()).map_err(io)?;
    w.write_all(&16u16.to_le_bytes()).map_err(io)?;
    w.write_all(b"data").map_err(io)?;
    w.write_all(&(data_len as u32).to_le_bytes()).map_err(io)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}
