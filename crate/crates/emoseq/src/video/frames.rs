//! Frame-sequence ingestion: EMSF binary files and directories of P5 PGMs.
//!
//! EMSF layout (integers little-endian):
//! magic `EMSF` | version `u16` | T `u32` | H `u16` | W `u16` | C `u8` |
//! T*H*W*C raw bytes. C is 1 (grayscale) or 3 (RGB, converted to grayscale
//! on load).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{FrameSequence, VideoError};

pub const EMSF_MAGIC: &[u8; 4] = b"EMSF";
pub const EMSF_VERSION: u16 = 1;

/// Load frames from either one EMSF file or a directory of binary PGMs
/// (sorted lexicographically by file name).
pub fn load_frames(path: &Path) -> Result<FrameSequence, VideoError> {
    let meta = std::fs::metadata(path).map_err(|e| VideoError::Io(path.display().to_string(), e))?;
    if meta.is_dir() {
        load_pgm_dir(path)
    } else {
        let bytes =
            std::fs::read(path).map_err(|e| VideoError::Io(path.display().to_string(), e))?;
        parse_emsf(&bytes)
    }
}

pub(crate) fn parse_emsf(bytes: &[u8]) -> Result<FrameSequence, VideoError> {
    if bytes.len() < 15 || &bytes[0..4] != EMSF_MAGIC {
        return Err(VideoError::MalformedImage("missing EMSF header".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != EMSF_VERSION {
        return Err(VideoError::MalformedImage(format!("unsupported EMSF version {version}")));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(bytes[10..12].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    let c = bytes[14] as usize;
    if t == 0 {
        return Err(VideoError::NoFrames);
    }
    if !(c == 1 || c == 3) || h == 0 || w == 0 {
        return Err(VideoError::MalformedImage(format!("bad EMSF dims {t}x{h}x{w}x{c}")));
    }
    let body = &bytes[15..];
    let expected = t * h * w * c;
    if body.len() != expected {
        return Err(VideoError::MalformedImage(format!(
            "EMSF payload is {} bytes, expected {expected}",
            body.len()
        )));
    }
    let pixels = if c == 1 {
        body.to_vec()
    } else {
        body.chunks_exact(3).map(|rgb| luma(rgb[0], rgb[1], rgb[2])).collect()
    };
    Ok(FrameSequence { pixels, t, h, w })
}

/// Write a grayscale EMSF file.
pub fn write_emsf(path: &Path, seq: &FrameSequence) -> Result<(), VideoError> {
    let io = |e| VideoError::Io(path.display().to_string(), e);
    let mut out =
        BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(EMSF_MAGIC).map_err(io)?;
    out.write_all(&EMSF_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(seq.t as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&(seq.h as u16).to_le_bytes()).map_err(io)?;
    out.write_all(&(seq.w as u16).to_le_bytes()).map_err(io)?;
    out.write_all(&[1u8]).map_err(io)?;
    out.write_all(&seq.pixels).map_err(io)?;
    out.flush().map_err(io)?;
    Ok(())
}

/// ITU-R 601 luma, rounded to the nearest integer.
pub(crate) fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
}

fn load_pgm_dir(dir: &Path) -> Result<FrameSequence, VideoError> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| VideoError::Io(dir.display().to_string(), e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_file())
        .map(|entry| entry.file_name())
        .collect();
    names.sort();

    let mut pixels = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut t = 0usize;
    for name in names {
        let path = dir.join(&name);
        let bytes =
            std::fs::read(&path).map_err(|e| VideoError::Io(path.display().to_string(), e))?;
        let (w, h, data) = parse_pgm(&bytes)
            .map_err(|msg| VideoError::MalformedImage(format!("{}: {msg}", path.display())))?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => return Err(VideoError::InconsistentDimensions),
            _ => {}
        }
        pixels.extend_from_slice(data);
        t += 1;
    }
    match dims {
        None => Err(VideoError::NoFrames),
        Some((h, w)) => Ok(FrameSequence { pixels, t, h, w }),
    }
}

/// Parse a binary (P5) PGM with maxval <= 255. Returns (width, height, data).
fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, &[u8]), String> {
    let mut pos = 0usize;
    let magic = pgm_token(bytes, &mut pos).ok_or("truncated header")?;
    if magic != b"P5" {
        return Err("not a P5 PGM".into());
    }
    let parse = |tok: &[u8]| -> Result<usize, String> {
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| "bad header number".into())
    };
    let w = parse(pgm_token(bytes, &mut pos).ok_or("missing width")?)?;
    let h = parse(pgm_token(bytes, &mut pos).ok_or("missing height")?)?;
    let maxval = parse(pgm_token(bytes, &mut pos).ok_or("missing maxval")?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("zero image dimension".into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or("truncated raster")?;
    Ok((w, h, data))
}

/// Next whitespace-delimited token, skipping `#` comments.
fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

/// Write a binary PGM (test and tooling helper).
pub fn write_pgm(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<(), VideoError> {
    debug_assert_eq!(data.len(), w * h);
    let io = |e| VideoError::Io(path.display().to_string(), e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    write!(out, "P5\n{w} {h}\n255\n").map_err(io)?;
    out.write_all(data).map_err(io)?;
    out.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_directory_loads_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        // Written out of order; names sort as frame_00, frame_01, frame_02.
        for (name, fill) in [("frame_02.pgm", 30u8), ("frame_00.pgm", 10), ("frame_01.pgm", 20)] {
            write_pgm(&dir.path().join(name), 4, 4, &[fill; 16]).unwrap();
        }
        let seq = load_frames(dir.path()).unwrap();
        assert_eq!(seq.t, 3);
        assert_eq!((seq.h, seq.w), (4, 4));
        assert_eq!(seq.pixels[0], 10);
        assert_eq!(seq.pixels[16], 20);
        assert_eq!(seq.pixels[32], 30);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# a comment\n3 2\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let (w, h, data) = parse_pgm(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(data, &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join("a.pgm"), 4, 4, &[0; 16]).unwrap();
        write_pgm(&dir.path().join("b.pgm"), 2, 2, &[0; 4]).unwrap();
        assert!(matches!(load_frames(dir.path()), Err(VideoError::InconsistentDimensions)));
    }

    #[test]
    fn empty_directory_has_no_frames() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_frames(dir.path()), Err(VideoError::NoFrames)));
    }

    #[test]
    fn gray_rgb_luma_is_identity() {
        assert_eq!(luma(100, 100, 100), 100);
        assert_eq!(luma(0, 0, 0), 0);
        assert_eq!(luma(255, 255, 255), 255);
    }

    #[test]
    fn emsf_rgb_converts_to_grayscale() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(EMSF_MAGIC);
        bytes.extend_from_slice(&EMSF_VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.push(3);
        bytes.extend_from_slice(&[100, 100, 100, 255, 0, 0]);
        let seq = parse_emsf(&bytes).unwrap();
        assert_eq!(seq.pixels, vec![100, luma(255, 0, 0)]);
    }

    #[test]
    fn emsf_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.emsf");
        let seq = FrameSequence { pixels: (0..=255).cycle().take(3 * 8 * 8).collect(), t: 3, h: 8, w: 8 };
        write_emsf(&path, &seq).unwrap();
        let back = load_frames(&path).unwrap();
        assert_eq!(back.pixels, seq.pixels);
        assert_eq!((back.t, back.h, back.w), (3, 8, 8));
    }

    #[test]
    fn truncated_emsf_is_malformed() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(EMSF_MAGIC);
        bytes.extend_from_slice(&EMSF_VERSION.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.push(1);
        bytes.extend_from_slice(&[0; 10]); // needs 32
        assert!(matches!(parse_emsf(&bytes), Err(VideoError::MalformedImage(_))));
    }
}
