//! Binary PPM/PGM image files and atomic file writes.
//!
//! The P6/P5 subset here is deliberately narrow: 8-bit, maxval 255, binary
//! payload, optional `#` comments in the header. That is everything this
//! project writes and therefore everything it needs to read back.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{CoreError, Result};

/// Write `bytes` to `path` through a same-directory temp file and a rename,
/// so a crash never leaves a half-written file under the final name.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| CoreError::InvalidArgument(format!("no file name in {path:?}")))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_pnm(magic: &str, w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

/// Interleaved 8-bit RGB, row-major.
pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * w * h {
        return Err(CoreError::InvalidArgument(format!(
            "ppm payload: expected {} bytes for {w}x{h}, got {}",
            3 * w * h,
            rgb.len()
        )));
    }
    Ok(encode_pnm("P6", w, h, rgb))
}

/// 8-bit grayscale, row-major.
pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != w * h {
        return Err(CoreError::InvalidArgument(format!(
            "pgm payload: expected {} bytes for {w}x{h}, got {}",
            w * h,
            gray.len()
        )));
    }
    Ok(encode_pnm("P5", w, h, gray))
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    atomic_write(path, &encode_ppm(w, h, rgb)?)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    atomic_write(path, &encode_pgm(w, h, gray)?)
}

struct PnmHeader {
    w: usize,
    h: usize,
    payload_at: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &str, what: &str) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(CoreError::Parse(format!("{what}: not a {magic} file")));
    }
    // Read three whitespace-separated integers (w, h, maxval), skipping
    // comment lines.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::Parse(format!("{what}: truncated {magic} header")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text
            .parse()
            .map_err(|e| CoreError::Parse(format!("{what}: {e}")))?;
    }
    if fields[2] != 255 {
        return Err(CoreError::Parse(format!(
            "{what}: unsupported maxval {} (only 255)",
            fields[2]
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(CoreError::Parse(format!("{what}: malformed {magic} header end")));
    }
    Ok(PnmHeader {
        w: fields[0],
        h: fields[1],
        payload_at: pos + 1,
    })
}

fn decode_pnm(bytes: &[u8], magic: &str, channels: usize, what: &str) -> Result<(usize, usize, Vec<u8>)> {
    let header = parse_pnm_header(bytes, magic, what)?;
    let need = channels * header.w * header.h;
    let payload = &bytes[header.payload_at..];
    if payload.len() != need {
        return Err(CoreError::Parse(format!(
            "{what}: payload is {} bytes, expected {need}",
            payload.len()
        )));
    }
    Ok((header.w, header.h, payload.to_vec()))
}

pub fn decode_ppm(bytes: &[u8], what: &str) -> Result<(usize, usize, Vec<u8>)> {
    decode_pnm(bytes, "P6", 3, what)
}

pub fn decode_pgm(bytes: &[u8], what: &str) -> Result<(usize, usize, Vec<u8>)> {
    decode_pnm(bytes, "P5", 1, what)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_pgm(&bytes, &path.display().to_string())
}
