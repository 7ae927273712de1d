use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::ImageGray;
use crate::error::{Error, Result};

/// Writes a binary PGM (P5, maxval 255). Pixels map [-1,1] -> [0,255] by
/// `round((v + 1) * 127.5)`. The single comment line records the generator
/// seed so a saved dataset carries its provenance.
pub fn save_pgm(img: &ImageGray, path: &Path, seed: u64) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(
        w,
        "P5\n# litediff seed={seed}\n{} {}\n255\n",
        img.width(),
        img.height()
    )?;
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PGM written by [`save_pgm`] (or any P5 with maxval 255).
/// Returns the image and the seed recorded in the comment (0 when absent).
pub fn load_pgm(path: &Path) -> Result<(ImageGray, u64)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut seed = 0u64;

    let next_token = |bytes: &[u8], pos: &mut usize, seed: &mut u64| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                let start = *pos;
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                let comment = String::from_utf8_lossy(&bytes[start..*pos]);
                if let Some(v) = comment.split("seed=").nth(1) {
                    if let Ok(s) = v.trim().parse() {
                        *seed = s;
                    }
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Pgm("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&bytes, &mut pos, &mut seed)?;
    if magic != "P5" {
        return Err(Error::Pgm(format!("bad magic `{magic}`, expected P5")));
    }
    let width: usize = next_token(&bytes, &mut pos, &mut seed)?
        .parse()
        .map_err(|_| Error::Pgm("bad width".into()))?;
    let height: usize = next_token(&bytes, &mut pos, &mut seed)?
        .parse()
        .map_err(|_| Error::Pgm("bad height".into()))?;
    let maxval: usize = next_token(&bytes, &mut pos, &mut seed)?
        .parse()
        .map_err(|_| Error::Pgm("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Pgm(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header from payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Pgm("missing payload separator".into()));
    }
    pos += 1;
    let expect = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expect {
        return Err(Error::Pgm(format!(
            "truncated payload: need {expect} bytes, have {}",
            payload.len()
        )));
    }
    let pixels = payload[..expect]
        .iter()
        .map(|&b| b as f64 / 127.5 - 1.0)
        .collect();
    Ok((ImageGray::new(width, height, pixels)?, seed))
}
