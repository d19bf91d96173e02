//! Binary netpbm images: P5 (gray) and P6 (RGB) with 8-bit samples.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use asvit_core::Tensor;

/// Reads a P5 or P6 file into a `[3, h, w]` tensor scaled to `[-1, 1]`.
/// Gray images are replicated over the three channels.
pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pnm(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(start < pos, "truncated header");
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => bail!("unsupported netpbm magic {other}"),
    };
    let w: usize = fields[1].parse()?;
    let h: usize = fields[2].parse()?;
    let maxval: usize = fields[3].parse()?;
    ensure!((1..=255).contains(&maxval), "only 8-bit samples are supported");
    let body = bytes.get(pos..pos + w * h * channels).context("truncated pixel data")?;
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if channels == 1 { p } else { p * 3 + c };
            data[c * plane + p] = body[src] as f32 / maxval as f32 * 2.0 - 1.0;
        }
    }
    Ok(Tensor::new([3, h, w], data)?)
}

/// P6 encoding of a `[3, h, w]` image in `[-1, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = hw(image)?;
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(image.data()[c * plane + p]));
        }
    }
    Ok(out)
}

/// Luma of a `[3, h, w]` image in `[-1, 1]`, mapped to `[0, 1]`.
pub fn luma(image: &Tensor<f32>) -> Result<Vec<f32>> {
    let (h, w) = hw(image)?;
    let plane = h * w;
    let d = image.data();
    Ok((0..plane)
        .map(|p| {
            let y = 0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p];
            ((y + 1.0) / 2.0).clamp(0.0, 1.0)
        })
        .collect())
}

/// P5 encoding of `[0, 1]` intensities, each pixel blown up to a
/// `scale × scale` block.
pub fn encode_pgm(gray: &[f32], h: usize, w: usize, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let mut out = format!("P5\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    for y in 0..h * scale {
        for x in 0..w * scale {
            out.push((gray[(y / scale) * w + x / scale] * 255.0).round() as u8);
        }
    }
    out
}

fn hw(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => bail!("expected a [3, h, w] image, got {s:?}"),
    }
}

fn to_byte(v: f32) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}
