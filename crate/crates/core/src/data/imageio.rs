//! Minimal PFM (float RGB) and binary PPM (8-bit RGB) codecs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Split off `count` whitespace-separated header tokens (skipping `#`
/// comments) and return them with the offset just past the single whitespace
/// byte that ends the last token.
fn header_tokens<'a>(bytes: &'a [u8], count: usize, fmt: &'static str) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(fmt, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::format(fmt, "header is not ASCII"))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(Error::format(fmt, "missing pixel data"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, fmt: &'static str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(fmt, format!("bad image dimension `{}`", tok))),
    }
}

fn check_rgb(img: &Tensor<f32>) -> Result<(usize, usize)> {
    let [c, h, w] = img.dims3()?;
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "image write",
            detail: format!("expected 3 channels, got {}", c),
        });
    }
    Ok((h, w))
}

/// Encode a `(3, H, W)` image as little-endian PFM, rows bottom to top.
pub fn encode_pfm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    let mut out = format!("PF\n{} {}\n-1.0\n", w, h).into_bytes();
    out.reserve(12 * h * w);
    let data = img.data();
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                out.extend_from_slice(&data[(c * h + y) * w + x].to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Decode a colour PFM; a positive scale marks big-endian samples.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    const FMT: &str = "PFM";
    let (tok, offset) = header_tokens(bytes, 4, FMT)?;
    match tok[0] {
        "PF" => {}
        "Pf" => return Err(Error::format(FMT, "greyscale PFM is not supported")),
        other => return Err(Error::format(FMT, format!("bad magic `{}`", other))),
    }
    let w = parse_dim(tok[1], FMT)?;
    let h = parse_dim(tok[2], FMT)?;
    let scale: f32 = tok[3]
        .parse()
        .map_err(|_| Error::format(FMT, format!("bad scale `{}`", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(FMT, "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let payload = &bytes[offset..];
    let expected = 12 * h * w;
    if payload.len() != expected {
        return Err(Error::format(
            FMT,
            format!("expected {} bytes of pixel data, found {}", expected, payload.len()),
        ));
    }
    let mut data = vec![0f32; 3 * h * w];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("chunk of four");
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (pixel, c) = (i / 3, i % 3);
        let (row, x) = (pixel / w, pixel % w);
        let y = h - 1 - row;
        data[(c * h + y) * w + x] = v;
    }
    Tensor::new([3, h, w], data)
}

/// Encode a `(3, H, W)` image with values in `[0, 1]` as binary PPM.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("PPM samples must lie in [0, 1]".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    out.reserve(3 * h * w);
    let data = img.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((data[(c * h + y) * w + x] * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Decode an 8-bit binary PPM to `(3, H, W)` values `code / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    const FMT: &str = "PPM";
    let (tok, offset) = header_tokens(bytes, 4, FMT)?;
    if tok[0] != "P6" {
        return Err(Error::format(
            FMT,
            format!("only binary P6 is supported, got `{}`", tok[0]),
        ));
    }
    let w = parse_dim(tok[1], FMT)?;
    let h = parse_dim(tok[2], FMT)?;
    if tok[3] != "255" {
        return Err(Error::format(
            FMT,
            format!("only maxval 255 is supported, got `{}`", tok[3]),
        ));
    }
    let payload = &bytes[offset..];
    if payload.len() != 3 * h * w {
        return Err(Error::format(
            FMT,
            format!("expected {} bytes of pixel data, found {}", 3 * h * w, payload.len()),
        ));
    }
    let mut data = vec![0f32; 3 * h * w];
    for (i, &b) in payload.iter().enumerate() {
        let (pixel, c) = (i / 3, i % 3);
        data[c * h * w + pixel] = b as f32 / 255.0;
    }
    Tensor::new([3, h, w], data)
}

pub fn write_pfm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pfm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    decode_pfm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Read a `.pfm` or `.ppm` file, chosen by extension.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("pfm") => read_pfm(path),
        Some("ppm") => read_ppm(path),
        _ => Err(Error::format(
            "image",
            format!("unsupported file type: {}", path.display()),
        )),
    }
}
