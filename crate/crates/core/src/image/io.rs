use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

/// Loads a PNG (8- or 16-bit, gray or RGB; alpha is dropped) or a PFM file.
/// Integer samples are scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("pfm") => load_pfm(path),
        Some("png") => load_png(path),
        _ => Err(Error::format(path, "expected a .png or .pfm file")),
    }
}

/// Writes `.pfm` bit-exactly (as f32) or `.png` as 8-bit after clamping to `[0, 1]`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !img.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "refusing to save non-finite image to {}",
            path.display()
        )));
    }
    match extension(path).as_deref() {
        Some("pfm") => save_pfm(img, path),
        Some("png") => save_png(img, path),
        _ => Err(Error::format(path, "expected a .png or .pfm file")),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported bit depth {other:?}"),
            ))
        }
    };
    let data = samples
        .chunks_exact(src_channels)
        .flat_map(|px| px[..keep].iter().copied())
        .collect();
    Image::from_vec(w, h, keep, data)
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::InvalidArgument(format!(
                "png output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        img.width() as u32,
        img.height() as u32,
    );
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .finish()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Little-endian PFM. Samples are stored as f32, so values already representable
/// in f32 round-trip exactly.
pub fn save_pfm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::InvalidArgument(format!(
                "pfm output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let row_len = img.width() * img.channels();
    let mut body = Vec::with_capacity(img.len() * 4 + 32);
    write!(body, "{tag}\n{} {}\n-1.0\n", img.width(), img.height()).expect("write to vec");
    // rows are stored bottom-to-top
    for row in img.data().chunks(row_len.max(1)).rev() {
        for &v in row {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&body).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(t)
    };
    let channels = match token()?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format(path, format!("bad magic {other:?}"))),
    };
    let parse_dim = |t: String| {
        t.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad dimension {t:?}")))
    };
    let w = parse_dim(token()?)?;
    let h = parse_dim(token()?)?;
    let scale_tok = token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::format(path, format!("bad scale {scale_tok:?}")))?;
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let little = scale < 0.0;
    let n = w * h * channels;
    let raster = bytes
        .get(pos..pos + 4 * n)
        .ok_or_else(|| Error::format(path, "truncated raster"))?;
    let row_len = w * channels;
    let mut data = vec![0.0; n];
    for (i, b) in raster.chunks_exact(4).enumerate() {
        let b = [b[0], b[1], b[2], b[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, col) = (i / row_len, i % row_len);
        data[(h - 1 - row) * row_len + col] = v as f64;
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite samples"));
    }
    Image::from_vec(w, h, channels, data)
}
