//! 8-bit RGB image files: binary PPM (P6) and PNG.
//!
//! Loading maps each byte `b` to `b / 255`; saving writes `round(255 · v)`
//! after clamping to `[0, 1]`, so load followed by save is byte-exact.

use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// Format implied by a file extension (`.ppm` or `.png`, any case).
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("ppm") => Ok(ImageFormat::Ppm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::Image(format!(
                "{}: unsupported extension (expected .png or .ppm)",
                path.display()
            ))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

/// `[3, h, w]` tensor from interleaved RGB bytes.
pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Tensor> {
    if width == 0 || height == 0 || bytes.len() != 3 * width * height {
        return Err(Error::Image(format!(
            "{} bytes do not describe a {width}x{height} RGB image",
            bytes.len()
        )));
    }
    let plane = width * height;
    Ok(Tensor::from_fn(&[3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        f64::from(bytes[3 * p + c]) / 255.0
    }))
}

/// Interleaved RGB bytes of a `[3, h, w]` tensor, with `(width, height)`.
pub fn to_rgb8(img: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::Image(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let data = img.data();
    let mut out = vec![0u8; 3 * plane];
    for (i, byte) in out.iter_mut().enumerate() {
        let (p, ch) = (i / 3, i % 3);
        let v = data[ch * plane + p];
        if v.is_nan() {
            return Err(Error::Image("NaN pixel value".into()));
        }
        *byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    Ok((w, h, out))
}

/// Rounds every value to the nearest 8-bit level, as a save and reload would.
pub fn quantize_8bit(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Image(format!("bad PPM {what}")))
}

/// Decodes a binary PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::Image("not a binary PPM (P6)".into()));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Image(format!(
            "only 8-bit PPM is supported, maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Image("truncated PPM header".into()));
    }
    from_rgb8(width, height, &bytes[pos + 1..])
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (w, h, raster) = to_rgb8(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(raster);
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("PNG decode: {e}")))?;
    match img {
        image::DynamicImage::ImageRgb8(buf) => {
            from_rgb8(buf.width() as usize, buf.height() as usize, buf.as_raw())
        }
        other => Err(Error::Image(format!(
            "only 8-bit RGB PNG is supported, got {:?}",
            other.color()
        ))),
    }
}

pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let (w, h, raster) = to_rgb8(img)?;
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raster)
        .ok_or_else(|| Error::Image("raster size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("PNG encode: {e}")))?;
    Ok(out.into_inner())
}

/// Decodes PNG or PPM, recognised by content rather than extension.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, ImageFormat)> {
    if bytes.starts_with(PNG_SIGNATURE) {
        Ok((decode_png(bytes)?, ImageFormat::Png))
    } else if bytes.starts_with(b"P6") {
        Ok((decode_ppm(bytes)?, ImageFormat::Ppm))
    } else {
        Err(Error::Image(
            "unrecognised image format (expected PNG or binary PPM)".into(),
        ))
    }
}

pub fn encode(img: &Tensor, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Ppm => encode_ppm(img),
        ImageFormat::Png => encode_png(img),
    }
}

/// Loads an image and reports the format it was stored in.
pub fn load_image(path: impl AsRef<Path>) -> Result<(Tensor, ImageFormat)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Saves in the format given by the file extension.
pub fn save_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(img, ImageFormat::from_path(path)?)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
