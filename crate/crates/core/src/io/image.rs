//! PPM (P6, 8-bit) and PFM (float32) images.

use crate::error::{Error, Result};
use crate::renderer::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Pfm,
}

impl ImageFormat {
    /// Picks the format from a file extension (`ppm` or `pfm`).
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("ppm") => Ok(ImageFormat::Ppm),
            Some("pfm") => Ok(ImageFormat::Pfm),
            _ => Err(Error::ImageFormat {
                offset: 0,
                message: format!("unknown image extension in `{}`", path.display()),
            }),
        }
    }
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::ImageFormat {
        offset,
        message: message.into(),
    }
}

/// Header tokenizer shared by both formats. Tracks the byte offset.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self, comments: bool) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if comments && b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, comments: bool) -> Result<(usize, &'a str)> {
        self.skip_space(comments);
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(fmt_err(start, "unexpected end of header"));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| fmt_err(start, "header is not ASCII"))?;
        Ok((start, s))
    }

    /// Parses the next token; returns it with its byte offset.
    fn number<T: std::str::FromStr>(&mut self, comments: bool, what: &str) -> Result<(usize, T)> {
        let (at, s) = self.token(comments)?;
        let v = s
            .parse()
            .map_err(|_| fmt_err(at, format!("invalid {what} `{s}`")))?;
        Ok((at, v))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(fmt_err(
                self.pos,
                "header must end with one whitespace byte",
            )),
        }
    }
}

fn dims(h: &mut Header, comments: bool) -> Result<(u32, u32)> {
    let (at, w): (usize, u32) = h.number(comments, "width")?;
    let (_, hh): (usize, u32) = h.number(comments, "height")?;
    if w == 0 || hh == 0 {
        return Err(fmt_err(at, "image size must be positive"));
    }
    Ok((w, hh))
}

fn payload(bytes: &[u8], start: usize, need: usize) -> Result<&[u8]> {
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(fmt_err(
            bytes.len(),
            format!("pixel data truncated: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(fmt_err(
            start + need,
            format!("{} trailing bytes after pixel data", have - need),
        ));
    }
    Ok(&bytes[start..])
}

/// 8-bit quantization: clamp to [0, 1], scale by 255, round half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn read_ppm(bytes: &[u8]) -> Result<Image> {
    let mut h = Header { bytes, pos: 0 };
    let (_, magic) = h.token(true)?;
    if magic != "P6" {
        return Err(fmt_err(0, format!("expected `P6`, got `{magic}`")));
    }
    let (w, ht) = dims(&mut h, true)?;
    let (at, maxval): (usize, u32) = h.number(true, "maxval")?;
    if maxval != 255 {
        return Err(fmt_err(
            at,
            format!("maxval {maxval} unsupported (only 255)"),
        ));
    }
    let start = h.end()?;
    let n = 3 * w as usize * ht as usize;
    let data = payload(bytes, start, n)?;
    Image::from_data(w, ht, data.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

/// Reads `PF` (RGB) or `Pf` (gray, replicated to RGB) with either byte order.
pub fn read_pfm(bytes: &[u8]) -> Result<Image> {
    let mut h = Header { bytes, pos: 0 };
    let (_, magic) = h.token(false)?;
    let channels = match magic {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(fmt_err(0, format!("expected `PF` or `Pf`, got `{magic}`"))),
    };
    let (w, ht) = dims(&mut h, false)?;
    let (at, scale): (usize, f64) = h.number(false, "scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(fmt_err(at, "scale must be a non-zero number"));
    }
    let little = scale < 0.0;
    let start = h.end()?;
    let (w, hu) = (w as usize, ht as usize);
    let data = payload(bytes, start, 4 * channels * w * hu)?;
    let mut out = vec![0.0; 3 * w * hu];
    // rows are stored bottom to top
    for (r, row) in data.chunks_exact(4 * channels * w).enumerate() {
        let y = hu - 1 - r;
        for x in 0..w {
            for k in 0..3 {
                let c = if channels == 3 { k } else { 0 };
                let b: [u8; 4] = row[4 * (channels * x + c)..][..4]
                    .try_into()
                    .expect("4 bytes");
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                out[3 * (y * w + x) + k] = v as f64;
            }
        }
    }
    Image::from_data(w as u32, ht, out)
}

/// Little-endian RGB PFM. Values are stored as float32.
pub fn write_pfm(img: &Image) -> Vec<u8> {
    let (w, h) = (img.width as usize, img.height as usize);
    let mut out = format!("PF\n{} {}\n-1.0\n", w, h).into_bytes();
    out.reserve(12 * w * h);
    for y in (0..h).rev() {
        for v in &img.data[3 * y * w..3 * (y + 1) * w] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Detects the format from the magic bytes.
pub fn read_image(bytes: &[u8]) -> Result<Image> {
    match bytes.get(..2) {
        Some(b"P6") => read_ppm(bytes),
        Some(b"PF") | Some(b"Pf") => read_pfm(bytes),
        _ => Err(fmt_err(
            0,
            "unrecognized image magic (expected P6, PF or Pf)",
        )),
    }
}

pub fn write_image(img: &Image, format: ImageFormat) -> Vec<u8> {
    match format {
        ImageFormat::Ppm => write_ppm(img),
        ImageFormat::Pfm => write_pfm(img),
    }
}
