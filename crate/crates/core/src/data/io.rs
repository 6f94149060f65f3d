//! 8-bit PNG and binary PPM/PGM reading and writing.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use super::image::ImageBuffer;
use crate::error::{Result, VarsrError};

/// Decoding failure at a byte offset of the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: usize,
    pub detail: String,
}

impl DecodeError {
    fn new(offset: usize, detail: impl Into<String>) -> Self {
        Self {
            offset,
            detail: detail.into(),
        }
    }

    fn at(self, path: &Path) -> VarsrError {
        VarsrError::Parse {
            path: path.to_path_buf(),
            offset: self.offset,
            detail: self.detail,
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, field: &str) -> std::result::Result<usize, DecodeError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            let what = if start >= self.bytes.len() { "missing" } else { "invalid" };
            return Err(DecodeError::new(start, format!("{what} {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DecodeError::new(start, format!("{field} out of range")))
    }
}

/// Parses a binary `P5` (grey) or `P6` (RGB) file with maxval ≤ 255.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<ImageBuffer, DecodeError> {
    if bytes.len() < 2 {
        return Err(DecodeError::new(bytes.len(), "missing magic"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(DecodeError::new(0, "magic must be P5 or P6")),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(DecodeError::new(maxval_at, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(DecodeError::new(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(DecodeError::new(r.pos, "missing separator before pixel data"));
    }
    let start = r.pos + 1;
    let need = width * height * channels;
    if bytes.len() - start < need {
        return Err(DecodeError::new(
            bytes.len(),
            format!("pixel data truncated: need {need} bytes, have {}", bytes.len() - start),
        ));
    }
    let scale = 1.0 / maxval as f32;
    let px = &bytes[start..start + need];
    let data = if channels == 3 {
        px.iter().map(|&b| b as f32 * scale).collect()
    } else {
        px.iter().flat_map(|&b| [b as f32 * scale; 3]).collect()
    };
    ImageBuffer::new(height, width, data).map_err(|e| DecodeError::new(start, e.to_string()))
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

/// Grey PGM of the channel mean.
pub fn encode_pgm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .chunks_exact(3)
            .map(|p| quantize((p[0] + p[1] + p[2]) / 3.0)),
    );
    out
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<ImageBuffer, DecodeError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let err = |e: png::DecodingError| DecodeError::new(0, e.to_string());
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| DecodeError::new(0, "png too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(DecodeError::new(0, "indexed png was not expanded"));
        }
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for p in row.chunks_exact(channels) {
            let rgb = if channels < 3 { [p[0]; 3] } else { [p[0], p[1], p[2]] };
            data.extend(rgb.iter().map(|&b| b as f32 / 255.0));
        }
    }
    ImageBuffer::new(h, w, data).map_err(|e| DecodeError::new(0, e.to_string()))
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let internal = |e: png::EncodingError| VarsrError::Internal(format!("png encode: {e}"));
        let mut writer = enc.write_header().map_err(internal)?;
        let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
        writer.write_image_data(&bytes).map_err(internal)?;
        writer.finish().map_err(internal)?;
    }
    Ok(out)
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Reads a PNG, PPM or PGM file, sniffing the format from its magic bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| VarsrError::io(path, e))?;
    let decoded = if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes)
    } else {
        decode_pnm(&bytes)
    };
    decoded.map_err(|e| e.at(path))
}

/// Writes by extension: `.ppm`, `.pgm`, anything else as PNG. Values are
/// clamped and rounded to 8 bits.
pub fn write_image(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("ppm") => encode_ppm(img),
        Some("pgm") => encode_pgm(img),
        _ => encode_png(img)?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| VarsrError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| VarsrError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_headers_name_the_missing_field() {
        assert_eq!(decode_pnm(b"P6").unwrap_err().detail, "missing width");
        assert_eq!(decode_pnm(b"P6\n4").unwrap_err().detail, "missing height");
        let e = decode_pnm(b"P6\n4 4\n").unwrap_err();
        assert_eq!(e.detail, "missing maxval");
        assert_eq!(e.offset, 7);
        assert!(decode_pnm(b"P7\n").unwrap_err().detail.contains("magic"));
    }

    #[test]
    fn truncated_pixels_report_offset() {
        let e = decode_pnm(b"P6 2 2 255\n\x00\x01").unwrap_err();
        assert!(e.detail.contains("truncated"));
        assert_eq!(e.offset, 13);
    }

    #[test]
    fn comments_and_grey_expand() {
        let img = decode_pnm(b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.pixel(0, 1), [1.0; 3]);
        assert_eq!(img.pixel(0, 0), [0.0; 3]);
    }
}
