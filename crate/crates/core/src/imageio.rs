//! 8-bit RGB image files: binary/ASCII PPM and PNG, chosen by extension.

use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::ply::quantize_u8;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "png" => Ok(ImageFormat::Png),
            Some(e) if e == "ppm" || e == "pnm" => Ok(ImageFormat::Ppm),
            _ => Err(Error::format(path, "unknown image extension (expected .png or .ppm)")),
        }
    }
}

pub fn read_image<T: Real>(path: impl AsRef<Path>) -> Result<ImageBuffer<T>> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, rgb) = match format {
        ImageFormat::Ppm => decode_ppm(path, &bytes)?,
        ImageFormat::Png => decode_png(path, &bytes)?,
    };
    Ok(from_bytes(w, h, &rgb))
}

pub fn write_image<T: Real>(img: &ImageBuffer<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Ppm => encode_ppm(img),
        ImageFormat::Png => encode_png(path, img)?,
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Channels as `v / 255`.
pub fn from_bytes<T: Real>(width: usize, height: usize, rgb: &[u8]) -> ImageBuffer<T> {
    ImageBuffer {
        width,
        height,
        data: rgb.iter().map(|&b| T::of(b as f64 / 255.0)).collect(),
    }
}

pub fn to_bytes<T: Real>(img: &ImageBuffer<T>) -> Vec<u8> {
    img.data.iter().map(|v| quantize_u8(v.f64())).collect()
}

pub fn encode_ppm<T: Real>(img: &ImageBuffer<T>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(to_bytes(img));
    out
}

/// Header tokens of a PNM file, skipping `#` comments.
struct PnmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmTokens<'a> {
    fn next(&mut self) -> Option<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            None
        } else {
            std::str::from_utf8(&self.bytes[start..self.pos]).ok()
        }
    }
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut t = PnmTokens { bytes, pos: 0 };
    let magic = t.next();
    let binary = match magic {
        Some("P6") => true,
        Some("P3") => false,
        _ => return Err(Error::format(path, "not a P6 or P3 PPM file")),
    };
    let mut num = |what: &str| -> Result<usize> {
        t.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad or missing {what} in PPM header")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported bit depth (maxval {maxval}, only 255 is supported)")));
    }
    let n = w * h * 3;
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = t.pos + 1;
        let data = bytes.get(start..start + n).ok_or(Error::UnexpectedEof {
            path: path.to_path_buf(),
            what: "PPM raster",
        })?;
        Ok((w, h, data.to_vec()))
    } else {
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v: u32 = t
                .next()
                .ok_or(Error::UnexpectedEof {
                    path: path.to_path_buf(),
                    what: "PPM raster",
                })?
                .parse()
                .map_err(|_| Error::format(path, "non-numeric PPM sample"))?;
            if v > 255 {
                return Err(Error::format(path, format!("sample {v} exceeds maxval")));
            }
            data.push(v as u8);
        }
        Ok((w, h, data))
    }
}

pub fn decode_png(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let fmt = |e: png::DecodingError| Error::format(path, format!("PNG decode failed: {e}"));
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(fmt)?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::format(path, format!("unsupported bit depth {:?} (only 8-bit PNG)", depth)));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match color {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette PNG")),
    };
    Ok((w, h, rgb))
}

pub fn encode_png<T: Real>(path: &Path, img: &ImageBuffer<T>) -> Result<Vec<u8>> {
    let fmt = |e: png::EncodingError| Error::format(path, format!("PNG encode failed: {e}"));
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(fmt)?;
        writer.write_image_data(&to_bytes(img)).map_err(fmt)?;
        writer.finish().map_err(fmt)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_values() {
        let bytes = b"P6\n# comment\n2 1\n255\n\xff\xff\xff\x80\x80\x80";
        let (w, h, d) = decode_ppm(Path::new("a.ppm"), bytes).unwrap();
        let img: ImageBuffer<f64> = from_bytes(w, h, &d);
        assert_eq!(img.pixel(0, 0), [1.0; 3]);
        assert!((img.pixel(1, 0)[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn ascii_ppm() {
        let (w, h, d) = decode_ppm(Path::new("a.ppm"), b"P3 1 1 255\n10 20 30\n").unwrap();
        assert_eq!((w, h, d), (1, 1, vec![10, 20, 30]));
    }

    #[test]
    fn sixteen_bit_ppm_rejected() {
        let e = decode_ppm(Path::new("a.ppm"), b"P6 1 1 65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(e.to_string().contains("bit depth"), "{e}");
    }

    #[test]
    fn truncated_ppm() {
        let e = decode_ppm(Path::new("a.ppm"), b"P6 2 2 255\n\0\0\0").unwrap_err();
        assert!(matches!(e, Error::UnexpectedEof { .. }));
    }

    #[test]
    fn png_round_trip_in_memory() {
        let img = ImageBuffer::<f64>::from_data(2, 1, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        let bytes = encode_png(Path::new("x.png"), &img).unwrap();
        let (w, h, d) = decode_png(Path::new("x.png"), &bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(d, to_bytes(&img));
    }

    #[test]
    fn unknown_extension() {
        assert!(ImageFormat::from_path(Path::new("a.jpg")).is_err());
        assert_eq!(ImageFormat::from_path(Path::new("a.PNG")).unwrap(), ImageFormat::Png);
    }
}
