//! Unit-interval rasters and Netpbm I/O.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::kernels::{resize_hwc, EdgeMode};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed netpbm file ({reason})")]
    Format { path: String, reason: String },
    #[error("raster extents {height}x{width}x{channels} do not match {len} samples")]
    Extents {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
}

/// Channel semantics of a raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    Gray,
    Rgb,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Gray => 1,
            Channels::Rgb => 3,
        }
    }
}

/// `H × W × C` raster of intensities in `[0, 1]`, row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRaster {
    height: usize,
    width: usize,
    channels: Channels,
    data: Vec<f32>,
}

impl ImageRaster {
    pub fn new(height: usize, width: usize, channels: Channels, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || data.len() != height * width * channels.count() {
            return Err(ImageError::Extents {
                height,
                width,
                channels: channels.count(),
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: Channels, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels.count()],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: Channels, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let c = channels.count();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.count()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels.count() + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        let c = self.channels.count();
        self.data[(y * self.width + x) * c + ch] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let c = self.channels.count();
        &self.data[(y * self.width + x) * c..][..c]
    }

    /// Luma (`0.299 R + 0.587 G + 0.114 B`) in 64-bit, row-major.
    pub fn to_gray_f64(&self) -> Vec<f64> {
        match self.channels {
            Channels::Gray => self.data.iter().map(|&v| v as f64).collect(),
            Channels::Rgb => self
                .data
                .chunks(3)
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect(),
        }
    }

    pub fn to_gray(&self) -> ImageRaster {
        let data = self.to_gray_f64().into_iter().map(|v| v as f32).collect();
        ImageRaster {
            height: self.height,
            width: self.width,
            channels: Channels::Gray,
            data,
        }
    }

    pub fn to_rgb(&self) -> ImageRaster {
        match self.channels {
            Channels::Rgb => self.clone(),
            Channels::Gray => ImageRaster {
                height: self.height,
                width: self.width,
                channels: Channels::Rgb,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
        }
    }

    /// Pixel-center aligned bilinear resize with border clamping.
    pub fn resize(&self, out_h: usize, out_w: usize) -> ImageRaster {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let data = resize_hwc(
            &self.data,
            self.height,
            self.width,
            self.channels.count(),
            out_h,
            out_w,
            EdgeMode::Clamp,
        );
        ImageRaster {
            height: out_h,
            width: out_w,
            channels: self.channels,
            data,
        }
    }

    /// Sub-raster `[y0, y0 + h) × [x0, x0 + w)`; panics if out of bounds.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageRaster {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside raster");
        let c = self.channels.count();
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[(y * self.width + x0) * c..(y * self.width + x0 + w) * c]);
        }
        ImageRaster {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    pub fn quantize_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// P6 for RGB rasters, P5 for gray ones; 8-bit.
    pub fn to_netpbm(&self) -> Vec<u8> {
        let magic = match self.channels {
            Channels::Rgb => "P6",
            Channels::Gray => "P5",
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.quantize_u8());
        out
    }

    pub fn write_netpbm(&self, path: &Path) -> Result<(), ImageError> {
        write_atomic(path, &self.to_netpbm()).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_netpbm(path: &Path) -> Result<ImageRaster, ImageError> {
        let bytes = fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_netpbm(&bytes).map_err(|reason| ImageError::Format {
            path: path.display().to_string(),
            reason,
        })
    }

    pub fn parse_netpbm(bytes: &[u8]) -> Result<ImageRaster, String> {
        let mut pos = 0;
        let mut token = || -> Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let channels = match magic.as_str() {
            "P6" => Channels::Rgb,
            "P5" => Channels::Gray,
            other => return Err(format!("unsupported magic {other:?}")),
        };
        let parse = |s: String| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
        let width = parse(token()?)?;
        let height = parse(token()?)?;
        let maxval = parse(token()?)?;
        if maxval != 255 {
            return Err(format!("only 8-bit rasters are supported (maxval {maxval})"));
        }
        // exactly one whitespace byte separates the header from the samples
        let body = &bytes[pos + 1..];
        let n = width * height * channels.count();
        if body.len() < n {
            return Err(format!("expected {n} samples, found {}", body.len()));
        }
        let data = body[..n].iter().map(|&b| b as f32 / 255.0).collect();
        ImageRaster::new(height, width, channels, data).map_err(|e| e.to_string())
    }
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netpbm_round_trip_is_exact_for_quantized_values() {
        let img = ImageRaster::from_fn(3, 5, Channels::Rgb, |y, x, c| ((y * 31 + x * 7 + c * 3) % 256) as f32 / 255.0);
        let back = ImageRaster::parse_netpbm(&img.to_netpbm()).unwrap();
        assert_eq!(back, img);
        let gray = img.to_gray();
        let back = ImageRaster::parse_netpbm(&gray.to_netpbm()).unwrap();
        assert_eq!(back.quantize_u8(), gray.quantize_u8());
    }

    #[test]
    fn resize_to_same_extents_is_copy() {
        let img = ImageRaster::from_fn(4, 4, Channels::Gray, |y, x, _| (y * 4 + x) as f32 / 16.0);
        assert_eq!(img.resize(4, 4), img);
    }

    #[test]
    fn rejects_bad_header() {
        assert!(ImageRaster::parse_netpbm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(ImageRaster::parse_netpbm(b"P6\n2 2\n255\n\x00").is_err());
    }
}
