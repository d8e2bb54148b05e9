use super::MetricsError;
use crate::image::ImageRaster;

/// Row-major 64-bit luma raster used by every metric.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "gray raster extents");
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn from_raster(img: &ImageRaster) -> Self {
        Self::new(img.height(), img.width(), img.to_gray_f64())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Value at a signed position with border replication.
    #[inline]
    pub fn clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// 2×2 mean followed by decimation; odd trailing rows/columns drop.
    pub fn downsample2(&self) -> GrayImage {
        let (h, w) = (self.height / 2, self.width / 2);
        GrayImage::from_fn(h, w, |y, x| {
            let (y, x) = (2 * y, 2 * x);
            0.25 * (self.get(y, x) + self.get(y, x + 1) + self.get(y + 1, x) + self.get(y + 1, x + 1))
        })
    }

    pub fn variance(&self) -> f64 {
        let n = self.data.len().max(1) as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }

    pub(crate) fn same_extents(&self, other: &GrayImage) -> Result<(), MetricsError> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(MetricsError::ExtentMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            });
        }
        Ok(())
    }
}
