//! 8-bit RGB raster with the handful of pixel operations the pipeline needs.

use std::path::Path;

use crate::{Error, Result};

/// H x W x 3 interleaved 8-bit RGB image, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{})", self.height, self.width)
    }
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!(
                "raster dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "raster buffer length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            data,
        })
    }

    /// Solid-colour raster.
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Raster {
            height,
            width,
            data,
        }
    }

    /// Build a raster by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Raster {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Decode an image file (PNG/JPEG) into an RGB raster.
    pub fn decode_file(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::BadImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Raster::new(h as usize, w as usize, rgb.into_raw())
    }

    /// Encode as PNG at `path`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("raster buffer matches dimensions");
        buf.save(path).map_err(|e| Error::BadImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Copy out a window; caller guarantees the window lies inside the raster.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Raster {
        debug_assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let start = ((top + y) * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Raster {
            height,
            width,
            data,
        }
    }

    /// Bilinear resize. Identical dimensions return an exact copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            // Pixel-centre mapping.
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let p00 = self.get(y0, x0);
                let p01 = self.get(y0, x1);
                let p10 = self.get(y1, x0);
                let p11 = self.get(y1, x1);
                for c in 0..3 {
                    let top = p00[c] as f32 * (1.0 - wx) + p01[c] as f32 * wx;
                    let bot = p10[c] as f32 * (1.0 - wx) + p11[c] as f32 * wx;
                    let v = top * (1.0 - wy) + bot * wy;
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Raster {
            height,
            width,
            data,
        }
    }

    /// Rotate 90 degrees clockwise (used by symmetry tests).
    pub fn rotate90(&self) -> Raster {
        Raster::from_fn(self.width, self.height, |y, x| self.get(self.height - 1 - x, y))
    }

    /// Mirror horizontally.
    pub fn flip_horizontal(&self) -> Raster {
        Raster::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_same_size_is_identity() {
        let r = Raster::from_fn(5, 7, |y, x| [y as u8, x as u8, (y * x) as u8]);
        assert_eq!(r.resize_bilinear(5, 7), r);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let r = Raster::filled(8, 8, [40, 90, 200]);
        let s = r.resize_bilinear(3, 5);
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(s.get(y, x), [40, 90, 200]);
            }
        }
    }

    #[test]
    fn crop_extracts_window() {
        let r = Raster::from_fn(4, 4, |y, x| [(y * 4 + x) as u8, 0, 0]);
        let c = r.crop(1, 2, 2, 2);
        assert_eq!(c.get(0, 0)[0], 6);
        assert_eq!(c.get(1, 1)[0], 11);
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let r = Raster::from_fn(3, 5, |y, x| [y as u8, x as u8, 7]);
        let rr = r.rotate90().rotate90().rotate90().rotate90();
        assert_eq!(rr, r);
    }
}
