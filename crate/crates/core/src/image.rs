//! Dense interleaved images and six-face cubemaps.

use crate::error::{Error, Result};
use crate::geometry::Face;

/// Row-major, channel-interleaved image of `f64` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn pixel_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Keeps only channel `c`.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Bilinear sample of an equirectangular image at continuous pixel
    /// coordinates (pixel `i` covers `[i, i+1)`): longitude wraps, latitude
    /// clamps.
    pub fn sample_erp(&self, m: f64, n: f64, out: &mut [f64]) {
        let w = self.width as isize;
        let x = m - 0.5;
        let y = (n - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let x0 = (x0f as isize).rem_euclid(w) as usize;
        let x1 = (x0f as isize + 1).rem_euclid(w) as usize;
        let y0 = y0f as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let a = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
            let b = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
            *o = a * (1.0 - fy) + b * fy;
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`, restricted to rows
/// `[row_lo, row_hi)`.
pub fn psnr_rows(a: &Image, b: &Image, row_lo: usize, row_hi: usize) -> Result<f64> {
    a.check_same_shape(b)?;
    let mut se = 0.0;
    let mut n = 0usize;
    for y in row_lo..row_hi.min(a.height) {
        let lo = y * a.width * a.channels;
        let hi = lo + a.width * a.channels;
        for (p, q) in a.data[lo..hi].iter().zip(&b.data[lo..hi]) {
            se += (p - q) * (p - q);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_rows(a, b, 0, a.height)
}

/// Six square images in face order B, D, F, L, R, U.
#[derive(Clone, Debug, PartialEq)]
pub struct Cubemap {
    pub faces: [Image; 6],
}

impl Cubemap {
    pub fn new(size: usize, channels: usize) -> Self {
        Cubemap {
            faces: std::array::from_fn(|_| Image::new(size, size, channels)),
        }
    }

    pub fn size(&self) -> usize {
        self.faces[0].width
    }

    pub fn channels(&self) -> usize {
        self.faces[0].channels
    }

    pub fn face(&self, f: Face) -> &Image {
        &self.faces[f.index()]
    }

    pub fn face_mut(&mut self, f: Face) -> &mut Image {
        &mut self.faces[f.index()]
    }
}
