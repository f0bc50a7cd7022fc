//! Dense floating-point raster shared by every pipeline stage.
//!
//! Pixels are stored row-major with interleaved channels, so the sample at
//! `(y, x, c)` lives at `(y * width + x) * channels + c`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point sample type usable by images and the network engine.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// The 32-bit image used throughout the enhancement pipeline.
pub type ImageF = Image<f32>;

impl<T: Scalar> Image<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "buffer of {} samples does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
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

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Sample with coordinates clamped to the image border.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> T {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image<T>) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Image<T>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Elementwise combination of two equally shaped images.
    pub fn zip_map(&self, other: &Image<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Image<T>) {
        debug_assert!(self.same_shape(other));
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a = *a + b);
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn max_abs_diff(&self, other: &Image<T>) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &Image<T>) -> f64 {
        assert!(self.same_shape(other), "mean_abs_diff on mismatched shapes");
        if self.data.is_empty() {
            return 0.0;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Self {
        assert!(c < self.channels);
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    /// Interleaves single-channel planes of identical size.
    pub fn from_channels(planes: &[Image<T>]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::invalid("from_channels: no planes"))?;
        let (h, w) = (first.height, first.width);
        for p in planes {
            if p.channels != 1 || p.height != h || p.width != w {
                return Err(Error::invalid("from_channels: planes must be 1-channel and equal size"));
            }
        }
        let n = planes.len();
        let mut data = vec![T::zero(); h * w * n];
        for (c, p) in planes.iter().enumerate() {
            for (i, &v) in p.data.iter().enumerate() {
                data[i * n + c] = v;
            }
        }
        Ok(Self {
            height: h,
            width: w,
            channels: n,
            data,
        })
    }

    /// Concatenates images along the channel axis.
    pub fn concat_channels(parts: &[&Image<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels: no inputs"))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::invalid("concat_channels: spatial sizes differ"));
        }
        let total: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * total);
        for i in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            channels: total,
            data,
        })
    }

    /// Channel range `[start, start + count)` as a new image.
    pub fn slice_channels(&self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.channels);
        let mut data = Vec::with_capacity(self.pixel_count() * count);
        for i in 0..self.pixel_count() {
            let base = i * self.channels + start;
            data.extend_from_slice(&self.data[base..base + count]);
        }
        Self {
            height: self.height,
            width: self.width,
            channels: count,
            data,
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width}+{y0}+{x0} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in y0..y0 + height {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self {
            height,
            width,
            channels: c,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let (h, w, c) = self.shape();
        Self::from_fn(h, w, c, |y, x, ch| self.get(y, w - 1 - x, ch))
    }

    pub fn flip_vertical(&self) -> Self {
        let (h, w, c) = self.shape();
        Self::from_fn(h, w, c, |y, x, ch| self.get(h - 1 - y, x, ch))
    }

    /// Rotates 90 degrees clockwise.
    pub fn rotate90(&self) -> Self {
        let (h, w, c) = self.shape();
        Self::from_fn(w, h, c, |y, x, ch| self.get(h - 1 - x, y, ch))
    }

    /// Pads bottom/right by mirroring interior samples (edge not repeated).
    pub fn pad_reflect(&self, pad_bottom: usize, pad_right: usize) -> Self {
        let (h, w, c) = self.shape();
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        Self::from_fn(h + pad_bottom, w + pad_right, c, |y, x, ch| {
            self.get(reflect(y, h), reflect(x, w), ch)
        })
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}
