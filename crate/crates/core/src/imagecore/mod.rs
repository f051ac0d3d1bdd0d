//! Raster containers, separable filtering, pyramids, warping and the
//! PPM/PGM/FLO interchange formats.

mod filter;
mod io;

pub use filter::{
    downsample_half, gaussian_kernel, separable_convolve, warp_bilinear, PYRAMID_SIGMA,
};
pub(crate) use filter::{sample_bilinear, separable_convolve_f64};
pub use io::{
    decode_flo, decode_pgm, decode_pgm_labels, decode_ppm, encode_flo, encode_pgm,
    encode_pgm_labels, encode_ppm, read_flo, read_pgm, read_pgm_labels, read_ppm, write_flo,
    write_pgm, write_pgm_labels, write_ppm, FLO_MAGIC,
};

use crate::error::{invalid, Result};

/// Label value for pixels excluded from loss and evaluation.
pub const IGNORE: u8 = 255;

/// Largest accepted side length for any raster.
pub const MAX_SIDE: usize = 16384;

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return invalid(format!("degenerate dimensions {width}x{height}"));
    }
    if width > MAX_SIDE || height > MAX_SIDE {
        return invalid(format!("dimensions {width}x{height} exceed {MAX_SIDE}"));
    }
    Ok(())
}

/// Row-major, channel-interleaved float raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        check_dims(width, height)?;
        if channels == 0 {
            return invalid("image needs at least one channel");
        }
        Ok(Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        })
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if channels == 0 {
            return invalid("image needs at least one channel");
        }
        if data.len() != width * height * channels {
            return invalid(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut img = Self::new(width, height, channels)?;
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Sample with replicate-edge clamping of signed coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn row(&self, y: usize) -> &[f32] {
        let stride = self.width * self.channels;
        &self.data[y * stride..(y + 1) * stride]
    }

    /// Copies out a single channel as a 1-channel image.
    pub fn channel(&self, c: usize) -> Result<Image> {
        if c >= self.channels {
            return invalid(format!("channel {c} out of range ({})", self.channels));
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        Image::from_vec(self.width, self.height, 1, data)
    }

    /// Luma conversion of a 3-channel image (0.299 R + 0.587 G + 0.114 B).
    pub fn to_gray(&self) -> Result<Image> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
                    .collect();
                Image::from_vec(self.width, self.height, 1, data)
            }
            c => invalid(format!("cannot convert {c}-channel image to gray")),
        }
    }
}

/// Dense displacement field from frame t to frame t+1, in pixels
/// (+u right, +v down).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Result<Self> {
        check_dims(width, height)?;
        let data = std::iter::repeat_n([u, v], width * height)
            .flatten()
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// `data` holds interleaved (u, v) pairs in row-major order.
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height * 2 {
            return invalid(format!(
                "flow data length {} does not match {width}x{height}x2",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f32, v: f32) {
        let i = (y * self.width + x) * 2;
        self.data[i] = u;
        self.data[i + 1] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel Euclidean magnitudes in row-major order.
    pub fn magnitudes(&self) -> Vec<f32> {
        self.data
            .chunks_exact(2)
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .collect()
    }

    /// Views the field as a 2-channel image.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 2,
            data: self.data.clone(),
        }
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 2 {
            return invalid("flow image must have two channels");
        }
        Self::from_vec(img.width(), img.height(), img.data().to_vec())
    }
}

/// Per-pixel class ids in `[0, K)` or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, label: u8) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![label; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return invalid(format!(
                "label data length {} does not match {width}x{height}",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    /// Checks that every value is below `k` or equal to [`IGNORE`].
    pub fn validate(&self, k: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l != IGNORE && (l as usize) >= k)
        {
            Some(l) => invalid(format!("label {l} out of range for {k} classes")),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour resampling to new dimensions.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = ((2 * y + 1) * self.height / (2 * height)).min(self.height - 1);
            for x in 0..width {
                let sx = ((2 * x + 1) * self.width / (2 * width)).min(self.width - 1);
                out.push(self.get(sx, sy));
            }
        }
        Self::from_vec(width, height, out)
    }
}

/// Per-pixel class probabilities, H×W×K.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn from_vec(width: usize, height: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if classes == 0 {
            return invalid("probability map needs at least one class");
        }
        if data.len() != width * height * classes {
            return invalid(format!(
                "prob data length {} does not match {width}x{height}x{classes}",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Class probabilities of the pixel at linear index `i`.
    #[inline]
    pub fn probs(&self, i: usize) -> &[f32] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.classes)
    }

    /// Argmax labels; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let data = self.pixels().map(|p| argmax(p) as u8).collect();
        LabelMap {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Rounds a float to an 8-bit level, half-up, clamped to [0, 255].
#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}
