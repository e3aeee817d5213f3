use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::geometry::ViewTransform;
use crate::Result;

/// An RGB image, interleaved (HWC) `f32` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(shape_err!("image {width}x{height} with {} samples", data.len()));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; width * height * 3];
        for px in data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    /// From 8-bit interleaved RGB.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| num_traits::Float::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Bilinear sample at a continuous position (pixel centers at `+0.5`),
    /// replicating the border.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let u = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let v = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (num_traits::Float::floor(u) as usize, num_traits::Float::floor(v) as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((u - x0 as f64) as f32, (v - y0 as f64) as f32);
        let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bot = c[k] + (d[k] - c[k]) * fx;
            out[k] = top + (bot - top) * fy;
        }
        out
    }

    /// Renders the view described by `t`: crop, resize and optional mirror.
    pub fn render_view(&self, t: &ViewTransform) -> Image {
        let (w, h) = (t.out_width, t.out_height);
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..h {
            let y = t.view_to_orig_y(i as f64 + 0.5);
            for j in 0..w {
                let x = t.view_to_orig_x(j as f64 + 0.5);
                data.extend_from_slice(&self.sample(x, y));
            }
        }
        Image { width: w, height: h, data }
    }

    /// Resizes the whole image to `w x h`.
    pub fn resized(&self, w: usize, h: usize) -> Image {
        let t = ViewTransform::new(
            crate::BBox { x1: 0.0, y1: 0.0, x2: self.width as f64, y2: self.height as f64 },
            w,
            h,
            false,
        );
        self.render_view(&t)
    }
}
