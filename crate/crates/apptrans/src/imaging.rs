//! Raster image model, PNG I/O, masking, color conversion, bicubic
//! resampling, and color histograms.
//!
//! Pixels are normalized floating-point RGB in `[0,1]` everywhere;
//! quantization happens only at the PNG boundary. Images are immutable
//! after construction and safe to share across workers.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: String,
        source: image::ImageError,
    },
    #[error("failed to encode {path}: {source}")]
    Encode {
        path: String,
        source: image::ImageError,
    },
    #[error("{path}: unsupported PNG pixel format {format}; expected 8- or 16-bit RGB or RGBA")]
    UnsupportedFormat { path: String, format: String },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
}

/// Row-major RGB raster with channel values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "data length mismatch");
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::new(width, height, data)
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    /// Build an image from a per-pixel closure, clipping to `[0,1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, data)
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

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn same_size(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear sample at continuous pixel coordinates, edge-clamped.
    pub fn sample_bilinear(&self, x: f32, y: f32) -> [f32; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

/// Per-pixel boolean foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, fg: bool) {
        self.bits[y * self.width + x] = fg;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_foreground(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn matches(&self, image: &ImageRgb) -> bool {
        self.width == image.width() && self.height == image.height()
    }
}

/// Per-channel normalized color histogram (3 x `n_bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    n_bins: usize,
    /// bins[c][i] for channel c in {r,g,b}
    bins: [Vec<f64>; 3],
    degenerate: bool,
}

impl Histogram {
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.bins[c]
    }

    /// True when the source mask was empty; all bins are zero.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

fn format_name(color: image::ColorType) -> String {
    format!("{color:?}")
}

/// Load an 8- or 16-bit RGB/RGBA PNG. Channels are scaled to `[0,1]`;
/// an alpha channel, if present, is thresholded at 0.5 into a mask.
pub fn load_png(path: &Path) -> Result<(ImageRgb, Option<Mask>), ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let dynimg = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
        |source| ImageError::Decode {
            path: path.display().to_string(),
            source,
        },
    )?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    let mut mask: Option<Vec<bool>> = None;
    match dynimg {
        image::DynamicImage::ImageRgb8(img) => {
            for p in img.pixels() {
                data.extend(p.0.iter().map(|&v| v as f32 / 255.0));
            }
        }
        image::DynamicImage::ImageRgba8(img) => {
            let mut bits = Vec::with_capacity(w * h);
            for p in img.pixels() {
                data.extend(p.0[..3].iter().map(|&v| v as f32 / 255.0));
                bits.push(p.0[3] as f32 / 255.0 >= 0.5);
            }
            mask = Some(bits);
        }
        image::DynamicImage::ImageRgb16(img) => {
            for p in img.pixels() {
                data.extend(p.0.iter().map(|&v| v as f32 / 65535.0));
            }
        }
        image::DynamicImage::ImageRgba16(img) => {
            let mut bits = Vec::with_capacity(w * h);
            for p in img.pixels() {
                data.extend(p.0[..3].iter().map(|&v| v as f32 / 65535.0));
                bits.push(p.0[3] as f32 / 65535.0 >= 0.5);
            }
            mask = Some(bits);
        }
        other => {
            return Err(ImageError::UnsupportedFormat {
                path: path.display().to_string(),
                format: format_name(other.color()),
            })
        }
    }
    let image = ImageRgb::new(w, h, data);
    Ok((image, mask.map(|bits| Mask::new(w, h, bits))))
}

/// Load a standalone grayscale mask PNG (0 = background, nonzero midpoint
/// threshold for foreground).
pub fn load_mask_png(path: &Path) -> Result<Mask, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let dynimg = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
        |source| ImageError::Decode {
            path: path.display().to_string(),
            source,
        },
    )?;
    let gray = dynimg.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let bits = gray.pixels().map(|p| p.0[0] >= 128).collect();
    Ok(Mask::new(w, h, bits))
}

/// Save as 8-bit RGB PNG. A load/save round trip stays within 1/255 per
/// channel.
pub fn save_png(image: &ImageRgb, path: &Path) -> Result<(), ImageError> {
    let mut out = image::RgbImage::new(image.width() as u32, image.height() as u32);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let p = image.pixel(x, y);
            let q = [
                (p[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (p[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (p[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(q));
        }
    }
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImageError::Encode {
            path: path.display().to_string(),
            source,
        })
}

/// Save a mask as 8-bit grayscale PNG (0 = background, 255 = foreground).
pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<(), ImageError> {
    let mut out = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            out.put_pixel(x as u32, y as u32, image::Luma([if mask.get(x, y) { 255 } else { 0 }]));
        }
    }
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImageError::Encode {
            path: path.display().to_string(),
            source,
        })
}

/// Chroma-key segmentation: a pixel is background iff its distance to the
/// key color is at most `tolerance`.
///
/// The distance is Euclidean in RGB after subtracting the per-pixel channel
/// mean from both the pixel and the key, so luminance variation on the
/// backdrop (shading on a green screen) is tolerated.
pub fn chroma_key(image: &ImageRgb, key_color: [f32; 3], tolerance: f32) -> Mask {
    assert!(tolerance > 0.0, "tolerance must be positive");
    let key_mean = (key_color[0] + key_color[1] + key_color[2]) / 3.0;
    let key_c = [
        key_color[0] - key_mean,
        key_color[1] - key_mean,
        key_color[2] - key_mean,
    ];
    let mut bits = Vec::with_capacity(image.width() * image.height());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let p = image.pixel(x, y);
            let m = (p[0] + p[1] + p[2]) / 3.0;
            let d = ((p[0] - m - key_c[0]).powi(2)
                + (p[1] - m - key_c[1]).powi(2)
                + (p[2] - m - key_c[2]).powi(2))
            .sqrt();
            bits.push(d > tolerance);
        }
    }
    Mask::new(image.width(), image.height(), bits)
}

/// Catmull-Rom cubic kernel (a = -0.5).
#[cfg(test)]
fn cubic_kernel(t: f32) -> f32 {
    cubic_kernel_f64(t as f64) as f32
}

fn cubic_kernel_f64(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic resampling with the Catmull-Rom kernel, edge-clamped, output
/// clipped to `[0,1]`. Identity scale is an exact copy.
pub fn resize_bicubic(image: &ImageRgb, new_width: usize, new_height: usize) -> ImageRgb {
    assert!(new_width >= 1 && new_height >= 1);
    if new_width == image.width() && new_height == image.height() {
        return image.clone();
    }
    let sx = image.width() as f64 / new_width as f64;
    let sy = image.height() as f64 / new_height as f64;
    let w = image.width() as isize;
    let h = image.height() as isize;
    let mut data = Vec::with_capacity(new_width * new_height * 3);
    for oy in 0..new_height {
        // Center-aligned source coordinate.
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        let iy = fy.floor() as isize;
        let dy = fy - iy as f64;
        let wy: Vec<f64> = (-1..=2).map(|k| cubic_kernel_f64(k as f64 - dy)).collect();
        for ox in 0..new_width {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            let ix = fx.floor() as isize;
            let dx = fx - ix as f64;
            let wx: Vec<f64> = (-1..=2).map(|k| cubic_kernel_f64(k as f64 - dx)).collect();
            let mut acc = [0.0f64; 3];
            for (ky, wyk) in wy.iter().enumerate() {
                let yy = (iy + ky as isize - 1).clamp(0, h - 1) as usize;
                for (kx, wxk) in wx.iter().enumerate() {
                    let xx = (ix + kx as isize - 1).clamp(0, w - 1) as usize;
                    let p = image.pixel(xx, yy);
                    let wgt = wyk * wxk;
                    acc[0] += wgt * p[0] as f64;
                    acc[1] += wgt * p[1] as f64;
                    acc[2] += wgt * p[2] as f64;
                }
            }
            data.extend(acc.iter().map(|v| (*v as f32).clamp(0.0, 1.0)));
        }
    }
    ImageRgb::new(new_width, new_height, data)
}

/// BT.601 luma on `[0,1]` RGB: Y = 0.299 r + 0.587 g + 0.114 b.
pub fn rgb_to_y(image: &ImageRgb) -> Vec<f32> {
    image
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

#[inline]
pub fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Per-channel histogram over foreground pixels, normalized so each channel
/// sums to 1. Bin index = floor(value * n_bins), with value 1 mapped to the
/// last bin. An empty mask yields an all-zero histogram flagged degenerate.
pub fn color_histogram(
    image: &ImageRgb,
    mask: &Mask,
    n_bins: usize,
) -> Result<Histogram, ImageError> {
    if n_bins < 2 {
        return Err(ImageError::TooFewBins(n_bins));
    }
    if !mask.matches(image) {
        return Err(ImageError::DimensionMismatch(
            image.width(),
            image.height(),
            mask.width(),
            mask.height(),
        ));
    }
    let mut counts = [vec![0u64; n_bins], vec![0u64; n_bins], vec![0u64; n_bins]];
    let mut total = 0u64;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !mask.get(x, y) {
                continue;
            }
            total += 1;
            let p = image.pixel(x, y);
            for c in 0..3 {
                let idx = ((p[c] as f64 * n_bins as f64) as usize).min(n_bins - 1);
                counts[c][idx] += 1;
            }
        }
    }
    let degenerate = total == 0;
    let bins = counts.map(|ch| {
        ch.into_iter()
            .map(|n| {
                if degenerate {
                    0.0
                } else {
                    n as f64 / total as f64
                }
            })
            .collect()
    });
    Ok(Histogram {
        n_bins,
        bins,
        degenerate,
    })
}
