//! Image containers, region masks, masked histogram matching and Gaussian
//! region fusion.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::autodiff::conv::reflect_index;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 256;

/// H×W×C pixels in `[0, 1]`, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(bad as f64));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("valid fill")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Replicates a grayscale image to three channels; RGB is returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image { height: self.height, width: self.width, channels: 3, data }
    }

    /// Mean of the channel values of each pixel.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| (p.iter().sum::<f32>() / self.channels as f32).clamp(0.0, 1.0))
            .collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }

    pub fn crop(&self, b: BBox) -> Image {
        let mut data = Vec::with_capacity(b.height * b.width * self.channels);
        for y in b.top..b.top + b.height {
            let start = (y * self.width + b.left) * self.channels;
            data.extend_from_slice(&self.data[start..start + b.width * self.channels]);
        }
        Image { height: b.height, width: b.width, channels: self.channels, data }
    }

    /// `1×C×H×W` tensor of the pixel values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![T::zero(); h * w * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + i] = T::lit(v as f64);
            }
        }
        Tensor::new(vec![1, c, h, w], out).expect("finite pixels")
    }

    /// Inverse of [`Image::to_tensor`] for a single-sample tensor; values are
    /// clamped into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Image> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 {
            return Err(Error::shape(format!("expected one sample, got {n}")));
        }
        let mut data = vec![0.0f32; h * w * c];
        for ch in 0..c {
            for i in 0..h * w {
                let v = t.data()[ch * h * w + i].to_f64_lossy() as f32;
                data[i * c + ch] = v.clamp(0.0, 1.0);
            }
        }
        Image::new(h, w, c, data)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        let to_f = |v: u8| v as f32 / 255.0;
        match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                let data = g.pixels().map(|p| to_f(p.0[0])).collect();
                Image::new(g.height() as usize, g.width() as usize, 1, data)
            }
            _ => {
                let rgb = img.to_rgb8();
                let data = rgb.pixels().flat_map(|p| p.0.map(to_f)).collect();
                Image::new(rgb.height() as usize, rgb.width() as usize, 3, data)
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let res = if self.channels == 1 {
            let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("sized buffer");
            buf.save(path)
        } else {
            let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("sized buffer");
            buf.save(path)
        };
        res.map_err(|source| Error::Image { path: path.into(), source })
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Image { data, ..*self }
    }
}

/// 8-bit conversion with round-half-up.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    /// Grows by `margin` on each side, clipped to `height × width`.
    pub fn expand(self, margin: usize, height: usize, width: usize) -> BBox {
        let top = self.top.saturating_sub(margin);
        let left = self.left.saturating_sub(margin);
        let bottom = (self.top + self.height + margin).min(height);
        let right = (self.left + self.width + margin).min(width);
        BBox { top, left, height: bottom - top, width: right - left }
    }
}

/// Binary per-pixel region selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box of the set bits.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        (y0 != usize::MAX).then(|| BBox { top: y0, left: x0, height: y1 - y0 + 1, width: x1 - x0 + 1 })
    }

    pub fn crop(&self, b: BBox) -> RegionMask {
        RegionMask::from_fn(b.height, b.width, |y, x| self.get(b.top + y, b.left + x))
    }

    pub fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyRegion)
        } else {
            Ok(())
        }
    }

    /// Single-channel PNG; values ≥ 128 are inside the region.
    pub fn load_png(path: &Path) -> Result<RegionMask> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        let g = img.to_luma8();
        let bits = g.pixels().map(|p| p.0[0] >= 128).collect();
        RegionMask::new(g.height() as usize, g.width() as usize, bits)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.bits.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
        let buf: GrayImage = ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes).expect("sized buffer");
        buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
    }
}

fn check_same_size(img: &Image, mask: &RegionMask) -> Result<()> {
    if img.height != mask.height || img.width != mask.width {
        return Err(Error::shape(format!("image {}x{} vs mask {}x{}", img.height, img.width, mask.height, mask.width)));
    }
    Ok(())
}

/// Equal-width bin of `v` on `[0, 1]`. A value on an interior edge belongs
/// to the bin that starts there; 1.0 belongs to the last bin.
pub fn bin_index(v: f32, bins: usize) -> usize {
    ((v as f64 * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Per-channel counts of the masked pixels over equal-width bins on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    bins: usize,
    counts: Vec<Vec<u64>>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channel(&self, c: usize) -> &[u64] {
        &self.counts[c]
    }

    pub fn channels(&self) -> usize {
        self.counts.len()
    }

    /// Running totals per channel (unnormalised CDF).
    pub fn cumulative(&self, c: usize) -> Vec<u64> {
        self.counts[c]
            .iter()
            .scan(0u64, |acc, &n| {
                *acc += n;
                Some(*acc)
            })
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.first().map(|c| c.iter().sum()).unwrap_or(0)
    }
}

pub fn channel_histogram(img: &Image, mask: &RegionMask, bins: usize) -> Result<Histogram> {
    check_same_size(img, mask)?;
    mask.require_nonempty()?;
    if bins < 2 {
        return Err(Error::shape(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let mut counts = vec![vec![0u64; bins]; img.channels];
    for (i, &inside) in mask.bits.iter().enumerate() {
        if inside {
            for (c, &v) in img.data[i * img.channels..(i + 1) * img.channels].iter().enumerate() {
                counts[c][bin_index(v, bins)] += 1;
            }
        }
    }
    Ok(Histogram { bins, counts })
}

/// Per-bin lookup: each source bin maps to the centre of the smallest
/// reference bin whose CDF reaches the source bin's CDF.
pub(crate) fn matching_table(src_cum: &[u64], ref_cum: &[u64]) -> Vec<usize> {
    let ns = *src_cum.last().expect("nonempty histogram") as u128;
    let nr = *ref_cum.last().expect("nonempty histogram") as u128;
    let mut r = 0;
    src_cum
        .iter()
        .map(|&cs| {
            // cdf_ref(r) >= cdf_src(b)  <=>  ref_cum[r]·ns >= cs·nr, exactly
            while (ref_cum[r] as u128) * ns < (cs as u128) * nr {
                r += 1;
            }
            r
        })
        .collect()
}

/// Matches the per-channel distribution of `src` inside `src_region` to that
/// of `reference` inside `ref_region`. Pixels outside `src_region` are copied
/// unchanged.
pub fn hist_match_region(
    src: &Image,
    src_region: &RegionMask,
    reference: &Image,
    ref_region: &RegionMask,
) -> Result<Image> {
    hist_match_region_bins(src, src_region, reference, ref_region, DEFAULT_BINS)
}

pub fn hist_match_region_bins(
    src: &Image,
    src_region: &RegionMask,
    reference: &Image,
    ref_region: &RegionMask,
    bins: usize,
) -> Result<Image> {
    check_same_size(src, src_region)?;
    check_same_size(reference, ref_region)?;
    src_region.require_nonempty()?;
    ref_region.require_nonempty()?;
    if src.channels != reference.channels {
        return Err(Error::ChannelMismatch { left: src.channels, right: reference.channels });
    }
    let hs = channel_histogram(src, src_region, bins)?;
    let hr = channel_histogram(reference, ref_region, bins)?;
    let tables: Vec<Vec<usize>> =
        (0..src.channels).map(|c| matching_table(&hs.cumulative(c), &hr.cumulative(c))).collect();
    let mut out = src.clone();
    let ch = src.channels;
    for (i, &inside) in src_region.bits.iter().enumerate() {
        if !inside {
            continue;
        }
        for (c, table) in tables.iter().enumerate() {
            let v = &mut out.data[i * ch + c];
            let r = table[bin_index(*v, bins)];
            *v = (((r as f64 + 0.5) / bins as f64) as f32).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Soft per-pixel blend weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    weights: Vec<f32>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(Error::shape("soft mask size"));
        }
        if let Some(&bad) = weights.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(bad as f64));
        }
        Ok(Self { height, width, weights })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.weights[y * self.width + x]
    }
}

/// `max(1, min(bbox_h, bbox_w) / 4)` of the region's bounding box.
pub fn default_sigma(region: &RegionMask) -> Result<f64> {
    let b = region.bbox().ok_or(Error::EmptyRegion)?;
    Ok((b.height.min(b.width) as f64 / 4.0).max(1.0))
}

fn blur_1d(src: &[f64], dst: &mut [f64], len: usize, stride: usize, lines: usize, line_stride: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let norm: f64 = kernel.iter().sum();
    for l in 0..lines {
        let base = l * line_stride;
        for i in 0..len {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let j = reflect_index(i as isize + k as isize - r, len);
                acc += w * src[base + j * stride];
            }
            dst[base + i * stride] = acc / norm;
        }
    }
}

/// Gaussian blur (std `sigma`, radius `ceil(3σ)`, reflected borders) of the
/// binary region, multiplied by the region so it vanishes outside it.
pub fn gaussian_fusion_mask(region: &RegionMask, sigma: f64) -> Result<SoftMask> {
    region.require_nonempty()?;
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("fusion sigma must be >= 0, got {sigma}")));
    }
    let (h, w) = (region.height, region.width);
    let binary: Vec<f64> = region.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let blurred = if sigma == 0.0 {
        binary.clone()
    } else {
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let mut tmp = vec![0.0; h * w];
        let mut out = vec![0.0; h * w];
        blur_1d(&binary, &mut tmp, w, 1, h, w, &kernel);
        blur_1d(&tmp, &mut out, h, w, w, 1, &kernel);
        out
    };
    let weights = blurred.iter().zip(&binary).map(|(&b, &m)| ((b * m) as f32).clamp(0.0, 1.0)).collect();
    SoftMask::new(h, w, weights)
}

/// `weights·patch + (1 − weights)·background`, pixelwise. Pixels with zero
/// weight are copied from the background.
pub fn compose_region(background: &Image, patch: &Image, weights: &SoftMask) -> Result<Image> {
    if background.height != patch.height
        || background.width != patch.width
        || background.channels != patch.channels
        || weights.height != background.height
        || weights.width != background.width
    {
        return Err(Error::shape("compose_region inputs differ in shape"));
    }
    let ch = background.channels;
    let mut out = background.clone();
    for (i, &wt) in weights.weights.iter().enumerate() {
        if wt == 0.0 {
            continue;
        }
        for c in 0..ch {
            let k = i * ch + c;
            out.data[k] = (wt * patch.data[k] + (1.0 - wt) * background.data[k]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
