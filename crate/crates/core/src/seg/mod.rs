//! Buttonlab: a residual encoder–decoder segmenter with a shallow local
//! branch, trained on random aligned crops with a crop-restricted loss.

mod net;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::{BBox, Image, RegionMask};

pub use net::{
    forward, init_buttonlab, seg_schedule, Norm, SegConv, SegNetParams, BRANCH_STRIDE, CLASSES, HIGH_STRIDE, LOW_STRIDE,
};
pub use train::{train_seg, EpochRecord, SegConfig, SegRun};

/// Spatial alignment required of images and crops.
pub const ALIGN: usize = 16;

/// Per-pixel class indices (0 background, 1 defect).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("label map {height}x{width} with {} entries", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_mask(mask: &RegionMask) -> Self {
        let data = mask.bits().iter().map(|&b| u8::from(b)).collect();
        Self { height: mask.height(), width: mask.width(), data }
    }

    pub fn to_mask(&self) -> RegionMask {
        RegionMask::new(self.height, self.width, self.data.iter().map(|&v| v != 0).collect()).expect("same size")
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

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, c: CropSpec) -> LabelMap {
        let mut data = Vec::with_capacity(c.height * c.width);
        for y in c.top..c.top + c.height {
            data.extend_from_slice(&self.data[y * self.width + c.left..y * self.width + c.left + c.width]);
        }
        LabelMap { height: c.height, width: c.width, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropSpec {
    pub fn full(height: usize, width: usize) -> Self {
        Self { top: 0, left: 0, height, width }
    }

    fn bbox(self) -> BBox {
        BBox { top: self.top, left: self.left, height: self.height, width: self.width }
    }

    pub fn check(self, height: usize, width: usize) -> Result<()> {
        if self.height > height
            || self.width > width
            || self.top + self.height > height
            || self.left + self.width > width
        {
            return Err(Error::CropTooLarge { crop_h: self.height, crop_w: self.width, height, width });
        }
        for (what, v) in [("top", self.top), ("left", self.left), ("height", self.height), ("width", self.width)] {
            if v % ALIGN != 0 || (v == 0 && (what == "height" || what == "width")) {
                return Err(Error::AlignmentError { align: ALIGN, detail: format!("crop {what} = {v}") });
            }
        }
        Ok(())
    }
}

fn check_image(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(ALIGN) || !w.is_multiple_of(ALIGN) {
        return Err(Error::AlignmentError { align: ALIGN, detail: format!("image is {h}x{w}") });
    }
    Ok(())
}

/// Half the side, rounded down to the alignment, at least one alignment unit.
pub fn default_crop(side: usize) -> usize {
    (side / 2 / ALIGN * ALIGN).max(ALIGN).min(side)
}

/// A uniformly random aligned crop of `crop_hw` from `img` and `lbl`.
pub fn random_crop<R: Rng>(
    img: &Image,
    lbl: &LabelMap,
    crop_hw: (usize, usize),
    rng: &mut R,
) -> Result<(Image, LabelMap, CropSpec)> {
    let (h, w) = (img.height(), img.width());
    if (lbl.height, lbl.width) != (h, w) {
        return Err(Error::shape("label and image differ in size"));
    }
    let (ch, cw) = crop_hw;
    if ch > h || cw > w {
        return Err(Error::CropTooLarge { crop_h: ch, crop_w: cw, height: h, width: w });
    }
    let top = rng.random_range(0..=(h - ch) / ALIGN) * ALIGN;
    let left = rng.random_range(0..=(w - cw) / ALIGN) * ALIGN;
    let spec = CropSpec { top, left, height: ch, width: cw };
    spec.check(h, w)?;
    Ok((img.crop(spec.bbox()), lbl.crop(spec), spec))
}

/// Builds logits for `img` in `g`, optionally restricted to `crop`.
pub fn seg_logits<'p, T: Real>(
    g: &mut Graph<T>,
    params: &'p SegNetParams<T>,
    img: &Image,
    crop: Option<CropSpec>,
    trainable: bool,
) -> Result<(Var, crate::autodiff::Bound<'p, T>)> {
    let (h, w) = (img.height(), img.width());
    check_image(h, w)?;
    if let Some(c) = crop {
        c.check(h, w)?;
    }
    let rgb = img.to_rgb();
    let bound = params.params.bind(g, trainable);
    let x = g.constant(rgb.to_tensor());
    let branch = match crop {
        Some(c) => g.constant(rgb.crop(c.bbox()).to_tensor()),
        None => x,
    };
    let logits = forward(g, &bound, params.scale, x, branch, crop)?;
    Ok((logits, bound))
}

/// Logits `1×2×h×w` over the crop (or the whole image).
pub fn seg_forward<T: Real>(params: &SegNetParams<T>, img: &Image, crop: Option<CropSpec>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (logits, _) = seg_logits(&mut g, params, img, crop, false)?;
    Ok(g.value(logits).clone())
}

/// Mean softmax cross-entropy over the pixels of the label block.
pub fn masked_ce<T: Real>(g: &mut Graph<T>, logits: Var, label: &LabelMap) -> Result<Var> {
    let (n, k, h, w) = g.value(logits).dims4()?;
    if n != 1 || k != CLASSES || (h, w) != (label.height, label.width) {
        return Err(Error::shape(format!("logits {:?} vs label {}x{}", g.shape(logits), label.height, label.width)));
    }
    g.softmax_cross_entropy(logits, &label.data)
}

/// Per-pixel argmax of `1×2×H×W` logits; ties go to class 0.
pub fn argmax<T: Real>(logits: &Tensor<T>) -> Result<LabelMap> {
    let (_, k, h, w) = logits.dims4()?;
    if k != CLASSES {
        return Err(Error::shape(format!("expected {CLASSES} classes, got {k}")));
    }
    let d = logits.data();
    let hw = h * w;
    let data = (0..hw).map(|p| u8::from(d[hw + p] > d[p])).collect();
    LabelMap::new(h, w, data)
}

/// Full-image prediction with the whole image on both paths.
pub fn predict(params: &SegNetParams, img: &Image) -> Result<LabelMap> {
    argmax(&seg_forward(params, img, None)?)
}

#[cfg(test)]
mod tests;
