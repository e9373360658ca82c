//! Index plumbing for reflection-padded convolution (im2col / col2im).

use super::Real;

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample: `... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...`. Offsets wider than the
/// axis fold again with period `2(n-1)`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Output size of a padded convolution: `ceil(len / stride)`.
pub fn out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Source-index tables for one convolution shape.
#[derive(Debug, Clone)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// `ytab[ky * out_h + oy]` is the input row read by kernel row `ky` at output row `oy`.
    ytab: Vec<usize>,
    xtab: Vec<usize>,
}

impl ConvGeometry {
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Self {
        let pad = (kernel / 2) as isize;
        let out_h = out_len(in_h, stride);
        let out_w = out_len(in_w, stride);
        let table = |len: usize, out: usize| {
            let mut t = Vec::with_capacity(kernel * out);
            for k in 0..kernel as isize {
                for o in 0..out as isize {
                    t.push(reflect_index(o * stride as isize + k - pad, len));
                }
            }
            t
        };
        Self { kernel, stride, in_h, in_w, out_h, out_w, ytab: table(in_h, out_h), xtab: table(in_w, out_w) }
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Output columns `lo..hi` of kernel column `kx` read input columns
    /// `lo + kx - pad ..` directly, without reflection.
    fn interior(&self, kx: usize) -> (usize, usize) {
        if self.stride != 1 {
            return (0, 0);
        }
        let pad = self.kernel / 2;
        let lo = pad.saturating_sub(kx).min(self.out_w);
        let hi = (self.in_w + pad).saturating_sub(kx).min(self.out_w).max(lo);
        (lo, hi)
    }

    /// Fill `cols` (`channels*k*k` rows by `out_h*out_w` columns) from one sample.
    pub fn im2col<T: Real>(&self, x: &[T], channels: usize, cols: &mut [T]) {
        let k = self.kernel;
        let plane = self.in_h * self.in_w;
        let p = self.out_pixels();
        for c in 0..channels {
            let xc = &x[c * plane..(c + 1) * plane];
            for ky in 0..k {
                let rows = &self.ytab[ky * self.out_h..(ky + 1) * self.out_h];
                for kx in 0..k {
                    let cx = &self.xtab[kx * self.out_w..(kx + 1) * self.out_w];
                    let (lo, hi) = self.interior(kx);
                    let shift = if hi > lo { lo + kx - self.kernel / 2 } else { 0 };
                    let r = (c * k + ky) * k + kx;
                    let dst = &mut cols[r * p..(r + 1) * p];
                    for (oy, &iy) in rows.iter().enumerate() {
                        let src = &xc[iy * self.in_w..(iy + 1) * self.in_w];
                        let out = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        out[lo..hi].copy_from_slice(&src[shift..shift + hi - lo]);
                        for o in (0..lo).chain(hi..self.out_w) {
                            out[o] = src[cx[o]];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a column matrix back onto one input sample.
    pub fn col2im_add<T: Real>(&self, cols: &[T], channels: usize, dx: &mut [T]) {
        let k = self.kernel;
        let plane = self.in_h * self.in_w;
        let p = self.out_pixels();
        for c in 0..channels {
            let dxc = &mut dx[c * plane..(c + 1) * plane];
            for ky in 0..k {
                let rows = &self.ytab[ky * self.out_h..(ky + 1) * self.out_h];
                for kx in 0..k {
                    let cx = &self.xtab[kx * self.out_w..(kx + 1) * self.out_w];
                    let (lo, hi) = self.interior(kx);
                    let shift = if hi > lo { lo + kx - self.kernel / 2 } else { 0 };
                    let r = (c * k + ky) * k + kx;
                    let src = &cols[r * p..(r + 1) * p];
                    for (oy, &iy) in rows.iter().enumerate() {
                        let row = &mut dxc[iy * self.in_w..(iy + 1) * self.in_w];
                        let g = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for (d, &gv) in row[shift..shift + hi - lo].iter_mut().zip(&g[lo..hi]) {
                            *d += gv;
                        }
                        for o in (0..lo).chain(hi..self.out_w) {
                            row[cx[o]] += g[o];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_skips_edge_sample() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-4, 1), 0);
        // folds again past the far edge
        assert_eq!(reflect_index(-3, 2), 1);
    }

    #[test]
    fn im2col_matches_reflected_gather() {
        for (h, w, k, stride) in [(5, 7, 3, 1), (2, 3, 9, 1), (1, 1, 3, 1), (6, 6, 5, 2), (4, 9, 7, 1)] {
            let g = ConvGeometry::new(h, w, k, stride);
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64).collect();
            let mut cols = vec![0.0; 2 * k * k * g.out_pixels()];
            g.im2col(&x, 2, &mut cols);
            let pad = (k / 2) as isize;
            let mut back = vec![0.0; x.len()];
            let mut expected_back = vec![0.0; x.len()];
            for c in 0..2 {
                for ky in 0..k {
                    for kx in 0..k {
                        for oy in 0..g.out_h {
                            for ox in 0..g.out_w {
                                let iy = reflect_index((oy * stride + ky) as isize - pad, h);
                                let ix = reflect_index((ox * stride + kx) as isize - pad, w);
                                let r = (c * k + ky) * k + kx;
                                let at = r * g.out_pixels() + oy * g.out_w + ox;
                                assert_eq!(cols[at], x[c * h * w + iy * w + ix], "{h}x{w} k{k} s{stride}");
                                expected_back[c * h * w + iy * w + ix] += cols[at];
                            }
                        }
                    }
                }
            }
            g.col2im_add(&cols, 2, &mut back);
            assert_eq!(back, expected_back);
        }
    }

    #[test]
    fn output_size_is_ceil_division() {
        assert_eq!(out_len(7, 2), 4);
        assert_eq!(out_len(8, 2), 4);
        assert_eq!(out_len(5, 1), 5);
    }
}
