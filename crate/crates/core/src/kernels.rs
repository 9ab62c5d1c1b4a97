//! Convolution kernels shared by the forward and backward passes.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let eff_h = self.dil * (self.kh - 1) + 1;
        let eff_w = self.dil * (self.kw - 1) + 1;
        (
            (self.h + 2 * self.pad - eff_h) / self.stride + 1,
            (self.w + 2 * self.pad - eff_w) / self.stride + 1,
        )
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfold `x` (`[C, H, W]`) into `[C*kh*kw, Ho*Wo]` columns.
pub fn im2col<F: Scalar>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut cols = vec![F::zero(); g.patch() * p];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulate column gradients back into `dx`.
pub fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Columns for a 3x3 dilated kernel evaluated only at `centers`
/// (`[C*9, K]`). Taps outside the map read zero.
pub fn sparse_cols<F: Scalar>(
    x: &[F],
    (c, h, w): (usize, usize, usize),
    centers: &[(usize, usize)],
    dil: usize,
) -> Vec<F> {
    let k = centers.len();
    let mut cols = vec![F::zero(); c * 9 * k];
    for ch in 0..c {
        for t in 0..9 {
            let row = ch * 9 + t;
            for (n, &(ci, cj)) in centers.iter().enumerate() {
                if let Some(idx) = tap_index((h, w), (ci, cj), t, dil) {
                    cols[row * k + n] = x[ch * h * w + idx];
                }
            }
        }
    }
    cols
}

pub fn sparse_cols_adjoint<F: Scalar>(
    cols: &[F],
    (c, h, w): (usize, usize, usize),
    centers: &[(usize, usize)],
    dil: usize,
    dx: &mut [F],
) {
    let k = centers.len();
    for ch in 0..c {
        for t in 0..9 {
            let row = ch * 9 + t;
            for (n, &(ci, cj)) in centers.iter().enumerate() {
                if let Some(idx) = tap_index((h, w), (ci, cj), t, dil) {
                    dx[ch * h * w + idx] += cols[row * k + n];
                }
            }
        }
    }
}

/// Spatial index of tap `t` (row-major over the 3x3 offsets) around a center.
pub fn tap_index(
    (h, w): (usize, usize),
    (ci, cj): (usize, usize),
    t: usize,
    dil: usize,
) -> Option<usize> {
    let dy = (t / 3) as isize - 1;
    let dx = (t % 3) as isize - 1;
    let y = ci as isize + dy * dil as isize;
    let x = cj as isize + dx * dil as isize;
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        None
    } else {
        Some(y as usize * w + x as usize)
    }
}
