//! Convolution lowering: im2col / col2im and layout helpers.
//!
//! Lowered rows are ordered `(sample, output_row, output_col)`; each row holds
//! the receptive field flattened channel-major (channel, kernel row, kernel
//! column), so an `[n_K, n_C, n_R, n_S]` weight tensor read as `[n_K, n_CRS]`
//! lines up with the lowered columns.

use crate::error::{DsgError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    /// Input channels.
    pub n_c: usize,
    /// Kernel height.
    pub n_r: usize,
    /// Kernel width.
    pub n_s: usize,
    /// Output channels (filters).
    pub n_k: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn new(
        n_c: usize,
        n_k: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        input_hw: (usize, usize),
    ) -> Result<Self> {
        let g = Self {
            n_c,
            n_r: kernel.0,
            n_s: kernel.1,
            n_k,
            stride,
            padding,
            in_h: input_hw.0,
            in_w: input_hw.1,
        };
        if n_c == 0 || n_k == 0 || g.n_r == 0 || g.n_s == 0 || stride == 0 {
            return Err(DsgError::param("conv", "counts and stride must be positive"));
        }
        if g.in_h + 2 * padding < g.n_r || g.in_w + 2 * padding < g.n_s {
            return Err(DsgError::param(
                "conv",
                format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    g.n_r,
                    g.n_s,
                    g.in_h + 2 * padding,
                    g.in_w + 2 * padding
                ),
            ));
        }
        Ok(g)
    }

    pub fn n_p(&self) -> usize {
        (self.in_h + 2 * self.padding - self.n_r) / self.stride + 1
    }

    pub fn n_q(&self) -> usize {
        (self.in_w + 2 * self.padding - self.n_s) / self.stride + 1
    }

    pub fn n_pq(&self) -> usize {
        self.n_p() * self.n_q()
    }

    pub fn n_crs(&self) -> usize {
        self.n_c * self.n_r * self.n_s
    }

    pub fn input_shape(&self, m: usize) -> [usize; 4] {
        [m, self.n_c, self.in_h, self.in_w]
    }

    pub fn output_shape(&self, m: usize) -> [usize; 4] {
        [m, self.n_k, self.n_p(), self.n_q()]
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        match *input.shape() {
            [m, c, h, w] if c == self.n_c && h == self.in_h && w == self.in_w && m > 0 => Ok(m),
            _ => Err(DsgError::dim(
                "im2col",
                input.shape(),
                &self.input_shape(input.shape().first().copied().unwrap_or(1)),
            )),
        }
    }

    /// For each lowered column, the input offset `(c, dy, dx)` it reads.
    fn column_offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::with_capacity(self.n_crs());
        for c in 0..self.n_c {
            for r in 0..self.n_r {
                for s in 0..self.n_s {
                    v.push((c, r, s));
                }
            }
        }
        v
    }
}

/// Lowers `[m, n_C, H, W]` into `[m * n_PQ, n_CRS]`.
pub fn im2col(input: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let m = geom.check_input(input)?;
    let (p, q, crs) = (geom.n_p(), geom.n_q(), geom.n_crs());
    let (h, w, pad, st) = (geom.in_h as isize, geom.in_w as isize, geom.padding as isize, geom.stride as isize);
    let src = input.data();
    let offsets = geom.column_offsets();
    let mut out = vec![0.0f32; m * p * q * crs];
    let sample_len = geom.n_c * geom.in_h * geom.in_w;
    for n in 0..m {
        let base = &src[n * sample_len..(n + 1) * sample_len];
        for op in 0..p {
            for oq in 0..q {
                let row = ((n * p + op) * q + oq) * crs;
                let y0 = op as isize * st - pad;
                let x0 = oq as isize * st - pad;
                for (col, &(c, r, s)) in offsets.iter().enumerate() {
                    let y = y0 + r as isize;
                    let x = x0 + s as isize;
                    if y >= 0 && y < h && x >= 0 && x < w {
                        out[row + col] = base[(c * geom.in_h + y as usize) * geom.in_w + x as usize];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![m * p * q, crs], out))
}

/// Adjoint of [`im2col`]: scatters `[m * n_PQ, n_CRS]` back to
/// `[m, n_C, H, W]`, summing overlapping windows. Padded offsets are dropped.
pub fn col2im(cols: &Tensor, geom: &ConvGeometry, m: usize) -> Result<Tensor> {
    let (p, q, crs) = (geom.n_p(), geom.n_q(), geom.n_crs());
    if cols.shape() != [m * p * q, crs] {
        return Err(DsgError::dim("col2im", cols.shape(), &[m * p * q, crs]));
    }
    let (h, w, pad, st) = (geom.in_h as isize, geom.in_w as isize, geom.padding as isize, geom.stride as isize);
    let offsets = geom.column_offsets();
    let sample_len = geom.n_c * geom.in_h * geom.in_w;
    let mut out = vec![0.0f32; m * sample_len];
    let src = cols.data();
    for n in 0..m {
        let base = &mut out[n * sample_len..(n + 1) * sample_len];
        for op in 0..p {
            for oq in 0..q {
                let row = ((n * p + op) * q + oq) * crs;
                let y0 = op as isize * st - pad;
                let x0 = oq as isize * st - pad;
                for (col, &(c, r, s)) in offsets.iter().enumerate() {
                    let y = y0 + r as isize;
                    let x = x0 + s as isize;
                    if y >= 0 && y < h && x >= 0 && x < w {
                        base[(c * geom.in_h + y as usize) * geom.in_w + x as usize] += src[row + col];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(geom.input_shape(m).to_vec(), out))
}

/// `[m * spatial, channels]` rows into `[m, channels, p, q]`.
pub fn rows_to_nchw(rows: &Tensor, m: usize, p: usize, q: usize) -> Result<Tensor> {
    let (r, k) = rows.dims2("rows_to_nchw")?;
    if r != m * p * q {
        return Err(DsgError::dim("rows_to_nchw", rows.shape(), &[m * p * q, k]));
    }
    let pq = p * q;
    let src = rows.data();
    let mut out = vec![0.0f32; r * k];
    for n in 0..m {
        for s in 0..pq {
            let row = &src[(n * pq + s) * k..(n * pq + s + 1) * k];
            for (c, &v) in row.iter().enumerate() {
                out[(n * k + c) * pq + s] = v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, k, p, q], out))
}

/// Inverse of [`rows_to_nchw`].
pub fn nchw_to_rows(t: &Tensor) -> Result<Tensor> {
    let [m, k, p, q] = match *t.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(DsgError::dim("nchw_to_rows", t.shape(), &[0, 0, 0, 0])),
    };
    let pq = p * q;
    let src = t.data();
    let mut out = vec![0.0f32; t.len()];
    for n in 0..m {
        for c in 0..k {
            for s in 0..pq {
                out[(n * pq + s) * k + c] = src[(n * k + c) * pq + s];
            }
        }
    }
    Ok(Tensor::from_parts(vec![m * pq, k], out))
}
