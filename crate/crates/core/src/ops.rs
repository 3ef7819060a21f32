//! Vector-matrix products, masked products and ReLU.
//!
//! Public single-vector ops take the weight matrix in its logical
//! `[d, n_K]` orientation. The batched kernels used by layers take the
//! weights transposed (`[n_K, d]`, one filter per row) so that each output
//! neuron is a contiguous dot product and an unselected neuron is a skipped
//! row.

use crate::counters::OpCounters;
use crate::error::{DsgError, Result};
use crate::select::SelectionMask;
use crate::tensor::{axpy, dot, Tensor};

fn check_vmm(x: &Tensor, w: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (d, n_k) = w.dims2(op)?;
    if x.len() != d || x.rank() != 1 {
        return Err(DsgError::dim(op, x.shape(), w.shape()));
    }
    Ok((d, n_k))
}

fn column(w: &Tensor, j: usize, d: usize, n_k: usize) -> Vec<f32> {
    let data = w.data();
    (0..d).map(|i| data[i * n_k + j]).collect()
}

/// `out[j] = <x, W[:, j]>`.
pub fn vmm(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (d, n_k) = check_vmm(x, w, "vmm")?;
    let out = (0..n_k)
        .map(|j| dot(x.data(), &column(w, j, d, n_k)))
        .collect();
    Ok(Tensor::from_parts(vec![n_k], out))
}

/// Like [`vmm`] but only columns with `mask[j] != 0` are read; the rest of
/// the output is exactly `0.0`.
pub fn masked_vmm(x: &Tensor, w: &Tensor, mask: &[u8]) -> Result<Tensor> {
    masked_vmm_counted(x, w, mask, &OpCounters::new())
}

pub fn masked_vmm_counted(
    x: &Tensor,
    w: &Tensor,
    mask: &[u8],
    counters: &OpCounters,
) -> Result<Tensor> {
    let (d, n_k) = check_vmm(x, w, "masked_vmm")?;
    if mask.len() != n_k {
        return Err(DsgError::dim("masked_vmm", &[mask.len()], &[n_k]));
    }
    let mut out = vec![0.0f32; n_k];
    let mut reads = 0u64;
    for (j, o) in out.iter_mut().enumerate() {
        if mask[j] != 0 {
            *o = dot(x.data(), &column(w, j, d, n_k));
            reads += 1;
        }
    }
    OpCounters::add(&counters.column_reads, reads);
    OpCounters::add(&counters.macs_selected, reads * d as u64);
    Ok(Tensor::from_parts(vec![n_k], out))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Indicator of positivity; the subgradient at zero is zero.
pub fn relu_grad(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Dense `a · bᵀ` for `a: [r, d]`, `b_t: [n, d]` → `[r, n]`.
pub fn matmul_nt(a: &Tensor, b_t: &Tensor) -> Result<Tensor> {
    let (r, d) = a.dims2("matmul_nt")?;
    let (n, d2) = b_t.dims2("matmul_nt")?;
    if d != d2 {
        return Err(DsgError::dim("matmul_nt", a.shape(), b_t.shape()));
    }
    let mut out = vec![0.0f32; r * n];
    for i in 0..r {
        let ar = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(ar, b_t.row(j));
        }
    }
    Ok(Tensor::from_parts(vec![r, n], out))
}

/// Masked batched product: `out[i, j] = <a_i, w_t_j>` where the mask is set,
/// exact zero elsewhere. Unselected filters are never read.
pub(crate) fn masked_matmul_nt(
    a: &Tensor,
    w_t: &Tensor,
    mask: &SelectionMask,
    counters: &OpCounters,
) -> Result<Tensor> {
    let (r, d) = a.dims2("masked_matmul")?;
    let (n, d2) = w_t.dims2("masked_matmul")?;
    if d != d2 || mask.rows() != r || mask.n_k() != n {
        return Err(DsgError::dim(
            "masked_matmul",
            &[r, d, mask.rows(), mask.n_k()],
            &[r, d2, r, n],
        ));
    }
    let mut out = vec![0.0f32; r * n];
    let mut reads = 0u64;
    for i in 0..r {
        let ar = a.row(i);
        let bits = mask.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            if bits[j] != 0 {
                orow[j] = dot(ar, w_t.row(j));
                reads += 1;
            }
        }
    }
    OpCounters::add(&counters.column_reads, reads);
    OpCounters::add(&counters.macs_selected, reads * d as u64);
    Ok(Tensor::from_parts(vec![r, n], out))
}

/// `g · w_t` for `g: [r, n]`, `w_t: [n, d]` → `[r, d]`. With a mask only
/// selected entries of `g` take part and one MAC per (selected, d) pair is
/// counted; without one every entry is counted. Zero entries are skipped
/// either way, which does not change the result.
pub(crate) fn sparse_matmul_nn(
    g: &Tensor,
    w_t: &Tensor,
    mask: Option<&SelectionMask>,
    counters: &OpCounters,
) -> Result<Tensor> {
    let (r, n) = g.dims2("error_propagation")?;
    let (n2, d) = w_t.dims2("error_propagation")?;
    if n != n2 {
        return Err(DsgError::dim("error_propagation", g.shape(), w_t.shape()));
    }
    if let Some(m) = mask {
        if m.rows() != r || m.n_k() != n {
            return Err(DsgError::dim("error_propagation", &[m.rows(), m.n_k()], &[r, n]));
        }
    }
    let mut out = vec![0.0f32; r * d];
    let mut active = 0u64;
    for i in 0..r {
        let grow = g.row(i);
        let bits = mask.map(|m| m.row(i));
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            if bits.is_some_and(|b| b[j] == 0) {
                continue;
            }
            active += 1;
            let v = grow[j];
            if v != 0.0 {
                axpy(v, w_t.row(j), orow);
            }
        }
    }
    OpCounters::add(&counters.macs_backward_error, active * d as u64);
    Ok(Tensor::from_parts(vec![r, d], out))
}

/// Weight gradient `gᵀ · a` for `g: [r, n]`, `a: [r, d]` → `[n, d]`.
/// Counted densely; zero entries of `g` are skipped when executing.
pub(crate) fn weight_grad(g: &Tensor, a: &Tensor, counters: &OpCounters) -> Result<Tensor> {
    let (r, n) = g.dims2("weight_grad")?;
    let (r2, d) = a.dims2("weight_grad")?;
    if r != r2 {
        return Err(DsgError::dim("weight_grad", g.shape(), a.shape()));
    }
    let mut out = vec![0.0f32; n * d];
    for i in 0..r {
        let grow = g.row(i);
        let arow = a.row(i);
        for j in 0..n {
            if grow[j] != 0.0 {
                axpy(grow[j], arow, &mut out[j * d..(j + 1) * d]);
            }
        }
    }
    OpCounters::add(&counters.macs_backward_weightgrad, (r * n * d) as u64);
    Ok(Tensor::from_parts(vec![n, d], out))
}
