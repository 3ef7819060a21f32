//! Sparse ternary random projections.
//!
//! A [`ProjectionMatrix`] `R` is `k × d` with i.i.d. entries
//! `+√s` (prob. `1/2s`), `0` (prob. `1 − 1/s`) and `−√s` (prob. `1/2s`).
//! A vector is mapped as `f(v) = R·v / √k`. Since every nonzero entry has the
//! same magnitude, application is a sum of additions and subtractions
//! followed by one scale by `√s/√k`.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`, so a matrix
//! is fully determined by `(k, d, s, seed)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::counters::OpCounters;
use crate::error::{DsgError, Result};
use crate::tensor::Tensor;

/// Default sparsity parameter (two thirds of the entries are zero).
pub const DEFAULT_S: u32 = 3;

const SIDECAR_MAGIC: &[u8; 4] = b"DSGR";

/// Reduced dimension `k = floor(4·ln(n) / (ε²/2 − ε³/3))`.
pub fn reduced_dim(epsilon: f64, n_points: usize) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(DsgError::param("epsilon", format!("{epsilon} not in (0, 1)")));
    }
    if n_points < 2 {
        return Err(DsgError::param("n_points", format!("{n_points} < 2")));
    }
    let denom = epsilon * epsilon / 2.0 - epsilon.powi(3) / 3.0;
    let k = (4.0 * (n_points as f64).ln() / denom).floor() as usize;
    Ok(k.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Seeded(u64),
    /// `√d · I`, an exact embedding used for dense-degeneration checks.
    ScaledIdentity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    k: usize,
    d: usize,
    s: u32,
    origin: Origin,
    /// Row-major `k × d` signs in `{-1, 0, 1}`; the value is `sign · √s`.
    signs: Vec<i8>,
    plus: Vec<Vec<u32>>,
    minus: Vec<Vec<u32>>,
}

/// Generates a seeded sparse projection from `d` to `k` dimensions.
/// `k` larger than `d` is clamped to `d`.
pub fn make_projection(d: usize, k: usize, s: u32, seed: u64) -> Result<ProjectionMatrix> {
    if s < 1 {
        return Err(DsgError::param("s", "sparsity parameter must be >= 1"));
    }
    if d == 0 || k == 0 {
        return Err(DsgError::param("k", "dimensions must be positive"));
    }
    let k = k.min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = 2 * s;
    let signs = (0..k * d)
        .map(|_| match rng.gen_range(0..span) {
            0 => 1i8,
            1 => -1i8,
            _ => 0i8,
        })
        .collect();
    Ok(ProjectionMatrix::from_signs(k, d, s, Origin::Seeded(seed), signs))
}

impl ProjectionMatrix {
    fn from_signs(k: usize, d: usize, s: u32, origin: Origin, signs: Vec<i8>) -> Self {
        let mut plus = vec![Vec::new(); k];
        let mut minus = vec![Vec::new(); k];
        for i in 0..k {
            for j in 0..d {
                match signs[i * d + j] {
                    1 => plus[i].push(j as u32),
                    -1 => minus[i].push(j as u32),
                    _ => {}
                }
            }
        }
        Self {
            k,
            d,
            s,
            origin,
            signs,
            plus,
            minus,
        }
    }

    /// `R = √d · I` (so `s = d` and `f(v) = v`).
    pub fn scaled_identity(d: usize) -> Self {
        let mut signs = vec![0i8; d * d];
        for i in 0..d {
            signs[i * d + i] = 1;
        }
        Self::from_signs(d, d, d as u32, Origin::ScaledIdentity, signs)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn s(&self) -> u32 {
        self.s
    }

    pub fn seed(&self) -> Option<u64> {
        match self.origin {
            Origin::Seeded(s) => Some(s),
            Origin::ScaledIdentity => None,
        }
    }

    /// Entry `(i, j)` as a real value.
    pub fn entry(&self, i: usize, j: usize) -> f32 {
        self.signs[i * self.d + j] as f32 * (self.s as f32).sqrt()
    }

    pub fn nnz(&self) -> usize {
        self.plus.iter().chain(&self.minus).map(Vec::len).sum()
    }

    pub fn zero_fraction(&self) -> f64 {
        1.0 - self.nnz() as f64 / self.signs.len() as f64
    }

    /// Counts of `(+√s, 0, −√s)` entries.
    pub fn entry_counts(&self) -> (usize, usize, usize) {
        let p: usize = self.plus.iter().map(Vec::len).sum();
        let m: usize = self.minus.iter().map(Vec::len).sum();
        (p, self.signs.len() - p - m, m)
    }

    fn scale(&self) -> f32 {
        ((self.s as f64).sqrt() / (self.k as f64).sqrt()) as f32
    }

    /// Writes `f(v)` into `out` (length `k`).
    fn project_into(&self, v: &[f32], out: &mut [f32]) {
        let scale = self.scale();
        for ((o, plus), minus) in out.iter_mut().zip(&self.plus).zip(&self.minus) {
            let mut acc = 0.0f32;
            for &j in plus {
                acc += v[j as usize];
            }
            for &j in minus {
                acc -= v[j as usize];
            }
            *o = acc * scale;
        }
    }

    /// `f(v) = R·v / √k`.
    pub fn project(&self, v: &Tensor) -> Result<Tensor> {
        if v.len() != self.d || v.rank() != 1 {
            return Err(DsgError::dim("project", v.shape(), &[self.d]));
        }
        let mut out = vec![0.0; self.k];
        self.project_into(v.data(), &mut out);
        Ok(Tensor::from_parts(vec![self.k], out))
    }

    /// Column-wise projection of `W: [d, n_K]` into `[k, n_K]`.
    pub fn project_matrix(&self, w: &Tensor) -> Result<Tensor> {
        let (d, n_k) = w.dims2("project_matrix")?;
        if d != self.d {
            return Err(DsgError::dim("project_matrix", w.shape(), &[self.d, n_k]));
        }
        let proj = self.project_rows(&w.transpose()?, None)?;
        proj.transpose()
    }

    /// Projects every row of `x: [rows, d]` into `[rows, k]`.
    pub fn project_rows(&self, x: &Tensor, counters: Option<&OpCounters>) -> Result<Tensor> {
        let (rows, d) = x.dims2("project_rows")?;
        if d != self.d {
            return Err(DsgError::dim("project_rows", x.shape(), &[rows, self.d]));
        }
        let k = self.k;
        let scale = self.scale();
        let mut out = vec![0.0f32; rows * k];
        let data = x.data();
        // Blocks of rows are transposed so that each index adds a contiguous
        // slice across the block. Per-row summation order matches
        // `project_into`, so results are bitwise identical.
        const BLOCK: usize = 64;
        let mut xt = vec![0.0f32; d * BLOCK];
        let mut acc = vec![0.0f32; BLOCK];
        for r0 in (0..rows).step_by(BLOCK) {
            let b = BLOCK.min(rows - r0);
            for t in 0..b {
                for (j, &v) in data[(r0 + t) * d..(r0 + t + 1) * d].iter().enumerate() {
                    xt[j * BLOCK + t] = v;
                }
            }
            for (i, (plus, minus)) in self.plus.iter().zip(&self.minus).enumerate() {
                let acc = &mut acc[..b];
                acc.fill(0.0);
                for &j in plus {
                    let col = &xt[j as usize * BLOCK..j as usize * BLOCK + b];
                    for (a, &v) in acc.iter_mut().zip(col) {
                        *a += v;
                    }
                }
                for &j in minus {
                    let col = &xt[j as usize * BLOCK..j as usize * BLOCK + b];
                    for (a, &v) in acc.iter_mut().zip(col) {
                        *a -= v;
                    }
                }
                for (t, &a) in acc.iter().enumerate() {
                    out[(r0 + t) * k + i] = a * scale;
                }
            }
        }
        if let Some(c) = counters {
            OpCounters::add(&c.sparse_adds, (rows * self.nnz()) as u64);
        }
        Ok(Tensor::from_parts(vec![rows, self.k], out))
    }

    /// Sidecar bytes: magic, `k`, `d`, `s` as LE u32, seed as LE u64.
    pub fn to_sidecar_bytes(&self) -> Result<Vec<u8>> {
        let seed = self.seed().ok_or_else(|| {
            DsgError::param("projection", "scaled identity has no seed to serialize")
        })?;
        let mut b = Vec::with_capacity(24);
        b.extend_from_slice(SIDECAR_MAGIC);
        b.extend_from_slice(&(self.k as u32).to_le_bytes());
        b.extend_from_slice(&(self.d as u32).to_le_bytes());
        b.extend_from_slice(&self.s.to_le_bytes());
        b.extend_from_slice(&seed.to_le_bytes());
        Ok(b)
    }

    pub fn from_sidecar_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != 24 {
            return Err(DsgError::Corrupt(format!("sidecar is {} bytes, expected 24", b.len())));
        }
        if &b[..4] != SIDECAR_MAGIC {
            return Err(DsgError::Corrupt("sidecar magic is not DSGR".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let (k, d, s) = (u32_at(4), u32_at(8), u32_at(12));
        let seed = u64::from_le_bytes(b[16..24].try_into().unwrap());
        make_projection(d as usize, k as usize, s, seed)
    }

    pub fn write_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_sidecar_bytes()?)?;
        Ok(())
    }

    pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_sidecar_bytes(&std::fs::read(path)?)
    }
}

/// Pairwise statistics of `<f(x), f(w)> − <x, w>`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PreservationStats {
    pub epsilon: f64,
    pub pair_count: usize,
    pub mean_error: f64,
    pub median_error: f64,
    pub mean_abs_error: f64,
    pub median_abs_error: f64,
    pub max_abs_error: f64,
    /// Fraction of pairs with `|err| <= (ε/2)(‖x‖² + ‖w‖²)`.
    pub fraction_within_bound: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Exhaustive pairwise inner-product preservation over `x_set × w_set`.
pub fn preservation_report(
    r: &ProjectionMatrix,
    x_set: &[Tensor],
    w_set: &[Tensor],
    epsilon: f64,
) -> Result<PreservationStats> {
    if x_set.is_empty() || w_set.is_empty() {
        return Err(DsgError::Empty("preservation_report"));
    }
    let fx = x_set.iter().map(|x| r.project(x)).collect::<Result<Vec<_>>>()?;
    let fw = w_set.iter().map(|w| r.project(w)).collect::<Result<Vec<_>>>()?;
    let mut errs = Vec::with_capacity(x_set.len() * w_set.len());
    let mut within = 0usize;
    for (x, px) in x_set.iter().zip(&fx) {
        let nx = dot64(x.data(), x.data());
        for (w, pw) in w_set.iter().zip(&fw) {
            let e = dot64(px.data(), pw.data()) - dot64(x.data(), w.data());
            let bound = 0.5 * epsilon * (nx + dot64(w.data(), w.data()));
            if e.abs() <= bound {
                within += 1;
            }
            errs.push(e);
        }
    }
    let n = errs.len();
    let mean_error = errs.iter().sum::<f64>() / n as f64;
    let mut abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
    errs.sort_by(f64::total_cmp);
    abs.sort_by(f64::total_cmp);
    Ok(PreservationStats {
        epsilon,
        pair_count: n,
        mean_error,
        median_error: median(&errs),
        mean_abs_error: abs.iter().sum::<f64>() / n as f64,
        median_abs_error: median(&abs),
        max_abs_error: *abs.last().unwrap(),
        fraction_within_bound: within as f64 / n as f64,
    })
}

/// Fraction of vectors `z` with `(1−ε)‖z‖² <= ‖f(z)‖² <= (1+ε)‖z‖²`.
pub fn norm_preservation_fraction(
    r: &ProjectionMatrix,
    vectors: &[Tensor],
    epsilon: f64,
) -> Result<f64> {
    if vectors.is_empty() {
        return Err(DsgError::Empty("norm_preservation_fraction"));
    }
    let mut ok = 0usize;
    for z in vectors {
        let fz = r.project(z)?;
        let n = dot64(z.data(), z.data());
        let nf = dot64(fz.data(), fz.data());
        if nf >= (1.0 - epsilon) * n && nf <= (1.0 + epsilon) * n {
            ok += 1;
        }
    }
    Ok(ok as f64 / vectors.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_dim_examples() {
        assert_eq!(reduced_dim(0.3, 128).unwrap(), 539);
        assert_eq!(reduced_dim(0.5, 256).unwrap(), 266);
        assert_eq!(reduced_dim(0.9, 512).unwrap(), 154);
        assert!(reduced_dim(0.0, 128).is_err());
        assert!(reduced_dim(1.0, 128).is_err());
        assert!(reduced_dim(-0.2, 128).is_err());
        assert!(reduced_dim(0.5, 1).is_err());
    }

    #[test]
    fn s_one_has_no_zeros() {
        let r = make_projection(50, 20, 1, 9).unwrap();
        let (p, z, m) = r.entry_counts();
        assert_eq!(z, 0);
        assert_eq!(p + m, 1000);
        for i in 0..20 {
            for j in 0..50 {
                assert_eq!(r.entry(i, j).abs(), 1.0);
            }
        }
    }

    #[test]
    fn invalid_s_rejected_and_k_clamped() {
        assert!(make_projection(4, 2, 0, 1).is_err());
        assert_eq!(make_projection(4, 9, 3, 1).unwrap().k(), 4);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_projection(4, 2, 3, 77).unwrap();
        let b = make_projection(4, 2, 3, 77).unwrap();
        assert_eq!(a, b);
        let c = make_projection(400, 20, 3, 78).unwrap();
        assert_ne!(make_projection(400, 20, 3, 77).unwrap().signs, c.signs);
    }

    #[test]
    fn entries_are_ternary() {
        let r = make_projection(64, 32, 3, 5).unwrap();
        let root = 3f32.sqrt();
        for i in 0..32 {
            for j in 0..64 {
                let e = r.entry(i, j);
                assert!(e == 0.0 || e == root || e == -root);
            }
        }
    }

    #[test]
    fn hand_projection() {
        // R = [+√3, −√3, 0], v = (1, 2, 3), k = 1 → √3 · (1 − 2) = −√3
        let r = ProjectionMatrix::from_signs(1, 3, 3, Origin::Seeded(0), vec![1, -1, 0]);
        let v = Tensor::new([3], vec![1., 2., 3.]).unwrap();
        let out = r.project(&v).unwrap();
        assert!((out.data()[0] + 3f32.sqrt()).abs() < 1e-6);
        assert!(r.project(&Tensor::zeros([4])).is_err());

        // Two columns (1,2,3) and (0,−1,4) → (−√3, √3)
        let w = Tensor::new([3, 2], vec![1., 0., 2., -1., 3., 4.]).unwrap();
        let pw = r.project_matrix(&w).unwrap();
        assert_eq!(pw.shape(), &[1, 2]);
        assert!((pw.data()[0] + 3f32.sqrt()).abs() < 1e-6);
        assert!((pw.data()[1] - 3f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn project_matrix_columns_match_project() {
        let r = make_projection(6, 3, 3, 11).unwrap();
        let w = Tensor::new([6, 2], (0..12).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        let pw = r.project_matrix(&w).unwrap();
        let wt = w.transpose().unwrap();
        for j in 0..2 {
            let col = Tensor::new([6], wt.row(j).to_vec()).unwrap();
            let pc = r.project(&col).unwrap();
            for i in 0..3 {
                assert_eq!(pw.data()[i * 2 + j].to_bits(), pc.data()[i].to_bits());
            }
        }
        assert_eq!(r.project_matrix(&Tensor::zeros([6, 2])).unwrap(), Tensor::zeros([3, 2]));
    }

    #[test]
    fn scaled_identity_is_exact() {
        let r = ProjectionMatrix::scaled_identity(5);
        let v = Tensor::new([5], vec![0.5, -1.25, 3.0, 0.0, 7.5]).unwrap();
        let pv = r.project(&v).unwrap();
        assert!(pv.max_abs_diff(&v) < 1e-6);
        let basis: Vec<Tensor> = (0..5)
            .map(|i| {
                let mut t = Tensor::zeros([5]);
                t.data_mut()[i] = 1.0;
                t
            })
            .collect();
        let st = preservation_report(&r, &basis, &basis, 0.1).unwrap();
        assert_eq!(st.pair_count, 25);
        assert!(st.max_abs_error < 1e-6);
        assert_eq!(st.fraction_within_bound, 1.0);
    }

    #[test]
    fn sidecar_roundtrip() {
        let r = make_projection(40, 12, 3, 0xDEAD_BEEF).unwrap();
        let bytes = r.to_sidecar_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DSGR");
        assert_eq!(bytes.len(), 24);
        assert_eq!(ProjectionMatrix::from_sidecar_bytes(&bytes).unwrap(), r);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ProjectionMatrix::from_sidecar_bytes(&bad).is_err());
        assert!(ProjectionMatrix::scaled_identity(3).to_sidecar_bytes().is_err());
    }

    #[test]
    fn empty_sets_rejected() {
        let r = make_projection(4, 2, 3, 1).unwrap();
        assert!(matches!(
            preservation_report(&r, &[], &[Tensor::zeros([4])], 0.5),
            Err(DsgError::Empty(_))
        ));
    }
}
