//! Dense small-matrix kernels: skew-symmetric construction, the matrix
//! exponential and its Fréchet derivative, commutator residuals, and
//! block-diagonal assembly.
//!
//! Everything here operates on heap-backed row-major `f64` storage. The
//! matrices that flow through the rotation path are tiny (block order
//! b ≤ 16, assembled orders ≤ a few hundred), so naive O(n³) products are
//! the right tool and no BLAS is involved.
//!
//! The exponential uses scaling-and-squaring around a truncated Taylor
//! core: the argument is halved until its Frobenius norm is at most 0.5,
//! the series is summed until the next term falls below
//! [`EXPM_SERIES_TOL`] relative to the running sum, and the result is
//! repeatedly squared. For 2x2 skew blocks the closed-form planar rotation
//! is used instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Series truncation tolerance for the exponential core (relative).
pub const EXPM_SERIES_TOL: f64 = 1e-13;

/// Norm threshold below which the Taylor core is applied directly.
const EXPM_THETA: f64 = 0.5;

/// Hard cap on the number of series terms; the norm is at most
/// `EXPM_THETA` when the series runs, so this is never reached in
/// practice (term 16 is already ~1e-19 relative).
const EXPM_MAX_TERMS: usize = 40;

/// Inputs with Frobenius norm beyond this are rejected rather than
/// scaled by an absurd power of two.
const EXPM_NORM_LIMIT: f64 = 1e6;

// ---------------------------------------------------------------------------
// SquareMatrix
// ---------------------------------------------------------------------------

/// A dense square matrix with row-major storage and finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    order: usize,
    entries: Vec<f64>,
}

impl SquareMatrix {
    /// Builds a matrix from row-major entries; `entries.len()` must be a
    /// perfect square and every value finite.
    pub fn new(order: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != order * order {
            return Err(Error::NonSquare {
                rows: order,
                cols: entries.len().checked_div(order).unwrap_or(0),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SquareMatrix entries"));
        }
        Ok(Self { order, entries })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let order = rows.len();
        let mut entries = Vec::with_capacity(order * order);
        for row in rows {
            if row.len() != order {
                return Err(Error::NonSquare {
                    rows: order,
                    cols: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::new(order, entries)
    }

    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            entries: vec![0.0; order * order],
        }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order);
        for i in 0..order {
            m.entries[i * order + i] = 1.0;
        }
        m
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.order + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.entries[row * self.order + col] = value;
    }

    pub fn transpose(&self) -> Self {
        let n = self.order;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.entries[j * n + i] = self.entries[i * n + j];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.order != rhs.order {
            return Err(Error::DimensionMismatch(format!(
                "matmul of order {} with order {}",
                self.order, rhs.order
            )));
        }
        let n = self.order;
        let mut out = Self::zeros(n);
        mat_mul_raw(&self.entries, &rhs.entries, &mut out.entries, n);
        Ok(out)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        if self.order != rhs.order {
            return Err(Error::DimensionMismatch(format!(
                "add of order {} with order {}",
                self.order, rhs.order
            )));
        }
        let mut out = self.clone();
        for (o, r) in out.entries.iter_mut().zip(&rhs.entries) {
            *o += r;
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.order != rhs.order {
            return Err(Error::DimensionMismatch(format!(
                "sub of order {} with order {}",
                self.order, rhs.order
            )));
        }
        let mut out = self.clone();
        for (o, r) in out.entries.iter_mut().zip(&rhs.entries) {
            *o -= r;
        }
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.entries {
            *v *= factor;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `tr(selfᵀ · rhs)`.
    pub fn frobenius_dot(&self, rhs: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&rhs.entries)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Determinant via LU decomposition with partial pivoting.
    pub fn det(&self) -> f64 {
        let n = self.order;
        if n == 0 {
            return 1.0;
        }
        let mut lu = self.entries.clone();
        let mut sign = 1.0;
        for col in 0..n {
            let mut pivot_row = col;
            let mut pivot_val = lu[col * n + col].abs();
            for row in col + 1..n {
                let v = lu[row * n + col].abs();
                if v > pivot_val {
                    pivot_val = v;
                    pivot_row = row;
                }
            }
            if pivot_val == 0.0 {
                return 0.0;
            }
            if pivot_row != col {
                for k in 0..n {
                    lu.swap(col * n + k, pivot_row * n + k);
                }
                sign = -sign;
            }
            let pivot = lu[col * n + col];
            for row in col + 1..n {
                let factor = lu[row * n + col] / pivot;
                lu[row * n + col] = factor;
                for k in col + 1..n {
                    lu[row * n + k] -= factor * lu[col * n + k];
                }
            }
        }
        let mut det = sign;
        for i in 0..n {
            det *= lu[i * n + i];
        }
        det
    }
}

// ---------------------------------------------------------------------------
// SkewBlock
// ---------------------------------------------------------------------------

/// A b×b skew-symmetric matrix, the atomic generator unit of an angle
/// matrix. Skew-symmetry is exact by construction (`P - Pᵀ` or scalar
/// multiples thereof), not merely within tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewBlock {
    order: usize,
    entries: Vec<f64>,
}

impl SkewBlock {
    /// Validates skew-symmetry entrywise: `entries[i][j] == -entries[j][i]`
    /// bitwise (which forces a zero diagonal).
    pub fn new(order: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != order * order {
            return Err(Error::NonSquare {
                rows: order,
                cols: entries.len().checked_div(order).unwrap_or(0),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SkewBlock entries"));
        }
        for i in 0..order {
            for j in 0..=i {
                let a = entries[i * order + j];
                let b = entries[j * order + i];
                if a != -b && !(a == 0.0 && b == 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "entries ({i},{j}) and ({j},{i}) are not antisymmetric: {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { order, entries })
    }

    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            entries: vec![0.0; order * order],
        }
    }

    /// The planar generator [[0, -1], [1, 0]].
    pub fn planar() -> Self {
        Self {
            order: 2,
            entries: vec![0.0, -1.0, 1.0, 0.0],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.order + col]
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.entries {
            *v *= factor;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|v| *v == 0.0)
    }

    pub fn as_square(&self) -> SquareMatrix {
        SquareMatrix {
            order: self.order,
            entries: self.entries.clone(),
        }
    }
}

/// Projects an arbitrary square parameter matrix onto the skew-symmetric
/// part: `P - Pᵀ`. Antisymmetry is exact because opposite entries are the
/// same two operands subtracted in opposite order.
pub fn skew_from_param(p: &SquareMatrix) -> SkewBlock {
    let n = p.order;
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            entries[i * n + j] = p.entries[i * n + j] - p.entries[j * n + i];
        }
    }
    SkewBlock { order: n, entries }
}

// ---------------------------------------------------------------------------
// RotationMatrix
// ---------------------------------------------------------------------------

/// An element of the special orthogonal group: `RᵀR = I` within 1e-10
/// (Frobenius) and `det R = 1` within 1e-8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix {
    matrix: SquareMatrix,
}

/// Orthogonality tolerance accepted by [`RotationMatrix::try_new`].
pub const ROTATION_ORTHO_TOL: f64 = 1e-10;

/// Determinant tolerance accepted by [`RotationMatrix::try_new`].
pub const ROTATION_DET_TOL: f64 = 1e-8;

impl RotationMatrix {
    /// Validates the SO(n) membership residuals before wrapping.
    pub fn try_new(matrix: SquareMatrix) -> Result<Self> {
        let r = Self { matrix };
        let ortho = r.orthogonality_residual();
        if ortho > ROTATION_ORTHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "not orthogonal: ||RᵀR - I||_F = {ortho:.3e}"
            )));
        }
        let det = r.matrix.det();
        if (det - 1.0).abs() > ROTATION_DET_TOL {
            return Err(Error::InvalidArgument(format!(
                "determinant {det} is not 1"
            )));
        }
        Ok(r)
    }

    /// Wraps a matrix that is orthogonal by construction (e.g. the output
    /// of [`expm_skew`]); skips the membership check.
    pub(crate) fn from_raw(matrix: SquareMatrix) -> Self {
        Self { matrix }
    }

    pub fn identity(order: usize) -> Self {
        Self {
            matrix: SquareMatrix::identity(order),
        }
    }

    pub fn order(&self) -> usize {
        self.matrix.order
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> SquareMatrix {
        self.matrix
    }

    pub fn transpose(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
        }
    }

    /// `||RᵀR - I||_F`.
    pub fn orthogonality_residual(&self) -> f64 {
        let n = self.matrix.order;
        let gram = self
            .matrix
            .transpose()
            .matmul(&self.matrix)
            .expect("same order");
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                let d = gram.get(i, j) - target;
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    pub fn det(&self) -> f64 {
        self.matrix.det()
    }

    /// Applies the rotation to a vector: `out = R · v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.matrix.order;
        if v.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} against rotation of order {n}",
                v.len()
            )));
        }
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.matrix.entries[i * n + j] * v[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Raw kernels and the expm workspace
// ---------------------------------------------------------------------------

#[inline]
fn mat_mul_raw(a: &[f64], b: &[f64], out: &mut [f64], n: usize) {
    out.fill(0.0);
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn frob_raw(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Reusable buffers for the exponential core, so hot loops (one expm per
/// token per block) do not allocate.
#[derive(Debug, Default)]
pub struct ExpmWorkspace {
    scaled: Vec<f64>,
    term: Vec<f64>,
    tmp: Vec<f64>,
}

impl ExpmWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn reserve(&mut self, n2: usize) {
        self.scaled.resize(n2, 0.0);
        self.term.resize(n2, 0.0);
        self.tmp.resize(n2, 0.0);
    }
}

/// Scaling-and-squaring exponential over raw row-major storage. `out` must
/// hold `n*n` entries. Returns the input norm on range failure.
///
/// The norm limit only applies when `enforce_limit` is set: a general
/// matrix with a large norm can overflow the exponential, but a skew
/// generator cannot (its exponential is orthogonal at any scale), so the
/// skew path runs unrestricted and merely pays more squarings.
fn expm_raw(
    ws: &mut ExpmWorkspace,
    a: &[f64],
    n: usize,
    out: &mut [f64],
    enforce_limit: bool,
) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(out.len(), n * n);

    let norm = frob_raw(a);
    if !norm.is_finite() || (enforce_limit && norm > EXPM_NORM_LIMIT) {
        return Err(Error::ExpRange { norm });
    }
    if norm == 0.0 {
        out.fill(0.0);
        for i in 0..n {
            out[i * n + i] = 1.0;
        }
        return Ok(());
    }

    let squarings = if norm > EXPM_THETA {
        (norm / EXPM_THETA).log2().ceil() as u32
    } else {
        0
    };
    let factor = 0.5f64.powi(squarings as i32);

    ws.reserve(n * n);
    for (s, v) in ws.scaled.iter_mut().zip(a) {
        *s = v * factor;
    }

    // Taylor core: out = I + A + A²/2! + ... until the next term is
    // negligible relative to the accumulated sum.
    out.fill(0.0);
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    ws.term.copy_from_slice(&ws.scaled);
    let mut k = 1usize;
    loop {
        for (o, t) in out.iter_mut().zip(&ws.term) {
            *o += t;
        }
        let term_norm = frob_raw(&ws.term);
        let sum_norm = frob_raw(out);
        if term_norm <= EXPM_SERIES_TOL * sum_norm || k >= EXPM_MAX_TERMS {
            break;
        }
        k += 1;
        mat_mul_raw(&ws.term, &ws.scaled, &mut ws.tmp, n);
        let inv_k = 1.0 / k as f64;
        for (t, s) in ws.term.iter_mut().zip(&ws.tmp) {
            *t = s * inv_k;
        }
    }

    for _ in 0..squarings {
        ws.tmp.copy_from_slice(out);
        mat_mul_raw(&ws.tmp, &ws.tmp, out, n);
    }

    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::ExpRange { norm });
    }
    Ok(())
}

/// Exponential of a scaled skew block written into `out` (row-major,
/// `order*order` entries). The 2x2 case short-circuits to the closed-form
/// planar rotation; the zero generator yields the exact identity.
pub fn expm_skew_into(
    ws: &mut ExpmWorkspace,
    entries: &[f64],
    order: usize,
    scale: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(entries.len(), order * order);
    debug_assert_eq!(out.len(), order * order);
    if order == 2 {
        let alpha = scale * entries[2];
        let (sin, cos) = alpha.sin_cos();
        out[0] = cos;
        out[1] = -sin;
        out[2] = sin;
        out[3] = cos;
        return;
    }
    ws.reserve(order * order);
    // Scale into tmp first so expm_raw sees the final generator.
    let mut scaled = vec![0.0; order * order];
    for (s, v) in scaled.iter_mut().zip(entries) {
        *s = scale * v;
    }
    expm_raw(ws, &scaled, order, out, false).expect("generator entries must be finite");
}

/// `exp(scale · B)` for a skew-symmetric block. The output is orthogonal
/// with determinant 1 up to the series tolerance.
pub fn expm_skew(block: &SkewBlock, scale: f64) -> RotationMatrix {
    let n = block.order;
    let mut out = vec![0.0; n * n];
    let mut ws = ExpmWorkspace::new();
    expm_skew_into(&mut ws, &block.entries, n, scale, &mut out);
    RotationMatrix::from_raw(SquareMatrix {
        order: n,
        entries: out,
    })
}

/// `exp(M)` for a general square matrix. Needed because the Fréchet
/// augmented matrix is not skew-symmetric. Extreme norms yield
/// [`Error::ExpRange`].
pub fn expm_general(m: &SquareMatrix) -> Result<SquareMatrix> {
    let n = m.order;
    let mut out = vec![0.0; n * n];
    let mut ws = ExpmWorkspace::new();
    expm_raw(&mut ws, &m.entries, n, &mut out, true)?;
    Ok(SquareMatrix {
        order: n,
        entries: out,
    })
}

/// Returns `(exp(M), L(M, E))` where `L` is the Fréchet derivative of the
/// exponential at `M` in direction `E`, read off the upper-right block of
/// `exp([[M, E], [0, M]])`.
///
/// The direction is normalized before augmentation so that a large `E`
/// does not force extra scaling steps; `L` is linear in `E`, so the result
/// is rescaled afterwards.
pub fn expm_frechet(m: &SquareMatrix, e: &SquareMatrix) -> Result<(SquareMatrix, SquareMatrix)> {
    if m.order != e.order {
        return Err(Error::DimensionMismatch(format!(
            "Fréchet direction of order {} against base point of order {}",
            e.order, m.order
        )));
    }
    let n = m.order;
    let e_norm = e.frobenius_norm();
    let e_scale = if e_norm > 0.0 { 1.0 / e_norm } else { 0.0 };

    let big = 2 * n;
    let mut aug = vec![0.0; big * big];
    for i in 0..n {
        for j in 0..n {
            aug[i * big + j] = m.entries[i * n + j];
            aug[i * big + n + j] = e.entries[i * n + j] * e_scale;
            aug[(n + i) * big + n + j] = m.entries[i * n + j];
        }
    }

    let mut out = vec![0.0; big * big];
    let mut ws = ExpmWorkspace::new();
    expm_raw(&mut ws, &aug, big, &mut out, true)?;

    let mut exp_m = SquareMatrix::zeros(n);
    let mut frechet = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            exp_m.entries[i * n + j] = out[i * big + j];
            frechet.entries[i * n + j] = out[i * big + n + j] * e_norm;
        }
    }
    Ok((exp_m, frechet))
}

/// `||AB - BA||_F`, the commutativity residual of two equal-order matrices.
pub fn commutator_residual(a: &SquareMatrix, b: &SquareMatrix) -> Result<f64> {
    if a.order != b.order {
        return Err(Error::DimensionMismatch(format!(
            "commutator of order {} with order {}",
            a.order, b.order
        )));
    }
    let ab = a.matmul(b)?;
    let ba = b.matmul(a)?;
    Ok(ab.sub(&ba)?.frobenius_norm())
}

/// Assembles `diag(exp(s₁B₁), ..., exp(s_mB_m))` as a dense rotation of
/// the combined order. The attention path applies rotations block by block
/// and never calls this; it exists for verification against the dense
/// exponential of the full generator.
pub fn block_diag_expm(blocks: &[SkewBlock], scales: &[f64]) -> Result<RotationMatrix> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("empty block list".into()));
    }
    if blocks.len() != scales.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} blocks against {} scales",
            blocks.len(),
            scales.len()
        )));
    }
    let b = blocks[0].order;
    if blocks.iter().any(|blk| blk.order != b) {
        return Err(Error::DimensionMismatch(
            "blocks must share one order".into(),
        ));
    }
    let total = b * blocks.len();
    let mut full = SquareMatrix::zeros(total);
    let mut ws = ExpmWorkspace::new();
    let mut local = vec![0.0; b * b];
    for (idx, (blk, &s)) in blocks.iter().zip(scales).enumerate() {
        expm_skew_into(&mut ws, &blk.entries, b, s, &mut local);
        let base = idx * b;
        for i in 0..b {
            for j in 0..b {
                full.entries[(base + i) * total + (base + j)] = local[i * b + j];
            }
        }
    }
    Ok(RotationMatrix::from_raw(full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_square(order: usize, rng: &mut ChaCha8Rng) -> SquareMatrix {
        let entries = (0..order * order)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        SquareMatrix::new(order, entries).unwrap()
    }

    fn random_skew(order: usize, rng: &mut ChaCha8Rng) -> SkewBlock {
        skew_from_param(&random_square(order, rng))
    }

    /// Brute-force Taylor summation, the independent oracle for the
    /// scaling-and-squaring implementation.
    fn expm_taylor_oracle(m: &SquareMatrix, terms: usize) -> SquareMatrix {
        let n = m.order();
        let mut acc = SquareMatrix::identity(n);
        let mut term = SquareMatrix::identity(n);
        for k in 1..=terms {
            term = term.matmul(m).unwrap().scale(1.0 / k as f64);
            acc = acc.add(&term).unwrap();
        }
        acc
    }

    fn frob_diff(a: &SquareMatrix, b: &SquareMatrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm()
    }

    #[test]
    fn skew_from_symmetric_input_is_zero() {
        let p = SquareMatrix::identity(2);
        let b = skew_from_param(&p);
        assert!(b.is_zero());
    }

    #[test]
    fn skew_from_param_direct_arithmetic() {
        let p = SquareMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = skew_from_param(&p);
        assert_eq!(b.entries(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn skew_from_param_is_exactly_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random_skew(5, &mut rng);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(b.get(i, j), -b.get(j, i));
            }
        }
        // And the constructor accepts its own output.
        SkewBlock::new(5, b.entries().to_vec()).unwrap();
    }

    #[test]
    fn skew_constructor_rejects_asymmetric_entries() {
        assert!(SkewBlock::new(2, vec![0.0, 1.0, 1.0, 0.0]).is_err());
        assert!(SkewBlock::new(2, vec![0.1, -1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn square_constructor_rejects_nonfinite_and_nonsquare() {
        assert!(SquareMatrix::new(2, vec![0.0; 3]).is_err());
        assert!(SquareMatrix::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn expm_skew_planar_quarter_turn() {
        let b = SkewBlock::planar();
        let r = expm_skew(&b, std::f64::consts::FRAC_PI_2);
        let expected = [0.0, -1.0, 1.0, 0.0];
        for (got, want) in r.matrix().entries().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn expm_skew_zero_generator_is_exact_identity() {
        for order in [2usize, 3, 8] {
            let r = expm_skew(&SkewBlock::zeros(order), 3.7);
            assert_eq!(
                r.matrix().entries(),
                SquareMatrix::identity(order).entries()
            );
        }
    }

    #[test]
    fn expm_skew_matches_taylor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let b = random_skew(8, &mut rng);
        let r = expm_skew(&b, 0.7);
        let oracle = expm_taylor_oracle(&b.as_square().scale(0.7), 30);
        assert!(frob_diff(r.matrix(), &oracle) < 1e-11);
    }

    #[test]
    fn expm_general_diagonal() {
        let m = SquareMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        let e = expm_general(&m).unwrap();
        assert!((e.get(0, 0) - 1f64.exp()).abs() < 1e-12);
        assert!((e.get(1, 1) - 2f64.exp()).abs() < 1e-11);
        assert_eq!(e.get(0, 1), 0.0);
        assert_eq!(e.get(1, 0), 0.0);
    }

    #[test]
    fn expm_general_zero_is_identity() {
        let e = expm_general(&SquareMatrix::zeros(4)).unwrap();
        assert_eq!(e.entries(), SquareMatrix::identity(4).entries());
    }

    #[test]
    fn expm_general_nilpotent_terminates() {
        let m = SquareMatrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        let e = expm_general(&m).unwrap();
        let expected = [1.0, 1.0, 0.0, 1.0];
        for (got, want) in e.entries().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn expm_skew_survives_extreme_scales() {
        // No range limit on the skew path: the result is orthogonal at any
        // scale, it just costs more squarings.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let b = random_skew(4, &mut rng);
        let r = expm_skew(&b, 1e9);
        assert!(r.matrix().entries().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn expm_general_rejects_extreme_norm() {
        let m = SquareMatrix::from_rows(&[&[1e8, 0.0], &[0.0, 1e8]]).unwrap();
        assert!(matches!(expm_general(&m), Err(Error::ExpRange { .. })));
    }

    #[test]
    fn expm_general_relative_accuracy_at_moderate_norm() {
        // diag(20, -20) has a closed form; relative accuracy 1e-12.
        let m = SquareMatrix::from_rows(&[&[20.0, 0.0], &[0.0, -20.0]]).unwrap();
        let e = expm_general(&m).unwrap();
        let rel = (e.get(0, 0) - 20f64.exp()).abs() / 20f64.exp();
        assert!(rel < 1e-12, "relative error {rel:.3e}");
    }

    #[test]
    fn frechet_zero_direction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_square(3, &mut rng);
        let (_, l) = expm_frechet(&m, &SquareMatrix::zeros(3)).unwrap();
        assert_eq!(l.entries(), SquareMatrix::zeros(3).entries());
    }

    #[test]
    fn frechet_at_zero_base_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_square(3, &mut rng);
        let (exp_m, l) = expm_frechet(&SquareMatrix::zeros(3), &e).unwrap();
        assert!(frob_diff(&exp_m, &SquareMatrix::identity(3)) < 1e-14);
        assert!(frob_diff(&l, &e) < 1e-12);
    }

    #[test]
    fn frechet_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_square(3, &mut rng);
        let e = random_square(3, &mut rng);
        let (_, l) = expm_frechet(&m, &e).unwrap();

        let h = 1e-5;
        let plus = expm_general(&m.add(&e.scale(h)).unwrap()).unwrap();
        let minus = expm_general(&m.sub(&e.scale(h)).unwrap()).unwrap();
        let fd = plus.sub(&minus).unwrap().scale(1.0 / (2.0 * h));
        let rel = frob_diff(&l, &fd) / fd.frobenius_norm();
        assert!(rel < 1e-6, "relative error {rel:.3e}");
    }

    #[test]
    fn frechet_rejects_order_mismatch() {
        let m = SquareMatrix::zeros(3);
        let e = SquareMatrix::zeros(2);
        assert!(expm_frechet(&m, &e).is_err());
    }

    #[test]
    fn frechet_is_linear_in_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_square(4, &mut rng);
        let e1 = random_square(4, &mut rng);
        let e2 = random_square(4, &mut rng);
        let (a, b) = (1.7, -0.4);
        let combo = e1.scale(a).add(&e2.scale(b)).unwrap();
        let (_, l_combo) = expm_frechet(&m, &combo).unwrap();
        let (_, l1) = expm_frechet(&m, &e1).unwrap();
        let (_, l2) = expm_frechet(&m, &e2).unwrap();
        let lin = l1.scale(a).add(&l2.scale(b)).unwrap();
        assert!(frob_diff(&l_combo, &lin) < 1e-10);
    }

    #[test]
    fn commutator_of_scalar_multiples_is_zero() {
        let j = SkewBlock::planar().as_square();
        let r = commutator_residual(&j, &j.scale(2.0)).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn commutator_with_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_square(4, &mut rng);
        let r = commutator_residual(&SquareMatrix::identity(4), &b).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn commutator_of_distinct_rotation_generators_is_positive() {
        let a = SquareMatrix::from_rows(&[&[0.0, -1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]])
            .unwrap();
        let b = SquareMatrix::from_rows(&[&[0.0, 0.0, -1.0], &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]])
            .unwrap();
        // Direct 3x3 multiplication: AB - BA = [[0,0,0],[0,0,-1],[0,1,0]]
        // is itself a rotation generator, Frobenius norm sqrt(2).
        let r = commutator_residual(&a, &b).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn commutator_rejects_order_mismatch() {
        let a = SquareMatrix::zeros(2);
        let b = SquareMatrix::zeros(3);
        assert!(commutator_residual(&a, &b).is_err());
    }

    #[test]
    fn block_diag_single_block_reduces_to_expm_skew() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let blk = random_skew(4, &mut rng);
        let assembled = block_diag_expm(std::slice::from_ref(&blk), &[0.9]).unwrap();
        let single = expm_skew(&blk, 0.9);
        assert_eq!(assembled.matrix().entries(), single.matrix().entries());
    }

    #[test]
    fn block_diag_zero_blocks_give_identity() {
        let blocks = vec![SkewBlock::zeros(3), SkewBlock::zeros(3)];
        let r = block_diag_expm(&blocks, &[1.0, 2.0]).unwrap();
        assert_eq!(r.matrix().entries(), SquareMatrix::identity(6).entries());
    }

    #[test]
    fn block_diag_matches_dense_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let blocks = vec![random_skew(2, &mut rng), random_skew(2, &mut rng)];
        let scales = [0.8, -1.3];
        let assembled = block_diag_expm(&blocks, &scales).unwrap();

        let mut generator = SquareMatrix::zeros(4);
        for (idx, (blk, s)) in blocks.iter().zip(scales).enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    generator.set(idx * 2 + i, idx * 2 + j, s * blk.get(i, j));
                }
            }
        }
        let dense = expm_general(&generator).unwrap();
        assert!(frob_diff(assembled.matrix(), &dense) < 1e-10);
    }

    #[test]
    fn block_diag_rejects_empty_list() {
        assert!(block_diag_expm(&[], &[]).is_err());
    }

    #[test]
    fn rotation_try_new_validates_membership() {
        assert!(RotationMatrix::try_new(SquareMatrix::identity(3)).is_ok());
        let reflection = SquareMatrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]).unwrap();
        assert!(RotationMatrix::try_new(reflection).is_err());
        let stretched = SquareMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.5]]).unwrap();
        assert!(RotationMatrix::try_new(stretched).is_err());
    }

    #[test]
    fn det_of_known_matrices() {
        let m = SquareMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert!((m.det() + 2.0).abs() < 1e-14);
        assert_eq!(SquareMatrix::identity(5).det(), 1.0);
        assert_eq!(SquareMatrix::zeros(3).det(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// exp of a skew generator lands in SO(b) for every block size and
        /// generator norm up to 50.
        #[test]
        fn prop_expm_skew_is_special_orthogonal(
            seed in 0u64..1_000,
            order_idx in 0usize..5,
            scale in -8.0f64..8.0,
        ) {
            let order = [2usize, 3, 4, 8, 16][order_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_skew(order, &mut rng);
            // Keep ||scale * B||_F inside the tested envelope.
            let norm = b.frobenius_norm();
            let scale = if norm * scale.abs() > 50.0 { 50.0 / norm } else { scale };
            let r = expm_skew(&b, scale);
            prop_assert!(r.orthogonality_residual() <= 1e-10);
            prop_assert!((r.det() - 1.0).abs() <= 1e-8);
        }

        /// Negating the scale transposes the rotation.
        #[test]
        fn prop_expm_skew_negative_scale_is_transpose(
            seed in 0u64..1_000,
            order_idx in 0usize..4,
            scale in -4.0f64..4.0,
        ) {
            let order = [2usize, 3, 4, 8][order_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_skew(order, &mut rng);
            let fwd = expm_skew(&b, scale);
            let back = expm_skew(&b, -scale);
            let diff = back.matrix().sub(&fwd.matrix().transpose()).unwrap();
            prop_assert!(diff.frobenius_norm() <= 1e-11);
        }

        /// All 2x2 skew blocks commute: that space is one-dimensional.
        #[test]
        fn prop_planar_skew_blocks_commute(seed in 0u64..2_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_skew(2, &mut rng);
            let b = random_skew(2, &mut rng);
            let res = commutator_residual(&a.as_square(), &b.as_square()).unwrap();
            let bound = 1e-15
                * a.frobenius_norm().max(b.frobenius_norm()).powi(2);
            prop_assert!(res <= bound);
        }

        /// Block-diagonal assembly agrees with the dense exponential of
        /// the assembled generator for total order up to 32.
        #[test]
        fn prop_block_diag_matches_dense(
            seed in 0u64..500,
            order_idx in 0usize..3,
            count in 1usize..5,
        ) {
            let order = [2usize, 4, 8][order_idx];
            prop_assume!(order * count <= 32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks: Vec<_> = (0..count).map(|_| random_skew(order, &mut rng)).collect();
            let scales: Vec<f64> = (0..count).map(|_| rng.random_range(-2.0..2.0)).collect();
            let assembled = block_diag_expm(&blocks, &scales).unwrap();

            let total = order * count;
            let mut generator = SquareMatrix::zeros(total);
            for (idx, (blk, s)) in blocks.iter().zip(&scales).enumerate() {
                for i in 0..order {
                    for j in 0..order {
                        generator.set(idx * order + i, idx * order + j, s * blk.get(i, j));
                    }
                }
            }
            let dense = expm_general(&generator).unwrap();
            let diff = assembled.matrix().sub(&dense).unwrap().frobenius_norm();
            prop_assert!(diff <= 1e-10);
        }
    }
}
