//! Rotation of query/key tensors, attention-logit computation, the
//! relative-form oracle, and exact gradients of logits with respect to the
//! angle-matrix parameters.
//!
//! Rotations are applied block-locally: for every token, head, and diagonal
//! block the per-block generator `M_j = Σᵢ xᵢ B_ij` is exponentiated and
//! multiplied against the matching b-length segment of q and k. The dense
//! per-head rotation matrix is never materialized on this path; the dense
//! route lives in [`crate::ropefamily::AngleMatrixSet::rotation`] and is
//! used for cross-checks only.
//!
//! Softmax, 1/√d scaling, and value aggregation are out of scope: the
//! positional-encoding identities are statements about the pre-softmax
//! logit `q̂ᵀk̂`.
//!
//! Gradients flow through the Fréchet derivative of the exponential rather
//! than an autodiff tape. For a cotangent `G` on a rotation block
//! `R = exp(M)`, the cotangent on the skew generator is `L(−M, G)` (the
//! adjoint of the Fréchet map at a skew base point), which is then chained
//! through `M_j = Σᵢ xᵢ B_ij` and the per-variant parameterizations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{expm_frechet, expm_skew_into, skew_from_param, ExpmWorkspace, SquareMatrix};
use crate::ropefamily::{AngleMatrixSet, Coordinate, Params};

const BATCH_MAGIC: &[u8; 4] = b"CRPE";
const BATCH_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// AttentionBatch and LogitTensor
// ---------------------------------------------------------------------------

/// Per-token query and key vectors with shape `(n, h, d/h)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBatch {
    n: usize,
    heads: usize,
    head_dim: usize,
    q: Vec<f64>,
    k: Vec<f64>,
}

impl AttentionBatch {
    pub fn new(n: usize, heads: usize, head_dim: usize, q: Vec<f64>, k: Vec<f64>) -> Result<Self> {
        let expected = n * heads * head_dim;
        if q.len() != expected || k.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "q/k of lengths {}/{} against shape ({n}, {heads}, {head_dim})",
                q.len(),
                k.len()
            )));
        }
        if q.iter().chain(&k).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention batch entries"));
        }
        Ok(Self {
            n,
            heads,
            head_dim,
            q,
            k,
        })
    }

    /// Standard-normal q and k for testing and benchmarking.
    pub fn random<R: rand::Rng + ?Sized>(
        n: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let len = n * heads * head_dim;
        let q = (0..len)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let k = (0..len)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Self::new(n, heads, head_dim, q, k).expect("gaussian entries are finite")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    fn offset(&self, token: usize, head: usize) -> usize {
        (token * self.heads + head) * self.head_dim
    }

    /// The q segment for one (token, head).
    pub fn q_vec(&self, token: usize, head: usize) -> &[f64] {
        let o = self.offset(token, head);
        &self.q[o..o + self.head_dim]
    }

    pub fn k_vec(&self, token: usize, head: usize) -> &[f64] {
        let o = self.offset(token, head);
        &self.k[o..o + self.head_dim]
    }
}

/// Pre-softmax attention logits with shape `(h, n, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTensor {
    heads: usize,
    n: usize,
    data: Vec<f64>,
}

impl LogitTensor {
    pub fn zeros(heads: usize, n: usize) -> Self {
        Self {
            heads,
            n,
            data: vec![0.0; heads * n * n],
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, head: usize, i: usize, j: usize) -> f64 {
        self.data[(head * self.n + i) * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, head: usize, i: usize, j: usize, value: f64) {
        self.data[(head * self.n + i) * self.n + j] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Frobenius norm of the difference between two logit tensors.
    pub fn frobenius_distance(&self, other: &Self) -> Result<f64> {
        if self.heads != other.heads || self.n != other.n {
            return Err(Error::DimensionMismatch(
                "logit tensors of different shapes".into(),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

// ---------------------------------------------------------------------------
// Rotation and logits
// ---------------------------------------------------------------------------

fn check_batch_against_set(batch: &AttentionBatch, set: &AngleMatrixSet) -> Result<()> {
    let dims = set.dims();
    if batch.heads != dims.heads() || batch.head_dim != dims.head_dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch shape (h={}, d/h={}) against set dims (h={}, d/h={})",
            batch.heads,
            batch.head_dim,
            dims.heads(),
            dims.head_dim()
        )));
    }
    Ok(())
}

fn check_positions(
    batch: &AttentionBatch,
    set: &AngleMatrixSet,
    positions: &[Coordinate],
) -> Result<()> {
    if positions.len() != batch.n {
        return Err(Error::DimensionMismatch(format!(
            "{} positions against {} tokens",
            positions.len(),
            batch.n
        )));
    }
    for p in positions {
        if p.len() != set.dims().axes() {
            return Err(Error::CoordinateLength {
                got: p.len(),
                expected: set.dims().axes(),
            });
        }
    }
    Ok(())
}

/// Scratch buffers for one token worth of rotation work.
struct TokenScratch {
    ws: ExpmWorkspace,
    generator: Vec<f64>,
    rotation: Vec<f64>,
    segment: Vec<f64>,
}

impl TokenScratch {
    fn new(block: usize) -> Self {
        Self {
            ws: ExpmWorkspace::new(),
            generator: vec![0.0; block * block],
            rotation: vec![0.0; block * block],
            segment: vec![0.0; block],
        }
    }
}

/// Rotates one token's q and k slices (length `heads * head_dim`) in place.
fn rotate_token(
    set: &AngleMatrixSet,
    x: &Coordinate,
    q: &mut [f64],
    k: &mut [f64],
    scratch: &mut TokenScratch,
) {
    let dims = set.dims();
    let b = dims.block();
    let head_dim = dims.head_dim();
    for head in 0..dims.heads() {
        for j in 0..dims.blocks_per_head() {
            set.accumulate_generator(x.values(), head, j, &mut scratch.generator);
            expm_skew_into(
                &mut scratch.ws,
                &scratch.generator,
                b,
                1.0,
                &mut scratch.rotation,
            );
            let start = head * head_dim + j * b;
            for seg in [&mut q[start..start + b], &mut k[start..start + b]] {
                scratch.segment.copy_from_slice(seg);
                for r in 0..b {
                    let mut acc = 0.0;
                    for c in 0..b {
                        acc += scratch.rotation[r * b + c] * scratch.segment[c];
                    }
                    seg[r] = acc;
                }
            }
        }
    }
}

/// Applies the per-token rotation `R(xₜ)` to every query and key vector,
/// block by block. The zero generator rotates by the exact identity, so a
/// zero-initialized set returns the input unchanged.
pub fn rotate_qk(
    batch: &AttentionBatch,
    set: &AngleMatrixSet,
    positions: &[Coordinate],
) -> Result<AttentionBatch> {
    check_batch_against_set(batch, set)?;
    check_positions(batch, set, positions)?;
    let mut out = batch.clone();
    let stride = batch.heads * batch.head_dim;
    let mut scratch = TokenScratch::new(set.dims().block());
    for (t, x) in positions.iter().enumerate() {
        let (qs, ks) = (
            &mut out.q[t * stride..(t + 1) * stride],
            &mut out.k[t * stride..(t + 1) * stride],
        );
        rotate_token(set, x, qs, ks, &mut scratch);
    }
    Ok(out)
}

/// Parallel variant of [`rotate_qk`]: tokens are processed on the rayon
/// pool. Each token's work is self-contained, so the result is bitwise
/// identical to the serial path regardless of partitioning.
pub fn rotate_qk_parallel(
    batch: &AttentionBatch,
    set: &AngleMatrixSet,
    positions: &[Coordinate],
) -> Result<AttentionBatch> {
    check_batch_against_set(batch, set)?;
    check_positions(batch, set, positions)?;
    let mut out = batch.clone();
    let stride = batch.heads * batch.head_dim;
    out.q
        .par_chunks_mut(stride)
        .zip(out.k.par_chunks_mut(stride))
        .zip(positions.par_iter())
        .for_each(|((qs, ks), x)| {
            let mut scratch = TokenScratch::new(set.dims().block());
            rotate_token(set, x, qs, ks, &mut scratch);
        });
    Ok(out)
}

/// Unscaled pre-softmax logits: `logits[h][i][j] = q̂ᵢ · k̂ⱼ`. The reduction
/// order over the feature dimension is a fixed ascending loop, so results
/// are bitwise reproducible.
pub fn logits(batch: &AttentionBatch) -> LogitTensor {
    let mut out = LogitTensor::zeros(batch.heads, batch.n);
    for head in 0..batch.heads {
        for i in 0..batch.n {
            let qi = batch.q_vec(i, head);
            for j in 0..batch.n {
                let kj = batch.k_vec(j, head);
                let mut acc = 0.0;
                for c in 0..batch.head_dim {
                    acc += qi[c] * kj[c];
                }
                out.set(head, i, j, acc);
            }
        }
    }
    out
}

/// The relative form `qᵀ R(y − x) k` — the g-function of the rotary
/// identity. For commuting sets this equals rotating both vectors and
/// taking the dot product; for non-commuting sets it generally does not.
pub fn relative_logit_oracle(
    q: &[f64],
    k: &[f64],
    set: &AngleMatrixSet,
    x: &Coordinate,
    y: &Coordinate,
    head: usize,
) -> Result<f64> {
    let head_dim = set.dims().head_dim();
    if q.len() != head_dim || k.len() != head_dim {
        return Err(Error::DimensionMismatch(format!(
            "q/k of lengths {}/{} against head dim {head_dim}",
            q.len(),
            k.len()
        )));
    }
    let relative = y.sub(x)?;
    let rotated_k = set.rotation(&relative, head)?.apply(k)?;
    Ok(q.iter().zip(&rotated_k).map(|(a, b)| a * b).sum())
}

// ---------------------------------------------------------------------------
// Parameter gradients
// ---------------------------------------------------------------------------

/// Gradients of `Σ upstream ⊙ logits` with respect to every trainable
/// scalar, mirroring the parameter layout of the set they were computed
/// against.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrads {
    Liere {
        p: Vec<Vec<Vec<SquareMatrix>>>,
    },
    Ap {
        p: Vec<Vec<SquareMatrix>>,
    },
    Ld {
        p: Vec<Vec<SquareMatrix>>,
        thetas: Vec<Vec<Vec<f64>>>,
    },
}

impl ParamGrads {
    /// Flattens in the canonical order of
    /// [`AngleMatrixSet::trainable_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            ParamGrads::Liere { p } => {
                for axis in p {
                    for head in axis {
                        for m in head {
                            out.extend_from_slice(m.entries());
                        }
                    }
                }
            }
            ParamGrads::Ap { p } => {
                for head in p {
                    for m in head {
                        out.extend_from_slice(m.entries());
                    }
                }
            }
            ParamGrads::Ld { p, thetas } => {
                for head in p {
                    for m in head {
                        out.extend_from_slice(m.entries());
                    }
                }
                for head in thetas {
                    for block in head {
                        out.extend_from_slice(block);
                    }
                }
            }
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradients of the scalar `Σ_{h,i,j} upstream[h][i][j] · logits[h][i][j]`
/// with respect to every trainable parameter of the set.
///
/// The chain is: logit cotangents → per-(token, block) rotation cotangents
/// `G_R = a qᵀ + c kᵀ` (with `a`, `c` the upstream-weighted rotated keys
/// and queries) → generator cotangents via the Fréchet adjoint
/// `G_M = L(−M, G_R)` → per-axis block cotangents `G_B += xᵢ G_M` → the
/// skew/partition/linear-dependence parameterizations.
pub fn logit_grad_params(
    batch: &AttentionBatch,
    set: &AngleMatrixSet,
    positions: &[Coordinate],
    upstream: &LogitTensor,
) -> Result<ParamGrads> {
    if !set.is_trainable() {
        return Err(Error::NotTrainable(set.variant().name()));
    }
    check_batch_against_set(batch, set)?;
    check_positions(batch, set, positions)?;
    if upstream.heads != batch.heads || upstream.n != batch.n {
        return Err(Error::DimensionMismatch(format!(
            "upstream of shape ({}, {n}, {n}) against batch ({}, {m}, {m})",
            upstream.heads,
            batch.heads,
            n = upstream.n,
            m = batch.n
        )));
    }

    let dims = *set.dims();
    let (b, heads, m_blocks, axes) = (
        dims.block(),
        dims.heads(),
        dims.blocks_per_head(),
        dims.axes(),
    );
    let rotated = rotate_qk(batch, set, positions)?;

    // Upstream-weighted sums over the rotated batch:
    //   a_i = Σ_j U[h,i,j] k̂_j   (cotangent of q̂_i)
    //   c_j = Σ_i U[h,i,j] q̂_i   (cotangent of k̂_j)
    let head_dim = dims.head_dim();
    let mut a = vec![0.0; batch.n * heads * head_dim];
    let mut c = vec![0.0; batch.n * heads * head_dim];
    for head in 0..heads {
        for i in 0..batch.n {
            for j in 0..batch.n {
                let u = upstream.get(head, i, j);
                if u == 0.0 {
                    continue;
                }
                let khat = rotated.k_vec(j, head);
                let qhat = rotated.q_vec(i, head);
                let ai = (i * heads + head) * head_dim;
                let cj = (j * heads + head) * head_dim;
                for idx in 0..head_dim {
                    a[ai + idx] += u * khat[idx];
                    c[cj + idx] += u * qhat[idx];
                }
            }
        }
    }

    // Accumulate block cotangents G_B[axis][head][j].
    let mut g_blocks = vec![vec![vec![SquareMatrix::zeros(b); m_blocks]; heads]; axes];
    let mut generator = vec![0.0; b * b];
    for (t, x) in positions.iter().enumerate() {
        for head in 0..heads {
            let q = batch.q_vec(t, head);
            let k = batch.k_vec(t, head);
            let base = (t * heads + head) * head_dim;
            for j in 0..m_blocks {
                set.accumulate_generator(x.values(), head, j, &mut generator);
                let seg = j * b;
                // Rotation cotangent for this block: a qᵀ + c kᵀ over the
                // original (pre-rotation) segments.
                let mut g_r = SquareMatrix::zeros(b);
                for r in 0..b {
                    for s in 0..b {
                        let v = a[base + seg + r] * q[seg + s] + c[base + seg + r] * k[seg + s];
                        g_r.set(r, s, v);
                    }
                }
                if g_r.entries().iter().all(|v| *v == 0.0) {
                    continue;
                }
                let neg_m = SquareMatrix::new(b, generator.iter().map(|v| -v).collect())?;
                let (_, g_m) = expm_frechet(&neg_m, &g_r)?;
                for (axis, &xi) in x.values().iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let target = &mut g_blocks[axis][head][j];
                    for (dst, src) in target.entries_mut().iter_mut().zip(g_m.entries()) {
                        *dst += xi * src;
                    }
                }
            }
        }
    }

    // Chain through the parameterizations. The skew projection B = P − Pᵀ
    // maps a cotangent G_B to G_B − G_Bᵀ on P, which is exactly
    // antisymmetric; symmetric parameter directions receive no gradient.
    let skew_grad = |g: &SquareMatrix| -> SquareMatrix {
        let gt = g.transpose();
        g.sub(&gt).expect("same order")
    };

    match set.params() {
        Params::Fixed => Err(Error::NotTrainable(set.variant().name())),
        Params::Liere { .. } => Ok(ParamGrads::Liere {
            p: g_blocks
                .iter()
                .map(|per_head| {
                    per_head
                        .iter()
                        .map(|per_block| per_block.iter().map(&skew_grad).collect())
                        .collect()
                })
                .collect(),
        }),
        Params::Ap { .. } => {
            let p = (0..heads)
                .map(|head| {
                    (0..m_blocks)
                        .map(|j| skew_grad(&g_blocks[j % axes][head][j]))
                        .collect()
                })
                .collect();
            Ok(ParamGrads::Ap { p })
        }
        Params::Ld { p, thetas } => {
            let mut grad_p = vec![vec![SquareMatrix::zeros(b); m_blocks]; heads];
            let mut grad_thetas = vec![vec![vec![0.0; axes]; m_blocks]; heads];
            for head in 0..heads {
                for j in 0..m_blocks {
                    let base_skew = skew_from_param(&p[head][j]).as_square();
                    let mut g_s = SquareMatrix::zeros(b);
                    for axis in 0..axes {
                        let g_b = &g_blocks[axis][head][j];
                        let theta = thetas[head][j][axis];
                        if theta != 0.0 {
                            for (dst, src) in g_s.entries_mut().iter_mut().zip(g_b.entries()) {
                                *dst += theta * src;
                            }
                        }
                        grad_thetas[head][j][axis] = base_skew.frobenius_dot(g_b);
                    }
                    grad_p[head][j] = skew_grad(&g_s);
                }
            }
            Ok(ParamGrads::Ld {
                p: grad_p,
                thetas: grad_thetas,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Binary batch format
// ---------------------------------------------------------------------------

/// Writes a batch as the flat binary format: magic `CRPE`, then version,
/// n, h, d/h as little-endian u32, then Q and K as little-endian f64,
/// row-major.
pub fn write_batch_to<W: Write>(mut w: W, batch: &AttentionBatch) -> Result<()> {
    w.write_all(BATCH_MAGIC)?;
    for v in [
        BATCH_VERSION,
        batch.n as u32,
        batch.heads as u32,
        batch.head_dim as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in batch.q.iter().chain(&batch.k) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_batch_from<R: Read>(mut r: R) -> Result<AttentionBatch> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::BadBatchFile("truncated header".into()))?;
    if &magic != BATCH_MAGIC {
        return Err(Error::BadBatchFile(format!(
            "bad magic {magic:?}, expected {BATCH_MAGIC:?}"
        )));
    }
    let mut word = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut word)
            .map_err(|_| Error::BadBatchFile("truncated header".into()))?;
        Ok(u32::from_le_bytes(word))
    };
    let version = next_u32(&mut r)?;
    if version != BATCH_VERSION {
        return Err(Error::BadBatchFile(format!(
            "unsupported version {version}"
        )));
    }
    let n = next_u32(&mut r)? as usize;
    let heads = next_u32(&mut r)? as usize;
    let head_dim = next_u32(&mut r)? as usize;
    let len = n * heads * head_dim;
    let read_plane = |r: &mut R| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::BadBatchFile("truncated payload".into()))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    };
    let q = read_plane(&mut r)?;
    let k = read_plane(&mut r)?;
    AttentionBatch::new(n, heads, head_dim, q, k)
}

pub fn write_batch<P: AsRef<Path>>(path: P, batch: &AttentionBatch) -> Result<()> {
    write_batch_to(BufWriter::new(File::create(path)?), batch)
}

pub fn read_batch<P: AsRef<Path>>(path: P) -> Result<AttentionBatch> {
    read_batch_from(BufReader::new(File::open(path)?))
}
