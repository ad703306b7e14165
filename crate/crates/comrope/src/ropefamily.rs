//! Angle-matrix-set constructions and evaluation of the rotation function
//! `R(x) = exp(Σᵢ Aᵢ xᵢ)`.
//!
//! Each angle matrix `Aᵢ` (one per coordinate axis) is block-diagonal with
//! skew-symmetric blocks of a fixed order `b`, stored per attention head.
//! Four constructions are provided:
//!
//! - **vanilla**: the classic non-trainable RoPE frequencies on 2x2 blocks;
//! - **LieRE**: fully independent trainable blocks per axis, which in
//!   general do not commute for `b ≥ 3`;
//! - **ComRoPE-AP** (axial partition): each block column is owned by exactly
//!   one axis, the rest are zero, so the set commutes by construction;
//! - **ComRoPE-LD** (linear dependence): per block one shared base generator
//!   scaled by per-axis factors, again commuting by construction.
//!
//! Block-to-axis assignment uses 0-based indices: block `j` serves axis
//! `j mod N` (equivalently, 1-based `j ≡ i (mod N)`). Vanilla frequencies
//! are `θ^((2N/d)·j)` with 1-based block index `j` within the head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    commutator_residual, expm_skew_into, ExpmWorkspace, RotationMatrix, SkewBlock, SquareMatrix,
};

/// Rotation base used by vanilla RoPE.
pub const DEFAULT_THETA_BASE: f64 = 1.0 / 10_000.0;

/// Default standard deviation for random parameter initialization; small
/// enough that generator norms stay in the well-conditioned exponential
/// regime at coordinate magnitudes up to a few units.
pub const DEFAULT_INIT_SCALE: f64 = 0.2;

// ---------------------------------------------------------------------------
// ModelDims
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct DimsDoc {
    d: usize,
    h: usize,
    b: usize,
    axes: usize,
    layers: usize,
}

/// Embedding/attention dimensions shared by every module.
///
/// Invariants: `h | d`, `b | d/h`, at least one block per head, `axes ≥ 1`.
/// The layer count is carried only for parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DimsDoc", into = "DimsDoc")]
pub struct ModelDims {
    d: usize,
    heads: usize,
    block: usize,
    axes: usize,
    layers: usize,
}

impl ModelDims {
    pub fn new(d: usize, heads: usize, block: usize, axes: usize, layers: usize) -> Result<Self> {
        if d == 0 || heads == 0 || block == 0 || axes == 0 || layers == 0 {
            return Err(Error::InvalidDims(
                "all of d, h, b, axes, layers must be positive".into(),
            ));
        }
        if !d.is_multiple_of(heads) {
            return Err(Error::InvalidDims(format!(
                "head count {heads} does not divide d = {d}"
            )));
        }
        let head_dim = d / heads;
        if !head_dim.is_multiple_of(block) {
            return Err(Error::InvalidDims(format!(
                "block size {block} does not divide head dim {head_dim}"
            )));
        }
        Ok(Self {
            d,
            heads,
            block,
            axes,
            layers,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Per-head feature dimension `d / h`.
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Number of diagonal blocks per head, `d / (h·b)`.
    pub fn blocks_per_head(&self) -> usize {
        self.head_dim() / self.block
    }

    /// The axial-partition and vanilla constructions additionally need the
    /// block count per head to be a multiple of the axis count.
    fn require_axis_partition(&self) -> Result<()> {
        let m = self.blocks_per_head();
        if !m.is_multiple_of(self.axes) {
            return Err(Error::InvalidDims(format!(
                "axis count {} does not divide the {} blocks per head",
                self.axes, m
            )));
        }
        Ok(())
    }
}

impl TryFrom<DimsDoc> for ModelDims {
    type Error = Error;
    fn try_from(doc: DimsDoc) -> Result<Self> {
        ModelDims::new(doc.d, doc.h, doc.b, doc.axes, doc.layers)
    }
}

impl From<ModelDims> for DimsDoc {
    fn from(dims: ModelDims) -> Self {
        DimsDoc {
            d: dims.d,
            h: dims.heads,
            b: dims.block,
            axes: dims.axes,
            layers: dims.layers,
        }
    }
}

// ---------------------------------------------------------------------------
// Coordinate
// ---------------------------------------------------------------------------

/// A token position in `ℝᴺ`, one real per coordinate axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coordinate(Vec<f64>);

impl Coordinate {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coordinate components"));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.len() != rhs.len() {
            return Err(Error::CoordinateLength {
                got: rhs.len(),
                expected: self.len(),
            });
        }
        Ok(Self(
            self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        if self.len() != rhs.len() {
            return Err(Error::CoordinateLength {
                got: rhs.len(),
                expected: self.len(),
            });
        }
        Ok(Self(
            self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect(),
        ))
    }
}

impl std::ops::Index<usize> for Coordinate {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<&[f64]> for Coordinate {
    fn from(values: &[f64]) -> Self {
        Self(values.to_vec())
    }
}

// ---------------------------------------------------------------------------
// Variant and parameters
// ---------------------------------------------------------------------------

/// The four angle-matrix-set families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Liere,
    Ap,
    Ld,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Liere => "liere",
            Variant::Ap => "ap",
            Variant::Ld => "ld",
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, Variant::Vanilla)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "liere" => Ok(Variant::Liere),
            "ap" => Ok(Variant::Ap),
            "ld" => Ok(Variant::Ld),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// Trainable parameter storage behind a set. The stored blocks are always
/// derived from these by [`AngleMatrixSet::rebuild_blocks`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Params {
    /// No trainable scalars (vanilla, or a set loaded without parameters).
    Fixed,
    /// One pre-skew matrix per (axis, head, block).
    Liere { p: Vec<Vec<Vec<SquareMatrix>>> },
    /// One pre-skew matrix per (head, block); the owning axis is `j mod N`.
    Ap { p: Vec<Vec<SquareMatrix>> },
    /// One shared pre-skew base per (head, block) plus per-axis scale
    /// factors `thetas[head][j][axis]`.
    Ld {
        p: Vec<Vec<SquareMatrix>>,
        thetas: Vec<Vec<Vec<f64>>>,
    },
}

// ---------------------------------------------------------------------------
// AngleMatrixSet
// ---------------------------------------------------------------------------

/// N block-diagonal skew-symmetric generators (one per coordinate axis),
/// stored per head, plus the trainable parameters they derive from.
///
/// Immutable after construction except through
/// [`set_trainable_params`](Self::set_trainable_params), which rebuilds
/// every block from the updated parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMatrixSet {
    variant: Variant,
    dims: ModelDims,
    seed: Option<u64>,
    /// blocks[axis][head][j], each of order `dims.block()`.
    blocks: Vec<Vec<Vec<SkewBlock>>>,
    params: Params,
}

fn sample_matrix<R: Rng + ?Sized>(order: usize, normal: &Normal<f64>, rng: &mut R) -> SquareMatrix {
    let entries: Vec<f64> = (0..order * order).map(|_| normal.sample(rng)).collect();
    SquareMatrix::new(order, entries).expect("gaussian entries are finite")
}

impl AngleMatrixSet {
    /// Classic non-trainable RoPE: planar blocks with frequencies
    /// `theta_base^((2N/d)·j)` (1-based `j` within the head) on the block
    /// column owned by each axis, zero elsewhere. Requires `b = 2` and the
    /// block count per head to be a multiple of the axis count.
    pub fn vanilla(dims: ModelDims, theta_base: f64) -> Result<Self> {
        if dims.block() != 2 {
            return Err(Error::InvalidDims(format!(
                "vanilla RoPE requires block size 2, got {}",
                dims.block()
            )));
        }
        dims.require_axis_partition()?;
        if !theta_base.is_finite() || theta_base <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "theta base must be positive and finite, got {theta_base}"
            )));
        }
        let mut set = Self {
            variant: Variant::Vanilla,
            dims,
            seed: None,
            blocks: Vec::new(),
            params: Params::Fixed,
        };
        set.rebuild_blocks_vanilla(theta_base);
        Ok(set)
    }

    /// Fully independent trainable blocks: `B_ij = P_ij − P_ijᵀ` with
    /// Gaussian `P` entries. Generally non-commuting for `b ≥ 3`.
    pub fn liere<R: Rng + ?Sized>(dims: ModelDims, init_scale: f64, rng: &mut R) -> Result<Self> {
        let normal = gaussian(init_scale)?;
        let b = dims.block();
        let p: Vec<Vec<Vec<SquareMatrix>>> = (0..dims.axes())
            .map(|_| {
                (0..dims.heads())
                    .map(|_| {
                        (0..dims.blocks_per_head())
                            .map(|_| sample_matrix(b, &normal, rng))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self::liere_from_params(dims, p)
    }

    /// LieRE construction from explicit pre-skew matrices,
    /// `p[axis][head][j]`.
    pub fn liere_from_params(dims: ModelDims, p: Vec<Vec<Vec<SquareMatrix>>>) -> Result<Self> {
        check_shape_3(&p, &dims, "liere parameters")?;
        let mut set = Self {
            variant: Variant::Liere,
            dims,
            seed: None,
            blocks: Vec::new(),
            params: Params::Liere { p },
        };
        set.rebuild_blocks();
        Ok(set)
    }

    /// Axial partition: block `j` carries `P_j − P_jᵀ` on axis `j mod N`
    /// and zero on every other axis, so the set commutes by construction.
    pub fn ap<R: Rng + ?Sized>(dims: ModelDims, init_scale: f64, rng: &mut R) -> Result<Self> {
        dims.require_axis_partition()?;
        let normal = gaussian(init_scale)?;
        let b = dims.block();
        let p: Vec<Vec<SquareMatrix>> = (0..dims.heads())
            .map(|_| {
                (0..dims.blocks_per_head())
                    .map(|_| sample_matrix(b, &normal, rng))
                    .collect()
            })
            .collect();
        Self::ap_from_params(dims, p)
    }

    /// Axial partition from explicit pre-skew matrices, `p[head][j]`.
    pub fn ap_from_params(dims: ModelDims, p: Vec<Vec<SquareMatrix>>) -> Result<Self> {
        dims.require_axis_partition()?;
        check_shape_2(&p, &dims, "axial-partition parameters")?;
        let mut set = Self {
            variant: Variant::Ap,
            dims,
            seed: None,
            blocks: Vec::new(),
            params: Params::Ap { p },
        };
        set.rebuild_blocks();
        Ok(set)
    }

    /// Linear dependence: per (head, block) one shared base generator
    /// `P − Pᵀ` scaled by per-axis factors, commuting by construction.
    /// Base entries are `N(0, init_scale²)`, scale factors `N(0, 1)`.
    pub fn ld<R: Rng + ?Sized>(dims: ModelDims, init_scale: f64, rng: &mut R) -> Result<Self> {
        let normal = gaussian(init_scale)?;
        let unit = gaussian(1.0)?;
        let b = dims.block();
        let p: Vec<Vec<SquareMatrix>> = (0..dims.heads())
            .map(|_| {
                (0..dims.blocks_per_head())
                    .map(|_| sample_matrix(b, &normal, rng))
                    .collect()
            })
            .collect();
        let thetas: Vec<Vec<Vec<f64>>> = (0..dims.heads())
            .map(|_| {
                (0..dims.blocks_per_head())
                    .map(|_| (0..dims.axes()).map(|_| unit.sample(rng)).collect())
                    .collect()
            })
            .collect();
        Self::ld_from_params(dims, p, thetas)
    }

    /// Linear dependence from explicit bases `p[head][j]` and scale
    /// factors `thetas[head][j][axis]`.
    pub fn ld_from_params(
        dims: ModelDims,
        p: Vec<Vec<SquareMatrix>>,
        thetas: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        check_shape_2(&p, &dims, "linear-dependence bases")?;
        if thetas.len() != dims.heads()
            || thetas.iter().any(|h| {
                h.len() != dims.blocks_per_head() || h.iter().any(|t| t.len() != dims.axes())
            })
        {
            return Err(Error::DimensionMismatch(
                "theta factors must have shape [heads][blocks][axes]".into(),
            ));
        }
        if thetas.iter().flatten().flatten().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("theta factors"));
        }
        let mut set = Self {
            variant: Variant::Ld,
            dims,
            seed: None,
            blocks: Vec::new(),
            params: Params::Ld { p, thetas },
        };
        set.rebuild_blocks();
        Ok(set)
    }

    /// Zero initialization for a trainable variant: every generator is the
    /// zero matrix, so every rotation is the identity. LD scale factors are
    /// set to 1 so the base matrices still receive gradient.
    pub fn zero_init(variant: Variant, dims: ModelDims) -> Result<Self> {
        let b = dims.block();
        let zero = SquareMatrix::zeros(b);
        match variant {
            Variant::Vanilla => Err(Error::NotTrainable("vanilla")),
            Variant::Liere => Self::liere_from_params(
                dims,
                vec![vec![vec![zero; dims.blocks_per_head()]; dims.heads()]; dims.axes()],
            ),
            Variant::Ap => {
                Self::ap_from_params(dims, vec![vec![zero; dims.blocks_per_head()]; dims.heads()])
            }
            Variant::Ld => Self::ld_from_params(
                dims,
                vec![vec![zero; dims.blocks_per_head()]; dims.heads()],
                vec![vec![vec![1.0; dims.axes()]; dims.blocks_per_head()]; dims.heads()],
            ),
        }
    }

    /// Builds the requested variant from a seed, recording the seed for
    /// serialization. Vanilla ignores the seed.
    pub fn from_seed(
        variant: Variant,
        dims: ModelDims,
        seed: u64,
        init_scale: f64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut set = match variant {
            Variant::Vanilla => Self::vanilla(dims, DEFAULT_THETA_BASE)?,
            Variant::Liere => Self::liere(dims, init_scale, &mut rng)?,
            Variant::Ap => Self::ap(dims, init_scale, &mut rng)?,
            Variant::Ld => Self::ld(dims, init_scale, &mut rng)?,
        };
        set.seed = Some(seed);
        Ok(set)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self.params, Params::Fixed)
    }

    /// The generator block for (axis, head, block-column).
    pub fn block(&self, axis: usize, head: usize, j: usize) -> &SkewBlock {
        &self.blocks[axis][head][j]
    }

    pub(crate) fn params(&self) -> &Params {
        &self.params
    }

    // -- block derivation ---------------------------------------------------

    fn rebuild_blocks_vanilla(&mut self, theta_base: f64) {
        let dims = self.dims;
        let (n, b) = (dims.axes(), dims.block());
        let exponent_step = 2.0 * n as f64 / dims.d() as f64;
        self.blocks = (0..n)
            .map(|axis| {
                (0..dims.heads())
                    .map(|_| {
                        (0..dims.blocks_per_head())
                            .map(|j| {
                                if j % n == axis {
                                    let freq = theta_base.powf(exponent_step * (j + 1) as f64);
                                    SkewBlock::planar().scale(freq)
                                } else {
                                    SkewBlock::zeros(b)
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
    }

    fn rebuild_blocks(&mut self) {
        let dims = self.dims;
        let (n, b) = (dims.axes(), dims.block());
        self.blocks = match &self.params {
            Params::Fixed => return,
            Params::Liere { p } => (0..n)
                .map(|axis| {
                    (0..dims.heads())
                        .map(|head| {
                            (0..dims.blocks_per_head())
                                .map(|j| crate::linalg::skew_from_param(&p[axis][head][j]))
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            Params::Ap { p } => (0..n)
                .map(|axis| {
                    (0..dims.heads())
                        .map(|head| {
                            (0..dims.blocks_per_head())
                                .map(|j| {
                                    if j % n == axis {
                                        crate::linalg::skew_from_param(&p[head][j])
                                    } else {
                                        SkewBlock::zeros(b)
                                    }
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            Params::Ld { p, thetas } => (0..n)
                .map(|axis| {
                    (0..dims.heads())
                        .map(|head| {
                            (0..dims.blocks_per_head())
                                .map(|j| {
                                    crate::linalg::skew_from_param(&p[head][j])
                                        .scale(thetas[head][j][axis])
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        };
    }

    // -- rotation evaluation -------------------------------------------------

    /// Accumulates the per-block generator `M_j = Σᵢ xᵢ · B_ij` into `out`
    /// (row-major, `b*b` entries).
    pub(crate) fn accumulate_generator(&self, x: &[f64], head: usize, j: usize, out: &mut [f64]) {
        out.fill(0.0);
        for (axis, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.blocks[axis][head][j].entries()) {
                *o += xi * v;
            }
        }
    }

    /// The j-th diagonal rotation block of `R(x)` for one head.
    pub fn rotation_block(&self, x: &Coordinate, head: usize, j: usize) -> Result<SquareMatrix> {
        self.check_coordinate(x)?;
        let b = self.dims.block();
        let mut generator = vec![0.0; b * b];
        self.accumulate_generator(x.values(), head, j, &mut generator);
        let mut out = vec![0.0; b * b];
        let mut ws = ExpmWorkspace::new();
        expm_skew_into(&mut ws, &generator, b, 1.0, &mut out);
        SquareMatrix::new(b, out)
    }

    /// Evaluates the full per-head rotation `R(x) = exp(Σᵢ Aᵢ xᵢ)` as a
    /// dense block-diagonal matrix of order `d/h`.
    pub fn rotation(&self, x: &Coordinate, head: usize) -> Result<RotationMatrix> {
        self.check_coordinate(x)?;
        if head >= self.dims.heads() {
            return Err(Error::InvalidArgument(format!(
                "head {head} out of range (set has {})",
                self.dims.heads()
            )));
        }
        let b = self.dims.block();
        let head_dim = self.dims.head_dim();
        let mut full = SquareMatrix::zeros(head_dim);
        let mut generator = vec![0.0; b * b];
        let mut local = vec![0.0; b * b];
        let mut ws = ExpmWorkspace::new();
        for j in 0..self.dims.blocks_per_head() {
            self.accumulate_generator(x.values(), head, j, &mut generator);
            expm_skew_into(&mut ws, &generator, b, 1.0, &mut local);
            let base = j * b;
            for r in 0..b {
                for c in 0..b {
                    full.set(base + r, base + c, local[r * b + c]);
                }
            }
        }
        Ok(RotationMatrix::from_raw(full))
    }

    fn check_coordinate(&self, x: &Coordinate) -> Result<()> {
        if x.len() != self.dims.axes() {
            return Err(Error::CoordinateLength {
                got: x.len(),
                expected: self.dims.axes(),
            });
        }
        Ok(())
    }

    /// Maximum commutator residual over all axis pairs, heads, and block
    /// columns, compared against `tol`. Blockwise commutativity implies
    /// commutativity of the assembled block-diagonal angle matrices.
    pub fn is_pairwise_commuting(&self, tol: f64) -> (bool, f64) {
        let n = self.dims.axes();
        let mut max_residual = 0.0f64;
        for a in 0..n {
            for b in a + 1..n {
                for head in 0..self.dims.heads() {
                    for j in 0..self.dims.blocks_per_head() {
                        let res = commutator_residual(
                            &self.blocks[a][head][j].as_square(),
                            &self.blocks[b][head][j].as_square(),
                        )
                        .expect("equal orders");
                        if res > max_residual {
                            max_residual = res;
                        }
                    }
                }
            }
        }
        (max_residual <= tol, max_residual)
    }

    // -- trainable parameter access -------------------------------------------

    /// Flattens every trainable scalar in canonical order:
    /// - LieRE: `p[axis][head][j]` row-major;
    /// - AP: `p[head][j]` row-major;
    /// - LD: bases `p[head][j]` row-major, then `thetas[head][j][axis]`.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.params {
            Params::Fixed => {}
            Params::Liere { p } => {
                for axis in p {
                    for head in axis {
                        for m in head {
                            out.extend_from_slice(m.entries());
                        }
                    }
                }
            }
            Params::Ap { p } => {
                for head in p {
                    for m in head {
                        out.extend_from_slice(m.entries());
                    }
                }
            }
            Params::Ld { p, thetas } => {
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

    /// Overwrites the trainable scalars (same order as
    /// [`trainable_params`](Self::trainable_params)) and rebuilds every
    /// generator block.
    pub fn set_trainable_params(&mut self, values: &[f64]) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trainable parameters"));
        }
        let expected = self.trainable_params().len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} parameter values against {} trainable scalars",
                values.len(),
                expected
            )));
        }
        let mut cursor = values.iter();
        let mut fill_matrix = |m: &mut SquareMatrix| {
            for e in m.entries_mut() {
                *e = *cursor.next().expect("length checked");
            }
        };
        match &mut self.params {
            Params::Fixed => {
                if !values.is_empty() {
                    return Err(Error::NotTrainable(self.variant.name()));
                }
            }
            Params::Liere { p } => {
                for axis in p {
                    for head in axis {
                        for m in head {
                            fill_matrix(m);
                        }
                    }
                }
            }
            Params::Ap { p } => {
                for head in p {
                    for m in head {
                        fill_matrix(m);
                    }
                }
            }
            Params::Ld { p, thetas } => {
                for head in p.iter_mut() {
                    for m in head {
                        fill_matrix(m);
                    }
                }
                for head in thetas {
                    for block in head {
                        for t in block {
                            *t = *cursor.next().expect("length checked");
                        }
                    }
                }
            }
        }
        self.rebuild_blocks();
        Ok(())
    }

    // -- serialization --------------------------------------------------------

    /// Serializes to a JSON document `{variant, dims, seed?, blocks,
    /// params?}` with blocks as nested `[axis][head][j][row][col]` arrays.
    /// Numbers are emitted as shortest round-trip decimals, so a
    /// deserialize-serialize cycle is bit-exact.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SetDocument::from(self))?)
    }

    /// Parses a document produced by [`to_json`](Self::to_json). When the
    /// optional parameter section is present, blocks are rebuilt from it
    /// and must match the stored ones bitwise; without it the set is
    /// loaded as non-trainable.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SetDocument = serde_json::from_str(text)?;
        doc.into_set()
    }
}

fn gaussian(std_dev: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std_dev)
        .map_err(|_| Error::InvalidArgument(format!("invalid init scale {std_dev}")))
}

fn check_shape_3(p: &[Vec<Vec<SquareMatrix>>], dims: &ModelDims, what: &str) -> Result<()> {
    let ok = p.len() == dims.axes()
        && p.iter().all(|axis| {
            axis.len() == dims.heads()
                && axis.iter().all(|head| {
                    head.len() == dims.blocks_per_head()
                        && head.iter().all(|m| m.order() == dims.block())
                })
        });
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what} must have shape [axes][heads][blocks] of order-{} matrices",
            dims.block()
        )))
    }
}

fn check_shape_2(p: &[Vec<SquareMatrix>], dims: &ModelDims, what: &str) -> Result<()> {
    let ok = p.len() == dims.heads()
        && p.iter().all(|head| {
            head.len() == dims.blocks_per_head() && head.iter().all(|m| m.order() == dims.block())
        });
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what} must have shape [heads][blocks] of order-{} matrices",
            dims.block()
        )))
    }
}

// ---------------------------------------------------------------------------
// JSON document
// ---------------------------------------------------------------------------

type MatrixRows = Vec<Vec<f64>>;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ParamsDoc {
    Liere {
        p: Vec<Vec<Vec<MatrixRows>>>,
    },
    Ap {
        p: Vec<Vec<MatrixRows>>,
    },
    Ld {
        p: Vec<Vec<MatrixRows>>,
        thetas: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Serialize, Deserialize)]
struct SetDocument {
    variant: Variant,
    dims: ModelDims,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    blocks: Vec<Vec<Vec<MatrixRows>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<ParamsDoc>,
}

fn matrix_to_rows(entries: &[f64], order: usize) -> MatrixRows {
    (0..order)
        .map(|i| entries[i * order..(i + 1) * order].to_vec())
        .collect()
}

fn rows_to_matrix(rows: &MatrixRows) -> Result<SquareMatrix> {
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
    SquareMatrix::new(order, entries)
}

impl From<&AngleMatrixSet> for SetDocument {
    fn from(set: &AngleMatrixSet) -> Self {
        let b = set.dims.block();
        let blocks = set
            .blocks
            .iter()
            .map(|axis| {
                axis.iter()
                    .map(|head| {
                        head.iter()
                            .map(|blk| matrix_to_rows(blk.entries(), b))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mat_rows = |m: &SquareMatrix| matrix_to_rows(m.entries(), m.order());
        let params = match &set.params {
            Params::Fixed => None,
            Params::Liere { p } => Some(ParamsDoc::Liere {
                p: p.iter()
                    .map(|a| a.iter().map(|h| h.iter().map(mat_rows).collect()).collect())
                    .collect(),
            }),
            Params::Ap { p } => Some(ParamsDoc::Ap {
                p: p.iter().map(|h| h.iter().map(mat_rows).collect()).collect(),
            }),
            Params::Ld { p, thetas } => Some(ParamsDoc::Ld {
                p: p.iter().map(|h| h.iter().map(mat_rows).collect()).collect(),
                thetas: thetas.clone(),
            }),
        };
        SetDocument {
            variant: set.variant,
            dims: set.dims,
            seed: set.seed,
            blocks,
            params,
        }
    }
}

impl SetDocument {
    fn into_set(self) -> Result<AngleMatrixSet> {
        let dims = self.dims;
        let b = dims.block();
        if self.blocks.len() != dims.axes()
            || self.blocks.iter().any(|axis| {
                axis.len() != dims.heads()
                    || axis.iter().any(|head| head.len() != dims.blocks_per_head())
            })
        {
            return Err(Error::DimensionMismatch(
                "block document does not match dims".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(dims.axes());
        for axis in &self.blocks {
            let mut per_head = Vec::with_capacity(dims.heads());
            for head in axis {
                let mut per_block = Vec::with_capacity(dims.blocks_per_head());
                for rows in head {
                    let m = rows_to_matrix(rows)?;
                    if m.order() != b {
                        return Err(Error::DimensionMismatch(format!(
                            "stored block of order {} against block size {b}",
                            m.order()
                        )));
                    }
                    per_block.push(SkewBlock::new(b, m.entries().to_vec())?);
                }
                per_head.push(per_block);
            }
            blocks.push(per_head);
        }

        let params = match self.params {
            None => Params::Fixed,
            Some(ParamsDoc::Liere { p }) => {
                let p = p
                    .iter()
                    .map(|a| {
                        a.iter()
                            .map(|h| h.iter().map(rows_to_matrix).collect())
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Params::Liere { p }
            }
            Some(ParamsDoc::Ap { p }) => Params::Ap {
                p: p.iter()
                    .map(|h| h.iter().map(rows_to_matrix).collect())
                    .collect::<Result<Vec<_>>>()?,
            },
            Some(ParamsDoc::Ld { p, thetas }) => Params::Ld {
                p: p.iter()
                    .map(|h| h.iter().map(rows_to_matrix).collect())
                    .collect::<Result<Vec<_>>>()?,
                thetas,
            },
        };

        let mut set = AngleMatrixSet {
            variant: self.variant,
            dims,
            seed: self.seed,
            blocks,
            params,
        };
        if !matches!(set.params, Params::Fixed) {
            let stored = set.blocks.clone();
            set.rebuild_blocks();
            if set.blocks != stored {
                return Err(Error::InvalidArgument(
                    "stored blocks do not match the stored parameters".into(),
                ));
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(d: usize, h: usize, b: usize, axes: usize) -> ModelDims {
        ModelDims::new(d, h, b, axes, 1).unwrap()
    }

    fn coord(values: &[f64]) -> Coordinate {
        Coordinate::new(values.to_vec()).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dims_invariants_are_enforced() {
        assert!(ModelDims::new(64, 2, 4, 2, 1).is_ok());
        assert!(ModelDims::new(10, 3, 2, 1, 1).is_err()); // h ∤ d
        assert!(ModelDims::new(12, 2, 4, 1, 1).is_err()); // b ∤ d/h
        assert!(ModelDims::new(8, 1, 2, 0, 1).is_err());
    }

    #[test]
    fn vanilla_frequencies_match_the_closed_form() {
        let set = AngleMatrixSet::vanilla(dims(4, 1, 2, 1), DEFAULT_THETA_BASE).unwrap();
        let theta: f64 = 1.0 / 10_000.0;
        assert_eq!(set.block(0, 0, 0).get(1, 0), theta.powf(0.5));
        assert_eq!(set.block(0, 0, 1).get(1, 0), theta.powf(1.0));
    }

    #[test]
    fn vanilla_rejects_wide_blocks() {
        assert!(AngleMatrixSet::vanilla(dims(16, 1, 4, 1), DEFAULT_THETA_BASE).is_err());
    }

    #[test]
    fn rotation_at_origin_is_identity() {
        let set = AngleMatrixSet::vanilla(dims(8, 1, 2, 2), DEFAULT_THETA_BASE).unwrap();
        let r = set.rotation(&Coordinate::zeros(2), 0).unwrap();
        assert_eq!(r.matrix().entries(), SquareMatrix::identity(8).entries());
    }

    #[test]
    fn vanilla_rotation_matches_elementwise_trig_oracle() {
        // Rotation of a head-dim-64 query at integer position m must equal
        // the per-pair cos/sin transform with frequencies θ^((2/64)·j).
        let d = 64;
        let set = AngleMatrixSet::vanilla(dims(d, 1, 2, 1), DEFAULT_THETA_BASE).unwrap();
        let m = 7.0;
        let r = set.rotation(&coord(&[m]), 0).unwrap();

        let mut rng = rng(9);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rotated = r.apply(&q).unwrap();

        for j in 0..d / 2 {
            let angle = m * DEFAULT_THETA_BASE.powf(2.0 / d as f64 * (j + 1) as f64);
            let (sin, cos) = angle.sin_cos();
            let (a, b) = (q[2 * j], q[2 * j + 1]);
            let expect = [a * cos - b * sin, a * sin + b * cos];
            assert!((rotated[2 * j] - expect[0]).abs() <= 1e-12);
            assert!((rotated[2 * j + 1] - expect[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn vanilla_is_an_axial_partition_special_case() {
        let set = AngleMatrixSet::vanilla(dims(16, 2, 2, 2), DEFAULT_THETA_BASE).unwrap();
        assert!(!set.is_trainable());
        for axis in 0..2 {
            for head in 0..2 {
                for j in 0..set.dims().blocks_per_head() {
                    let blk = set.block(axis, head, j);
                    if j % 2 == axis {
                        assert!(!blk.is_zero());
                    } else {
                        assert!(blk.is_zero());
                    }
                }
            }
        }
    }

    #[test]
    fn liere_zero_scale_gives_identity_rotations() {
        let mut r = rng(3);
        let set = AngleMatrixSet::liere(dims(12, 1, 3, 2), 0.0, &mut r).unwrap();
        let rot = set.rotation(&coord(&[1.5, -0.7]), 0).unwrap();
        assert_eq!(rot.matrix().entries(), SquareMatrix::identity(12).entries());
    }

    #[test]
    fn planar_liere_always_commutes() {
        let mut r = rng(17);
        let set = AngleMatrixSet::liere(dims(8, 1, 2, 3), 0.5, &mut r).unwrap();
        let (ok, residual) = set.is_pairwise_commuting(1e-12);
        assert!(ok, "residual {residual:.3e}");
    }

    #[test]
    fn wide_liere_blocks_do_not_commute() {
        let mut r = rng(42);
        let set = AngleMatrixSet::liere(dims(8, 1, 4, 2), 0.5, &mut r).unwrap();
        let (ok, residual) = set.is_pairwise_commuting(1e-3);
        assert!(!ok);
        assert!(residual > 1e-3, "residual {residual:.3e}");
    }

    #[test]
    fn ap_symmetric_params_give_identity_rotations() {
        let d = dims(16, 1, 4, 2);
        let sym = SquareMatrix::identity(4);
        let set = AngleMatrixSet::ap_from_params(d, vec![vec![sym; 4]]).unwrap();
        let rot = set.rotation(&coord(&[0.9, 2.0]), 0).unwrap();
        assert_eq!(rot.matrix().entries(), SquareMatrix::identity(16).entries());
    }

    #[test]
    fn ap_partition_assigns_block_columns_round_robin() {
        let mut r = rng(5);
        let set = AngleMatrixSet::ap(dims(16, 1, 2, 2), 0.3, &mut r).unwrap();
        // m_head = 4: axis 0 owns columns {0, 2}, axis 1 owns {1, 3}.
        for j in 0..4 {
            assert_eq!(set.block(0, 0, j).is_zero(), j % 2 != 0);
            assert_eq!(set.block(1, 0, j).is_zero(), j % 2 == 0);
        }
    }

    #[test]
    fn ap_commutes_by_construction() {
        let mut r = rng(6);
        let set = AngleMatrixSet::ap(dims(24, 2, 4, 3), 0.4, &mut r).unwrap();
        let (ok, residual) = set.is_pairwise_commuting(1e-14);
        assert!(ok, "residual {residual:.3e}");
    }

    #[test]
    fn ap_rejects_incompatible_axis_count() {
        let mut r = rng(7);
        // m_head = 3 is not a multiple of 2 axes.
        let err = AngleMatrixSet::ap(dims(12, 1, 4, 2), 0.3, &mut r);
        assert!(matches!(err, Err(Error::InvalidDims(_))));
    }

    #[test]
    fn ld_equal_thetas_make_axis_matrices_identical() {
        let d = dims(8, 1, 4, 2);
        let mut r = rng(8);
        let base = super::sample_matrix(4, &Normal::new(0.0, 0.3).unwrap(), &mut r);
        let set =
            AngleMatrixSet::ld_from_params(d, vec![vec![base; 2]], vec![vec![vec![0.7, 0.7]; 2]])
                .unwrap();
        for j in 0..2 {
            assert_eq!(set.block(0, 0, j).entries(), set.block(1, 0, j).entries());
        }
    }

    #[test]
    fn ld_zero_theta_silences_an_axis() {
        let d = dims(8, 1, 4, 2);
        let mut r = rng(9);
        let base = super::sample_matrix(4, &Normal::new(0.0, 0.3).unwrap(), &mut r);
        let set =
            AngleMatrixSet::ld_from_params(d, vec![vec![base; 2]], vec![vec![vec![1.0, 0.0]; 2]])
                .unwrap();
        assert!(set.block(1, 0, 0).is_zero());
        // Rotation depends only on the first coordinate.
        let r1 = set.rotation(&coord(&[0.8, -5.0]), 0).unwrap();
        let r2 = set.rotation(&coord(&[0.8, 3.0]), 0).unwrap();
        assert_eq!(r1.matrix().entries(), r2.matrix().entries());
    }

    #[test]
    fn ld_commutes_by_construction() {
        let d = dims(16, 1, 8, 2);
        let mut r = rng(10);
        let base = super::sample_matrix(8, &Normal::new(0.0, 0.4).unwrap(), &mut r);
        let set =
            AngleMatrixSet::ld_from_params(d, vec![vec![base; 2]], vec![vec![vec![0.3, -1.7]; 2]])
                .unwrap();
        let (ok, residual) = set.is_pairwise_commuting(1e-13);
        assert!(ok, "residual {residual:.3e}");
    }

    #[test]
    fn ld_rotations_are_additive_in_the_coordinate() {
        let mut r = rng(11);
        let set = AngleMatrixSet::ld(dims(16, 2, 4, 2), 0.3, &mut r).unwrap();
        let x = coord(&[1.2, -0.4]);
        let y = coord(&[-2.5, 0.9]);
        let sum = x.add(&y).unwrap();
        for head in 0..2 {
            let rx = set.rotation(&x, head).unwrap();
            let ry = set.rotation(&y, head).unwrap();
            let rsum = set.rotation(&sum, head).unwrap();
            let product = rx.matrix().matmul(ry.matrix()).unwrap();
            let diff = product.sub(rsum.matrix()).unwrap().frobenius_norm();
            assert!(diff <= 1e-10, "head {head}: {diff:.3e}");
        }
    }

    #[test]
    fn rope_equation_holds_for_commuting_sets() {
        let mut r = rng(12);
        for (b, axes) in [(2usize, 2usize), (4, 3), (8, 2)] {
            let d = dims(b * axes * 2, 1, b, axes);
            let sets = [
                AngleMatrixSet::ap(d, 0.3, &mut r).unwrap(),
                AngleMatrixSet::ld(d, 0.3, &mut r).unwrap(),
            ];
            for set in &sets {
                for _ in 0..20 {
                    let x = coord(
                        &(0..axes)
                            .map(|_| r.random_range(-4.0..4.0))
                            .collect::<Vec<_>>(),
                    );
                    let y = coord(
                        &(0..axes)
                            .map(|_| r.random_range(-4.0..4.0))
                            .collect::<Vec<_>>(),
                    );
                    let lhs = set
                        .rotation(&x, 0)
                        .unwrap()
                        .matrix()
                        .transpose()
                        .matmul(set.rotation(&y, 0).unwrap().matrix())
                        .unwrap();
                    let rhs = set.rotation(&y.sub(&x).unwrap(), 0).unwrap();
                    let diff = lhs.sub(rhs.matrix()).unwrap().frobenius_norm();
                    assert!(
                        diff <= 1e-8,
                        "{} b={b} axes={axes}: {diff:.3e}",
                        set.variant()
                    );
                }
            }
        }
    }

    #[test]
    fn rope_equation_violated_for_noncommuting_set() {
        let mut r = rng(13);
        let set = AngleMatrixSet::liere(dims(8, 1, 4, 2), 0.5, &mut r).unwrap();
        let (_, residual) = set.is_pairwise_commuting(0.1);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x = coord(&[r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)]);
            let y = coord(&[r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)]);
            let lhs = set
                .rotation(&x, 0)
                .unwrap()
                .matrix()
                .transpose()
                .matmul(set.rotation(&y, 0).unwrap().matrix())
                .unwrap();
            let rhs = set.rotation(&y.sub(&x).unwrap(), 0).unwrap();
            worst = worst.max(lhs.sub(rhs.matrix()).unwrap().frobenius_norm());
        }
        if residual > 0.1 {
            assert!(worst > 1e-4, "no violation found, worst {worst:.3e}");
        } else {
            eprintln!(
                "commutator residual {residual:.3e} too small for a reliable witness; worst {worst:.3e}"
            );
        }
    }

    #[test]
    fn zero_init_gives_identity_rotations_and_stays_trainable() {
        for variant in [Variant::Liere, Variant::Ap, Variant::Ld] {
            let set = AngleMatrixSet::zero_init(variant, dims(8, 1, 4, 2)).unwrap();
            assert!(set.is_trainable());
            let rot = set.rotation(&coord(&[1.0, 2.0]), 0).unwrap();
            assert_eq!(rot.matrix().entries(), SquareMatrix::identity(8).entries());
        }
        assert!(AngleMatrixSet::zero_init(Variant::Vanilla, dims(8, 1, 2, 2)).is_err());
    }

    #[test]
    fn trainable_params_round_trip() {
        let d = dims(16, 2, 4, 2);
        for variant in [Variant::Liere, Variant::Ap, Variant::Ld] {
            let mut set = AngleMatrixSet::from_seed(variant, d, 21, 0.3).unwrap();
            let mut flat = set.trainable_params();
            let expected = match variant {
                Variant::Liere => 2 * 2 * 2 * 16,
                Variant::Ap => 2 * 2 * 16,
                Variant::Ld => 2 * 2 * 16 + 2 * 2 * 2,
                Variant::Vanilla => unreachable!(),
            };
            assert_eq!(flat.len(), expected);
            for v in &mut flat {
                *v *= 2.0;
            }
            set.set_trainable_params(&flat).unwrap();
            assert_eq!(set.trainable_params(), flat);
        }
    }

    #[test]
    fn set_trainable_params_rejects_wrong_length() {
        let mut set = AngleMatrixSet::from_seed(Variant::Ap, dims(8, 1, 2, 2), 1, 0.2).unwrap();
        assert!(set.set_trainable_params(&[0.0]).is_err());
    }

    #[test]
    fn coordinate_length_mismatch_is_rejected() {
        let set = AngleMatrixSet::vanilla(dims(8, 1, 2, 2), DEFAULT_THETA_BASE).unwrap();
        assert!(matches!(
            set.rotation(&coord(&[1.0]), 0),
            Err(Error::CoordinateLength { .. })
        ));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        for variant in [Variant::Vanilla, Variant::Liere, Variant::Ap, Variant::Ld] {
            let d = if variant == Variant::Vanilla {
                dims(8, 1, 2, 2)
            } else {
                dims(16, 2, 4, 2)
            };
            let set = AngleMatrixSet::from_seed(variant, d, 33, 0.3).unwrap();
            let text = set.to_json().unwrap();
            let loaded = AngleMatrixSet::from_json(&text).unwrap();
            assert_eq!(set, loaded, "{variant} round trip");
            // And a second serialization emits the identical document.
            assert_eq!(text, loaded.to_json().unwrap());
        }
    }

    #[test]
    fn from_json_rejects_non_skew_blocks() {
        let set = AngleMatrixSet::vanilla(dims(4, 1, 2, 1), DEFAULT_THETA_BASE).unwrap();
        let text = set.to_json().unwrap();
        let tampered = text.replacen("-0.01", "0.01", 1);
        assert_ne!(text, tampered, "expected a negative entry to tamper with");
        assert!(AngleMatrixSet::from_json(&tampered).is_err());
    }
}
