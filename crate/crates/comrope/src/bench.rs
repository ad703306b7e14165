//! Parameter accounting and a wall-clock timing harness for the rotation
//! kernel.
//!
//! Extra-parameter counts follow the closed forms
//!
//! | method       | extra parameters    |
//! |--------------|---------------------|
//! | APE          | `n·d`               |
//! | vanilla RoPE | `0`                 |
//! | LieRE        | `L·N·d·b`           |
//! | ComRoPE-AP   | `L·d·b`             |
//! | ComRoPE-LD   | `L·d·(b + N/b)`     |
//!
//! and every count is cross-checked against an enumeration of the
//! trainable scalars in an actually constructed set; the enumeration is
//! authoritative. Under the dimension invariants (`b | d/h`) the LD form
//! is always an integer, computed here in exact integer arithmetic.
//!
//! Timing uses a monotonic clock, runs single-threaded by default (a
//! parallel mode over tokens is available separately), excludes warmup
//! iterations, and reports the median of at least five repeats.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{rotate_qk, rotate_qk_parallel, AttentionBatch};
use crate::error::{Error, Result};
use crate::ropefamily::{AngleMatrixSet, Coordinate, ModelDims, Variant, DEFAULT_INIT_SCALE};

/// Positional-encoding methods covered by the parameter accounting. APE is
/// carried for reference only and is never timed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMethod {
    Ape,
    Vanilla,
    Liere,
    Ap,
    Ld,
}

impl PeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PeMethod::Ape => "ape",
            PeMethod::Vanilla => "vanilla",
            PeMethod::Liere => "liere",
            PeMethod::Ap => "ap",
            PeMethod::Ld => "ld",
        }
    }
}

impl From<Variant> for PeMethod {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Vanilla => PeMethod::Vanilla,
            Variant::Liere => PeMethod::Liere,
            Variant::Ap => PeMethod::Ap,
            Variant::Ld => PeMethod::Ld,
        }
    }
}

impl std::fmt::Display for PeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed-form extra-parameter count for one method and dimension set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub method: PeMethod,
    pub dims: ModelDims,
    pub extra_params: usize,
}

/// Evaluates the closed-form count. `n_tokens` enters only for APE, whose
/// codebook holds one embedding per position.
pub fn count_extra_params(
    method: PeMethod,
    dims: &ModelDims,
    n_tokens: usize,
) -> Result<ParamCount> {
    let (d, b, axes, layers) = (dims.d(), dims.block(), dims.axes(), dims.layers());
    let extra_params = match method {
        PeMethod::Ape => n_tokens * d,
        PeMethod::Vanilla => {
            // Validate the dims the same way construction would.
            AngleMatrixSet::vanilla(*dims, crate::ropefamily::DEFAULT_THETA_BASE)?;
            0
        }
        PeMethod::Liere => layers * axes * d * b,
        PeMethod::Ap => {
            if !dims.blocks_per_head().is_multiple_of(axes) {
                return Err(Error::InvalidDims(format!(
                    "axis count {axes} does not divide the {} blocks per head",
                    dims.blocks_per_head()
                )));
            }
            layers * d * b
        }
        // d·b base entries plus N·d/b scale factors per layer; b | d under
        // the dims invariants, so the division is exact.
        PeMethod::Ld => layers * (d * b + axes * (d / b)),
    };
    Ok(ParamCount {
        method,
        dims: *dims,
        extra_params,
    })
}

/// Counts trainable scalars by constructing a single-layer set and
/// enumerating its parameters, then scaling by the layer count. This is
/// the ground truth the closed forms are asserted against.
pub fn enumerate_extra_params(variant: Variant, dims: &ModelDims) -> Result<usize> {
    let single = ModelDims::new(dims.d(), dims.heads(), dims.block(), dims.axes(), 1)?;
    let per_layer = match variant {
        Variant::Vanilla => AngleMatrixSet::vanilla(single, crate::ropefamily::DEFAULT_THETA_BASE)?
            .trainable_params()
            .len(),
        _ => AngleMatrixSet::zero_init(variant, single)?
            .trainable_params()
            .len(),
    };
    Ok(per_layer * dims.layers())
}

/// Median/min/max wall time of the rotation kernel over a random batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub variant: Variant,
    pub dims: ModelDims,
    pub n_tokens: usize,
    pub repeats: usize,
    pub median_ns: f64,
    pub min_ns: u64,
    pub max_ns: u64,
    pub per_token_ns: f64,
    pub parallel: bool,
}

/// Number of untimed warmup iterations before measurement.
const WARMUP_RUNS: usize = 2;

/// Minimum number of timed repeats; smaller requests are raised to this.
const MIN_REPEATS: usize = 5;

/// Times `rotate_qk` over a seeded random batch of `n` tokens. The warmup
/// runs are excluded; the median of the repeats is reported along with the
/// retained min/max.
pub fn time_rotation(
    variant: Variant,
    dims: &ModelDims,
    n: usize,
    repeats: usize,
    parallel: bool,
    seed: u64,
) -> Result<TimingRecord> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "token count must be positive".into(),
        ));
    }
    let repeats = repeats.max(MIN_REPEATS);
    let set = AngleMatrixSet::from_seed(variant, *dims, seed, DEFAULT_INIT_SCALE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let batch = AttentionBatch::random(n, dims.heads(), dims.head_dim(), &mut rng);
    let positions: Vec<Coordinate> = (0..n)
        .map(|_| {
            Coordinate::new(
                (0..dims.axes())
                    .map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0))
                    .collect(),
            )
            .expect("finite draw")
        })
        .collect();

    let run = |batch: &AttentionBatch| -> Result<u64> {
        let start = Instant::now();
        let rotated = if parallel {
            rotate_qk_parallel(batch, &set, &positions)?
        } else {
            rotate_qk(batch, &set, &positions)?
        };
        let elapsed = start.elapsed().as_nanos() as u64;
        // Keep the result alive so the kernel cannot be optimized away.
        std::hint::black_box(&rotated);
        Ok(elapsed)
    };

    for _ in 0..WARMUP_RUNS {
        run(&batch)?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        times.push(run(&batch)?);
    }
    times.sort_unstable();
    let median_ns = if repeats % 2 == 1 {
        times[repeats / 2] as f64
    } else {
        (times[repeats / 2 - 1] + times[repeats / 2]) as f64 / 2.0
    };
    Ok(TimingRecord {
        variant,
        dims: *dims,
        n_tokens: n,
        repeats,
        median_ns,
        min_ns: times[0],
        max_ns: *times.last().expect("repeats >= 5"),
        per_token_ns: median_ns / n as f64,
        parallel,
    })
}

/// Timing CSV with the fixed header
/// `variant,d,h,b,N,n,repeats,median_ns,per_token_ns`.
pub fn emit_bench_csv(records: &[TimingRecord]) -> String {
    let mut out = String::from("variant,d,h,b,N,n,repeats,median_ns,per_token_ns\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.dims.d(),
            r.dims.heads(),
            r.dims.block(),
            r.dims.axes(),
            r.n_tokens,
            r.repeats,
            r.median_ns,
            r.per_token_ns
        ));
    }
    out
}

/// JSON mirror of the timing records.
pub fn emit_bench_json(records: &[TimingRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

/// Parameter-count CSV with header `method,d,h,b,N,L,extra_params`.
pub fn emit_params_csv(counts: &[ParamCount]) -> String {
    let mut out = String::from("method,d,h,b,N,L,extra_params\n");
    for c in counts {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.method,
            c.dims.d(),
            c.dims.heads(),
            c.dims.block(),
            c.dims.axes(),
            c.dims.layers(),
            c.extra_params
        ));
    }
    out
}
