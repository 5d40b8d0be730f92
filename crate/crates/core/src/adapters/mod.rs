//! Low-rank adapters and the algebra over them.
//!
//! A [`LoraBlock`] adds `(alpha/r) * B * A * x` beside a frozen linear map.
//! A [`HloraBlock`] extends a trained block with a second, lower-rank stage
//! whose update `(B2*B1)(A2*A1)x` starts at exactly zero and trains while
//! the first stage stays frozen. Blocks can be stacked side by side, merged
//! into base weights, or fused across runs into a single delta matrix.
//!
//! Weight-space operations (merge, fuse, delta export) run off-tape; only
//! the forward functions participate in autograd.

mod io;

pub use io::{load_adapter_set, save_adapter_set};

use crate::tensor::{Prng, Tape, Tensor, TensorError};
use std::collections::BTreeMap;

/// Standard deviation for Gaussian-initialized adapter factors.
pub const GAUSSIAN_INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("rank {rank} invalid for a {rows}x{cols} attachment point (need 1 <= r <= min)")]
    InvalidRank { rank: usize, rows: usize, cols: usize },
    #[error("hierarchical rank must be strictly below the base rank, got {rank2} vs {rank1}")]
    RankOrder { rank1: usize, rank2: usize },
    #[error("adapter built for a {expected_rows}x{expected_cols} map cannot apply to {got_rows}x{got_cols}")]
    Shape { expected_rows: usize, expected_cols: usize, got_rows: usize, got_cols: usize },
    #[error("invalid scaling: alpha {alpha} over rank {rank}")]
    Scaling { alpha: f64, rank: usize },
    #[error("fusion needs at least one (adapter, weight) entry")]
    EmptyFusion,
    #[error("stack is empty or its blocks target different shapes")]
    InvalidStack,
    #[error("fusion weight {0} is not finite")]
    FusionWeight(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("adapter file {path}: {source}")]
    File { path: String, source: crate::binio::BinError },
    #[error("adapter file {path}: {what}")]
    Malformed { path: String, what: String },
    #[error("a stacked adapter saves as one file per stage; save the stages separately")]
    StackNotSerializable,
}

pub type Result<T> = std::result::Result<T, AdapterError>;

/// One low-rank adapter: `delta(x) = (alpha/r) * B * A * x`.
///
/// `A` is `r x m` with Gaussian init so the update direction is random but
/// tiny; `B` is `n x r` zeros so the delta is exactly zero until training
/// moves it.
#[derive(Debug, Clone)]
pub struct LoraBlock {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    frozen: bool,
}

fn validate_rank(rank: usize, rows: usize, cols: usize) -> Result<()> {
    if rank == 0 || rank > rows.min(cols) {
        return Err(AdapterError::InvalidRank { rank, rows, cols });
    }
    Ok(())
}

fn validate_alpha(alpha: f64, rank: usize) -> Result<()> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(AdapterError::Scaling { alpha, rank });
    }
    Ok(())
}

impl LoraBlock {
    /// Fresh adapter for an `n_out x m_in` attachment point.
    pub fn init(n_out: usize, m_in: usize, rank: usize, alpha: f64, prng: &mut Prng) -> Result<Self> {
        validate_rank(rank, n_out, m_in)?;
        validate_alpha(alpha, rank)?;
        let a = Tensor::gaussian(rank, m_in, GAUSSIAN_INIT_STD, prng);
        let b = Tensor::zeros(n_out, rank);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Ok(LoraBlock { a, b, rank, alpha, frozen: false })
    }

    /// Rebuilds a block from stored factors (file loading, tests).
    pub fn from_parts(a: Tensor, b: Tensor, alpha: f64, frozen: bool) -> Result<Self> {
        let rank = a.rows();
        if b.cols() != rank {
            return Err(AdapterError::Shape {
                expected_rows: b.rows(),
                expected_cols: rank,
                got_rows: b.rows(),
                got_cols: b.cols(),
            });
        }
        validate_rank(rank, b.rows(), a.cols())?;
        validate_alpha(alpha, rank)?;
        a.set_requires_grad(!frozen);
        b.set_requires_grad(!frozen);
        Ok(LoraBlock { a, b, rank, alpha, frozen })
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    /// `alpha / r`, applied to every delta this block produces.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing removes the factors from the trainable set; gradients stop
    /// flowing into them on subsequent tapes.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.a.set_requires_grad(!frozen);
        self.b.set_requires_grad(!frozen);
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        if self.frozen {
            Vec::new()
        } else {
            vec![self.a.clone(), self.b.clone()]
        }
    }

    /// Weight-space update `(alpha/r) * B * A` as a plain matrix.
    pub fn delta(&self) -> Result<DeltaMatrix> {
        let off = Tape::disabled();
        let ba = off.matmul(&self.b, &self.a)?;
        let scaled = off.scale(&ba, self.scaling())?;
        Ok(DeltaMatrix { delta: scaled })
    }

    pub fn deep_clone(&self) -> LoraBlock {
        LoraBlock {
            a: self.a.deep_clone(),
            b: self.b.deep_clone(),
            rank: self.rank,
            alpha: self.alpha,
            frozen: self.frozen,
        }
    }

    fn check_fit(&self, w: &Tensor) -> Result<()> {
        if self.out_dim() != w.rows() || self.in_dim() != w.cols() {
            return Err(AdapterError::Shape {
                expected_rows: self.out_dim(),
                expected_cols: self.in_dim(),
                got_rows: w.rows(),
                got_cols: w.cols(),
            });
        }
        Ok(())
    }
}

/// Two-stage hierarchical adapter. The first stage is a trained
/// [`LoraBlock`] that stays frozen; the second stage factors through rank
/// `r2 < r1` twice: `x (m) -> A1 (r2) -> A2 (r1) -> B1 (r2) -> B2 (n)`.
#[derive(Debug, Clone)]
pub struct HloraBlock {
    pub base: LoraBlock,
    pub a1: Tensor,
    pub a2: Tensor,
    pub b1: Tensor,
    pub b2: Tensor,
    pub rank2: usize,
    pub alpha2: f64,
}

impl HloraBlock {
    /// Wraps a trained first-stage block. Freezes it and initializes the
    /// second stage so its contribution starts at exactly zero (`B2 = 0`;
    /// the inner factors are Gaussian so gradients can flow immediately).
    pub fn grow(mut base: LoraBlock, rank2: usize, alpha2: f64, prng: &mut Prng) -> Result<Self> {
        if rank2 >= base.rank {
            return Err(AdapterError::RankOrder { rank1: base.rank, rank2 });
        }
        validate_rank(rank2, base.out_dim(), base.in_dim())?;
        validate_alpha(alpha2, rank2)?;
        base.set_frozen(true);
        let (n, m, r1) = (base.out_dim(), base.in_dim(), base.rank);
        let a1 = Tensor::gaussian(rank2, m, GAUSSIAN_INIT_STD, prng);
        let a2 = Tensor::gaussian(r1, rank2, GAUSSIAN_INIT_STD, prng);
        let b1 = Tensor::gaussian(rank2, r1, GAUSSIAN_INIT_STD, prng);
        let b2 = Tensor::zeros(n, rank2);
        for t in [&a1, &a2, &b1, &b2] {
            t.set_requires_grad(true);
        }
        Ok(HloraBlock { base, a1, a2, b1, b2, rank2, alpha2 })
    }

    pub fn from_parts(
        base: LoraBlock,
        a1: Tensor,
        a2: Tensor,
        b1: Tensor,
        b2: Tensor,
        alpha2: f64,
    ) -> Result<Self> {
        let rank2 = a1.rows();
        if rank2 >= base.rank {
            return Err(AdapterError::RankOrder { rank1: base.rank, rank2 });
        }
        validate_alpha(alpha2, rank2)?;
        let expect = [
            (a1.rows(), a1.cols(), rank2, base.in_dim()),
            (a2.rows(), a2.cols(), base.rank, rank2),
            (b1.rows(), b1.cols(), rank2, base.rank),
            (b2.rows(), b2.cols(), base.out_dim(), rank2),
        ];
        for (gr, gc, er, ec) in expect {
            if (gr, gc) != (er, ec) {
                return Err(AdapterError::Shape {
                    expected_rows: er,
                    expected_cols: ec,
                    got_rows: gr,
                    got_cols: gc,
                });
            }
        }
        for t in [&a1, &a2, &b1, &b2] {
            t.set_requires_grad(true);
        }
        Ok(HloraBlock { base, a1, a2, b1, b2, rank2, alpha2 })
    }

    pub fn scaling2(&self) -> f64 {
        self.alpha2 / self.rank2 as f64
    }

    /// Only the second-stage factors train; the wrapped base is frozen.
    pub fn trainable(&self) -> Vec<Tensor> {
        vec![self.a1.clone(), self.a2.clone(), self.b1.clone(), self.b2.clone()]
    }

    pub fn deep_clone(&self) -> HloraBlock {
        HloraBlock {
            base: self.base.deep_clone(),
            a1: self.a1.deep_clone(),
            a2: self.a2.deep_clone(),
            b1: self.b1.deep_clone(),
            b2: self.b2.deep_clone(),
            rank2: self.rank2,
            alpha2: self.alpha2,
        }
    }
}

/// A dense weight-space update, the common currency of merge and fusion.
#[derive(Debug, Clone)]
pub struct DeltaMatrix {
    pub delta: Tensor,
}

impl DeltaMatrix {
    pub fn deep_clone(&self) -> DeltaMatrix {
        DeltaMatrix { delta: self.delta.deep_clone() }
    }
}

/// Whatever can hang off one attachment point.
#[derive(Debug, Clone)]
pub enum AdapterSpec {
    Lora(LoraBlock),
    Hlora(HloraBlock),
    /// Independent blocks applied side by side; their deltas add.
    Stack(Vec<LoraBlock>),
    Delta(DeltaMatrix),
}

impl AdapterSpec {
    /// Attachment shape `(n_out, m_in)` this spec applies to. `None` for an
    /// empty stack or a stack whose blocks disagree.
    pub fn dims(&self) -> Option<(usize, usize)> {
        match self {
            AdapterSpec::Lora(b) => Some((b.out_dim(), b.in_dim())),
            AdapterSpec::Hlora(h) => Some((h.base.out_dim(), h.base.in_dim())),
            AdapterSpec::Stack(blocks) => {
                let first = blocks.first()?;
                let dims = (first.out_dim(), first.in_dim());
                blocks.iter().all(|b| (b.out_dim(), b.in_dim()) == dims).then_some(dims)
            }
            AdapterSpec::Delta(d) => Some((d.delta.rows(), d.delta.cols())),
        }
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        match self {
            AdapterSpec::Lora(b) => b.trainable(),
            AdapterSpec::Hlora(h) => h.trainable(),
            AdapterSpec::Stack(blocks) => blocks.iter().flat_map(|b| b.trainable()).collect(),
            AdapterSpec::Delta(_) => Vec::new(),
        }
    }

    pub fn deep_clone(&self) -> AdapterSpec {
        match self {
            AdapterSpec::Lora(b) => AdapterSpec::Lora(b.deep_clone()),
            AdapterSpec::Hlora(h) => AdapterSpec::Hlora(h.deep_clone()),
            AdapterSpec::Stack(blocks) => {
                AdapterSpec::Stack(blocks.iter().map(|b| b.deep_clone()).collect())
            }
            AdapterSpec::Delta(d) => AdapterSpec::Delta(d.deep_clone()),
        }
    }
}

/// Adapters for a whole model, keyed by attachment point name. BTreeMap so
/// iteration (and thus serialization) is in a canonical order.
pub type AdapterSet = BTreeMap<String, AdapterSpec>;

/// `W x + (alpha/r) * B * (A * x)`.
pub fn lora_forward(tape: &Tape, block: &LoraBlock, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    block.check_fit(w)?;
    let base = tape.matmul(w, x)?;
    let update = lora_update(tape, block, x)?;
    Ok(tape.add(&base, &update)?)
}

fn lora_update(tape: &Tape, block: &LoraBlock, x: &Tensor) -> Result<Tensor> {
    let ax = tape.matmul(&block.a, x)?;
    let bax = tape.matmul(&block.b, &ax)?;
    Ok(tape.scale(&bax, block.scaling())?)
}

/// `W x + s1 * B(Ax) + s2 * B2(B1(A2(A1 x)))`: the frozen first stage plus
/// the bottleneck-shaped second stage.
pub fn hlora_forward(tape: &Tape, block: &HloraBlock, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    block.base.check_fit(w)?;
    let base = tape.matmul(w, x)?;
    let stage1 = lora_update(tape, &block.base, x)?;
    let a1x = tape.matmul(&block.a1, x)?;
    let a2a1x = tape.matmul(&block.a2, &a1x)?;
    let b1h = tape.matmul(&block.b1, &a2a1x)?;
    let b2h = tape.matmul(&block.b2, &b1h)?;
    let stage2 = tape.scale(&b2h, block.scaling2())?;
    let with1 = tape.add(&base, &stage1)?;
    Ok(tape.add(&with1, &stage2)?)
}

/// `W x` plus every block's update, applied to the same input.
pub fn stack_forward(tape: &Tape, blocks: &[LoraBlock], w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut out = tape.matmul(w, x)?;
    for block in blocks {
        block.check_fit(w)?;
        let update = lora_update(tape, block, x)?;
        out = tape.add(&out, &update)?;
    }
    Ok(out)
}

/// `(W + delta) x`.
pub fn delta_forward(tape: &Tape, d: &DeltaMatrix, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if d.delta.rows() != w.rows() || d.delta.cols() != w.cols() {
        return Err(AdapterError::Shape {
            expected_rows: d.delta.rows(),
            expected_cols: d.delta.cols(),
            got_rows: w.rows(),
            got_cols: w.cols(),
        });
    }
    let merged = tape.add(w, &d.delta)?;
    Ok(tape.matmul(&merged, x)?)
}

/// Forward through an attachment point with whatever is attached.
pub fn spec_forward(tape: &Tape, spec: &AdapterSpec, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    match spec {
        AdapterSpec::Lora(b) => lora_forward(tape, b, w, x),
        AdapterSpec::Hlora(h) => hlora_forward(tape, h, w, x),
        AdapterSpec::Stack(blocks) => stack_forward(tape, blocks, w, x),
        AdapterSpec::Delta(d) => delta_forward(tape, d, w, x),
    }
}

/// Folds a trained block into the base weights: `W + (alpha/r) * B * A`.
pub fn merge_into_base(w: &Tensor, block: &LoraBlock) -> Result<Tensor> {
    block.check_fit(w)?;
    let d = block.delta()?;
    let off = Tape::disabled();
    Ok(off.add(w, &d.delta)?)
}

/// Weighted sum of adapter deltas, in entry order:
/// `sum_i w_i * (alpha_i/r_i) * B_i * A_i`. All entries must target the
/// same attachment shape. Weights are used as given; no normalization.
pub fn fuse(entries: &[(&LoraBlock, f64)]) -> Result<DeltaMatrix> {
    let Some(((first, _), rest)) = entries.split_first() else {
        return Err(AdapterError::EmptyFusion);
    };
    let (n, m) = (first.out_dim(), first.in_dim());
    for (block, weight) in entries {
        if !weight.is_finite() {
            return Err(AdapterError::FusionWeight(*weight));
        }
        if block.out_dim() != n || block.in_dim() != m {
            return Err(AdapterError::Shape {
                expected_rows: n,
                expected_cols: m,
                got_rows: block.out_dim(),
                got_cols: block.in_dim(),
            });
        }
    }
    let _ = rest;
    let mut acc = vec![0.0; n * m];
    for (block, weight) in entries {
        let d = block.delta()?;
        d.delta.with_data(|dd| {
            for (a, &v) in acc.iter_mut().zip(dd) {
                *a += weight * v;
            }
        });
    }
    let delta = Tensor::from_vec(n, m, acc).map_err(AdapterError::Tensor)?;
    Ok(DeltaMatrix { delta })
}
