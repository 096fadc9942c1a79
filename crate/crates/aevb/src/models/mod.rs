//! The five latent-variable models, behind one trait the training loop
//! drives: each model owns a generative parameter set (theta) and an
//! inference parameter set (phi) and can score a mini-batch with a
//! per-example ELBO estimate that is differentiable in both sets.
//!
//! Noise discipline: every example's base noise is derived from its
//! dataset row index and the batch's stream, never from its position in
//! the batch. This makes estimates reproducible under reshuffling, makes
//! evaluation noise identical across training steps (the batch stream is
//! fixed at eval time), and gives the exact batch-mean decoupling
//! property: duplicating an example in a batch reproduces the same
//! per-example values.

mod fa;
mod gmvae;
mod vae;
mod vrnn;

pub use fa::FaModel;
pub use gmvae::{clustering_accuracy, contingency_table, GmvaeEstimator, GmvaeModel};
pub use vae::{CvaeModel, VaeModel};
pub use vrnn::VrnnModel;

use crate::data::DataSplit;
use crate::error::Result;
use crate::nn::{Bound, ParamSet};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Which model a parameter bundle belongs to; stamped into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Fa,
    Vae,
    Cvae,
    Gmvae,
    Vrnn,
}

impl ModelKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::Fa => "fa",
            ModelKind::Vae => "vae",
            ModelKind::Cvae => "cvae",
            ModelKind::Gmvae => "gmvae",
            ModelKind::Vrnn => "vrnn",
        }
    }

    pub fn from_tag(tag: &str) -> Option<ModelKind> {
        Some(match tag {
            "fa" => ModelKind::Fa,
            "vae" => ModelKind::Vae,
            "cvae" => ModelKind::Cvae,
            "gmvae" => ModelKind::Gmvae,
            "vrnn" => ModelKind::Vrnn,
            _ => return None,
        })
    }
}

/// A mini-batch handed to an estimator: gathered rows, their dataset
/// indices, the noise stream for this step (or the fixed eval stream),
/// and whether training-only machinery (dropout) is live.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Option<Tensor>,
    pub indices: Vec<usize>,
    pub base_rng: SeededRng,
    pub train: bool,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// The noise stream for the example in batch slot `slot`, keyed by
    /// its dataset row index.
    pub fn row_rng(&self, slot: usize) -> SeededRng {
        self.base_rng.derive(self.indices[slot] as u64)
    }

    /// A stream for batch-level randomness (dropout masks), disjoint
    /// from every row stream.
    pub fn aux_rng(&self) -> SeededRng {
        self.base_rng.derive(u64::MAX)
    }
}

/// Per-example noise streams for one estimator call, one per batch slot,
/// advanced in lock-step so repeated draws (per class, per timestep) stay
/// keyed to the example.
pub struct RowNoise {
    rngs: Vec<SeededRng>,
}

impl RowNoise {
    pub fn new(batch: &Batch) -> RowNoise {
        RowNoise { rngs: (0..batch.size()).map(|s| batch.row_rng(s)).collect() }
    }

    /// (B, cols) of standard normals, row b from stream b.
    pub fn normal(&mut self, cols: usize) -> Tensor {
        self.normal_blocks(1, cols)
    }

    /// (blocks*B, cols) of standard normals laid out block-major: the
    /// rows of block k are k*B..(k+1)*B, and each stream contributes its
    /// draws for block 0 first, then block 1, and so on. With blocks=1
    /// this is exactly [`normal`], so single-block and multi-block
    /// callers consume identical noise for the first block.
    pub fn normal_blocks(&mut self, blocks: usize, cols: usize) -> Tensor {
        let b = self.rngs.len();
        let mut data = Vec::with_capacity(blocks * b * cols);
        for _ in 0..blocks {
            for rng in self.rngs.iter_mut() {
                for _ in 0..cols {
                    data.push(rng.normal());
                }
            }
        }
        Tensor::from_vec(vec![blocks * b, cols], data).expect("sized by construction")
    }

    /// (B, cols) of Gumbel(0,1) draws, row b from stream b.
    pub fn gumbel(&mut self, cols: usize) -> Tensor {
        let b = self.rngs.len();
        let mut data = Vec::with_capacity(b * cols);
        for rng in self.rngs.iter_mut() {
            for _ in 0..cols {
                data.push(rng.gumbel());
            }
        }
        Tensor::from_vec(vec![b, cols], data).expect("sized by construction")
    }
}

/// Model-specific evaluation metrics beyond the estimated ELBO.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExtraMetrics {
    /// Exact mean log marginal likelihood (factor analysis only).
    pub evidence: Option<f64>,
    /// Mean classifier entropy over the split (mixture model only).
    pub cond_entropy: Option<f64>,
    /// Best one-to-one cluster/label agreement (mixture model only).
    pub cluster_acc: Option<f64>,
}

/// A latent-variable model trainable by stochastic ELBO ascent.
pub trait LatentModel {
    fn kind(&self) -> ModelKind;

    /// Generative parameters (the model of the data).
    fn theta(&self) -> &ParamSet;
    fn theta_mut(&mut self) -> &mut ParamSet;

    /// Inference parameters (the amortized posterior).
    fn phi(&self) -> &ParamSet;
    fn phi_mut(&mut self) -> &mut ParamSet;

    /// One ELBO estimate per example, shape (B,), built on `tape` from
    /// the given bindings. Estimates are unbiased for the per-example
    /// ELBO (the Gumbel-relaxed mixture estimators are deliberately,
    /// slightly biased) and differentiable through both bindings.
    fn per_example_elbo<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        phi: &Bound<'t>,
        batch: &Batch,
    ) -> Result<Var<'t>>;

    /// Exact or diagnostic metrics over a whole split, where the model
    /// has any (evidence for FA; entropy/accuracy for the mixture).
    fn extra_metrics(&self, _split: &DataSplit) -> Result<ExtraMetrics> {
        Ok(ExtraMetrics::default())
    }
}
