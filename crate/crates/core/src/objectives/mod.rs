//! Training objectives over the tiny LM.
//!
//! Supervised fine-tuning scores only response positions: the prompt
//! conditions but never contributes loss. Preference optimization compares
//! policy and reference sequence log-probs on chosen/rejected pairs; the
//! reference model is evaluated off-tape so no gradient ever reaches it.

mod adam;
mod schedule;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{
    default_attach_points, run_schedule, Dataset, LossPoint, Objective, Regime, Schedule,
    StageSpec, TrainOpts, TrainOutcome,
};

use crate::model::{ModelError, TinyLm};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("example has an empty {0}")]
    EmptyField(&'static str),
    #[error("preference pair has identical chosen and rejected responses")]
    IdenticalPair,
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("optimizer state tracks {expected} params, got {got}")]
    StateMismatch { expected: usize, got: usize },
    #[error("parameter update produced non-finite values")]
    NonFiniteUpdate,
    #[error("stage {stage} has no trainable parameters")]
    NoTrainableParams { stage: usize },
    #[error("schedule invalid: {0}")]
    BadSchedule(String),
    #[error("dataset '{0}' missing")]
    MissingDataset(String),
    #[error("dataset '{0}' is empty")]
    EmptyDataset(String),
    #[error("dataset '{dataset}' does not match the {objective} objective")]
    ObjectiveMismatch { dataset: String, objective: &'static str },
    #[error("model already has adapters attached; training owns the adapter lifecycle")]
    ModelNotClean,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] crate::adapters::AdapterError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// One supervised example, already tokenized: `prompt` begins with BOS,
/// `response` ends with EOS.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

/// One preference pair, already tokenized like [`SftExample`].
#[derive(Debug, Clone)]
pub struct DpoExample {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

fn teacher_forcing(
    prompt: &[usize],
    response: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Vec<bool>)> {
    if prompt.is_empty() {
        return Err(ObjectiveError::EmptyField("prompt"));
    }
    if response.is_empty() {
        return Err(ObjectiveError::EmptyField("response"));
    }
    let full: Vec<usize> = prompt.iter().chain(response).copied().collect();
    let inputs = full[..full.len() - 1].to_vec();
    let targets = full[1..].to_vec();
    // Target index j scores full[j + 1]; response positions start at
    // full[prompt.len()].
    let mask: Vec<bool> = (0..targets.len()).map(|j| j + 1 >= prompt.len()).collect();
    Ok((inputs, targets, mask))
}

/// Mean token NLL over the response positions of one example.
pub fn sft_example_loss(tape: &Tape, model: &TinyLm, example: &SftExample) -> Result<Tensor> {
    let (inputs, targets, mask) = teacher_forcing(&example.prompt, &example.response)?;
    let logits = model.forward(tape, &inputs)?;
    let logp = tape.log_softmax_rows(&logits)?;
    Ok(tape.gather_nll(&logp, &targets, &mask)?)
}

/// Mean of per-example losses over the batch.
pub fn sft_loss(tape: &Tape, model: &TinyLm, batch: &[SftExample]) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut acc = sft_example_loss(tape, model, &batch[0])?;
    for example in &batch[1..] {
        let loss = sft_example_loss(tape, model, example)?;
        acc = tape.add(&acc, &loss)?;
    }
    Ok(tape.scale(&acc, 1.0 / batch.len() as f64)?)
}

/// Log-probability of `response` given `prompt`, summed over response
/// tokens, as a 1x1 tensor on the tape.
pub fn sequence_log_prob(
    tape: &Tape,
    model: &TinyLm,
    prompt: &[usize],
    response: &[usize],
) -> Result<Tensor> {
    let (inputs, targets, mask) = teacher_forcing(prompt, response)?;
    let logits = model.forward(tape, &inputs)?;
    let logp = tape.log_softmax_rows(&logits)?;
    let mean_nll = tape.gather_nll(&logp, &targets, &mask)?;
    // gather_nll averages -logp over response tokens; undo both.
    Ok(tape.scale(&mean_nll, -(response.len() as f64))?)
}

/// Preference loss and the margins that produced it.
pub struct DpoOutcome {
    pub loss: Tensor,
    /// Per-example `(policy - reference)` log-prob gap, chosen minus
    /// rejected. Positive means the policy already prefers the chosen
    /// response more than the reference does.
    pub margins: Vec<f64>,
}

impl DpoOutcome {
    pub fn mean_margin(&self) -> f64 {
        self.margins.iter().sum::<f64>() / self.margins.len() as f64
    }
}

/// `-log sigmoid(beta * margin)` averaged over the batch, where
/// `margin = (logp_policy(chosen) - logp_ref(chosen))
///         - (logp_policy(rejected) - logp_ref(rejected))`.
///
/// The reference model runs on a disabled tape: its log-probs enter the
/// graph as constants, so it receives no gradient by construction.
pub fn dpo_loss(
    tape: &Tape,
    policy: &TinyLm,
    reference: &TinyLm,
    batch: &[DpoExample],
    beta: f64,
) -> Result<DpoOutcome> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if !beta.is_finite() || beta <= 0.0 {
        return Err(ObjectiveError::BadBeta(beta));
    }
    let off = Tape::disabled();
    let mut total: Option<Tensor> = None;
    let mut margins = Vec::with_capacity(batch.len());
    for example in batch {
        if example.chosen == example.rejected {
            return Err(ObjectiveError::IdenticalPair);
        }
        let ref_chosen = sequence_log_prob(&off, reference, &example.prompt, &example.chosen)?
            .item()?;
        let ref_rejected =
            sequence_log_prob(&off, reference, &example.prompt, &example.rejected)?.item()?;
        let pol_chosen = sequence_log_prob(tape, policy, &example.prompt, &example.chosen)?;
        let pol_rejected = sequence_log_prob(tape, policy, &example.prompt, &example.rejected)?;

        let policy_gap = tape.sub(&pol_chosen, &pol_rejected)?;
        let ref_gap = Tensor::scalar(ref_chosen - ref_rejected)?;
        let margin = tape.sub(&policy_gap, &ref_gap)?;
        margins.push(margin.item()?);
        let loss = tape.neg_log_sigmoid(&tape.scale(&margin, beta)?)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &loss)?,
            None => loss,
        });
    }
    let loss = tape.scale(&total.expect("batch nonempty"), 1.0 / batch.len() as f64)?;
    Ok(DpoOutcome { loss, margins })
}
