//! Training regimes over two control attributes.
//!
//! All regimes share one mechanical core (sample a batch, compute the loss,
//! backprop, Adam) and differ only in how adapters are created, frozen, and
//! stacked between stages:
//!
//! - `zero_shot`: no training at all, the base model as-is.
//! - `joint`: one adapter set, one stage on a mixed dataset.
//! - `continuous`: one adapter set trained through stage one, then further
//!   trained on stage two (order matters; earlier skills can erode).
//! - `multi_adapter`: stage one trains a set that is then frozen; stage two
//!   trains a second set stacked beside it.
//! - `fusion`: two sets trained independently, combined later in weight
//!   space by [`crate::adapters::fuse`].
//! - `hlora`: stage one trains a set; each block is then wrapped with a
//!   lower-rank second stage that trains while stage one stays frozen.

use super::{dpo_loss, sft_loss, AdamState, DpoExample, ObjectiveError, Result, SftExample};
use crate::adapters::{AdapterSet, AdapterSpec, HloraBlock, LoraBlock};
use crate::model::TinyLm;
use crate::tensor::{Prng, Tape};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "objective")]
pub enum Objective {
    Sft,
    Dpo {
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

fn default_beta() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    ZeroShot,
    Joint,
    Continuous,
    MultiAdapter,
    Fusion,
    Hlora,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::ZeroShot => "zero_shot",
            Regime::Joint => "joint",
            Regime::Continuous => "continuous",
            Regime::MultiAdapter => "multi_adapter",
            Regime::Fusion => "fusion",
            Regime::Hlora => "hlora",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    /// Key into the dataset map passed to [`run_schedule`].
    pub dataset: String,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub regime: Regime,
    pub stages: Vec<StageSpec>,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        let want: &str = match self.regime {
            Regime::ZeroShot if n == 0 => return Ok(()),
            Regime::ZeroShot => "no stages",
            Regime::Joint if n == 1 => "",
            Regime::Joint => "exactly 1 stage",
            Regime::Continuous | Regime::MultiAdapter if n == 2 => "",
            Regime::Continuous | Regime::MultiAdapter => "exactly 2 stages",
            Regime::Fusion | Regime::Hlora if n == 2 => "",
            Regime::Fusion | Regime::Hlora => "exactly 2 stages",
        };
        if !want.is_empty() {
            return Err(ObjectiveError::BadSchedule(format!(
                "{} needs {want}, got {n}",
                self.regime.as_str()
            )));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.steps == 0 {
                return Err(ObjectiveError::BadSchedule(format!("stage {i} has zero steps")));
            }
            if !stage.lr.is_finite() || stage.lr <= 0.0 {
                return Err(ObjectiveError::BadLearningRate(stage.lr));
            }
            if stage.dataset.is_empty() {
                return Err(ObjectiveError::BadSchedule(format!("stage {i} names no dataset")));
            }
        }
        Ok(())
    }
}

/// Tokenized training data, keyed by the names stages refer to.
pub enum Dataset {
    Sft(Vec<SftExample>),
    Dpo(Vec<DpoExample>),
}

impl Dataset {
    fn len(&self) -> usize {
        match self {
            Dataset::Sft(v) => v.len(),
            Dataset::Dpo(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub rank: usize,
    pub alpha: f64,
    /// Second-stage rank and scale numerator; only the hierarchical regime
    /// reads them.
    pub rank2: usize,
    pub alpha2: f64,
    pub attach_points: Vec<String>,
    pub batch_size: usize,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            rank: 32,
            alpha: 16.0,
            rank2: 16,
            alpha2: 8.0,
            attach_points: Vec::new(),
            batch_size: 4,
            objective: Objective::Sft,
            seed: 0,
        }
    }
}

/// Attention projections on every layer: the default attachment set.
pub fn default_attach_points(model: &TinyLm) -> Vec<String> {
    model
        .attachment_points()
        .into_iter()
        .filter(|name| name.contains(".attn."))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LossPoint {
    pub stage: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    /// Named adapter snapshots, in production order. Names are stable per
    /// regime: `joint` gives "adapter"; `continuous` gives "stage1" and
    /// "final"; `multi_adapter` and `fusion` give "adapter1" and "adapter2";
    /// `hlora` gives "stage1" and "hlora".
    pub artifacts: Vec<(String, AdapterSet)>,
    pub losses: Vec<LossPoint>,
}

struct Trainer<'a> {
    model: &'a mut TinyLm,
    reference: Option<TinyLm>,
    datasets: &'a BTreeMap<String, Dataset>,
    opts: &'a TrainOpts,
    prng: Prng,
    losses: Vec<LossPoint>,
}

impl<'a> Trainer<'a> {
    fn dataset(&self, name: &str) -> Result<&'a Dataset> {
        self.datasets.get(name).ok_or_else(|| ObjectiveError::MissingDataset(name.into()))
    }

    fn fresh_blocks(&mut self) -> Result<Vec<(String, LoraBlock)>> {
        let mut out = Vec::with_capacity(self.opts.attach_points.len());
        for point in &self.opts.attach_points {
            let layer = self.model.point(point)?;
            let (n, m) = (layer.w.rows(), layer.w.cols());
            let block = LoraBlock::init(n, m, self.opts.rank, self.opts.alpha, &mut self.prng)?;
            out.push((point.clone(), block));
        }
        Ok(out)
    }

    fn attach_fresh(&mut self) -> Result<()> {
        for (point, block) in self.fresh_blocks()? {
            self.model.attach(&point, AdapterSpec::Lora(block))?;
        }
        Ok(())
    }

    /// The mechanical core shared by every stage of every regime.
    fn run_stage(&mut self, stage_idx: usize, spec: &StageSpec) -> Result<()> {
        let data = self.dataset(&spec.dataset)?;
        if data.len() == 0 {
            return Err(ObjectiveError::EmptyDataset(spec.dataset.clone()));
        }
        match (&self.opts.objective, data) {
            (Objective::Sft, Dataset::Sft(_)) | (Objective::Dpo { .. }, Dataset::Dpo(_)) => {}
            (Objective::Sft, _) => {
                return Err(ObjectiveError::ObjectiveMismatch {
                    dataset: spec.dataset.clone(),
                    objective: "sft",
                })
            }
            (Objective::Dpo { .. }, _) => {
                return Err(ObjectiveError::ObjectiveMismatch {
                    dataset: spec.dataset.clone(),
                    objective: "dpo",
                })
            }
        }
        let params = self.model.trainable_params();
        if params.is_empty() {
            return Err(ObjectiveError::NoTrainableParams { stage: stage_idx });
        }
        let mut adam = AdamState::new(&params);
        let mut stage_prng = self.prng.fork();
        for step in 0..spec.steps {
            let tape = Tape::new();
            let loss = match data {
                Dataset::Sft(examples) => {
                    let batch: Vec<SftExample> = (0..self.opts.batch_size)
                        .map(|_| examples[stage_prng.gen_range(examples.len())].clone())
                        .collect();
                    sft_loss(&tape, self.model, &batch)?
                }
                Dataset::Dpo(examples) => {
                    let Objective::Dpo { beta } = self.opts.objective else {
                        unreachable!("kind checked above")
                    };
                    let batch: Vec<DpoExample> = (0..self.opts.batch_size)
                        .map(|_| examples[stage_prng.gen_range(examples.len())].clone())
                        .collect();
                    let reference =
                        self.reference.as_ref().expect("reference built for dpo runs");
                    dpo_loss(&tape, self.model, reference, &batch, beta)?.loss
                }
            };
            let value = loss.item()?;
            tape.backward(&loss)?;
            adam.step(&params, spec.lr)?;
            self.losses.push(LossPoint { stage: stage_idx, step, loss: value });
        }
        Ok(())
    }
}

/// Runs a whole schedule on a clean model (no adapters attached). On
/// return the model still carries the final stage's adapters, so the caller
/// can evaluate immediately; saved artifacts are deep copies taken at the
/// moment each stage finished.
pub fn run_schedule(
    model: &mut TinyLm,
    schedule: &Schedule,
    datasets: &BTreeMap<String, Dataset>,
    opts: &TrainOpts,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if !model.attached_points().is_empty() {
        return Err(ObjectiveError::ModelNotClean);
    }
    if opts.batch_size == 0 {
        return Err(ObjectiveError::BadSchedule("batch_size must be positive".into()));
    }
    if opts.attach_points.is_empty() && schedule.regime != Regime::ZeroShot {
        return Err(ObjectiveError::BadSchedule("no attachment points configured".into()));
    }

    let reference = match opts.objective {
        Objective::Dpo { .. } if schedule.regime != Regime::ZeroShot => Some(model.clone_base()),
        _ => None,
    };
    let mut trainer = Trainer {
        model,
        reference,
        datasets,
        opts,
        prng: Prng::new(opts.seed),
        losses: Vec::new(),
    };
    match run_regimes(&mut trainer, schedule) {
        Ok(artifacts) => Ok(TrainOutcome { artifacts, losses: trainer.losses }),
        Err(e) => {
            // The model was clean on entry; leave it clean on failure.
            trainer.model.detach_all();
            Err(e)
        }
    }
}

fn run_regimes(trainer: &mut Trainer, schedule: &Schedule) -> Result<Vec<(String, AdapterSet)>> {
    let mut artifacts: Vec<(String, AdapterSet)> = Vec::new();
    match schedule.regime {
        Regime::ZeroShot => {}
        Regime::Joint => {
            trainer.attach_fresh()?;
            trainer.run_stage(0, &schedule.stages[0])?;
            artifacts.push(("adapter".into(), trainer.model.export_adapters()));
        }
        Regime::Continuous => {
            trainer.attach_fresh()?;
            trainer.run_stage(0, &schedule.stages[0])?;
            artifacts.push(("stage1".into(), trainer.model.export_adapters()));
            trainer.run_stage(1, &schedule.stages[1])?;
            artifacts.push(("final".into(), trainer.model.export_adapters()));
        }
        Regime::MultiAdapter => {
            trainer.attach_fresh()?;
            trainer.run_stage(0, &schedule.stages[0])?;
            artifacts.push(("adapter1".into(), trainer.model.export_adapters()));
            // Freeze stage one in place and stack a fresh trainable block
            // beside it at every point.
            let points = trainer.opts.attach_points.clone();
            for point in &points {
                let spec = trainer.model.detach(point)?;
                let AdapterSpec::Lora(mut first) = spec else {
                    unreachable!("stage one attaches plain low-rank blocks")
                };
                first.set_frozen(true);
                let layer = trainer.model.point(point)?;
                let (n, m) = (layer.w.rows(), layer.w.cols());
                let second =
                    LoraBlock::init(n, m, trainer.opts.rank, trainer.opts.alpha, &mut trainer.prng)?;
                trainer.model.attach(point, AdapterSpec::Stack(vec![first, second]))?;
            }
            trainer.run_stage(1, &schedule.stages[1])?;
            let mut second_set = AdapterSet::new();
            for point in &points {
                let AdapterSpec::Stack(blocks) = trainer.model.point(point)?.attached().unwrap()
                else {
                    unreachable!("stage two runs on stacks")
                };
                second_set.insert(point.clone(), AdapterSpec::Lora(blocks[1].deep_clone()));
            }
            artifacts.push(("adapter2".into(), second_set));
        }
        Regime::Fusion => {
            trainer.attach_fresh()?;
            trainer.run_stage(0, &schedule.stages[0])?;
            artifacts.push(("adapter1".into(), trainer.model.export_adapters()));
            trainer.model.detach_all();
            trainer.attach_fresh()?;
            trainer.run_stage(1, &schedule.stages[1])?;
            artifacts.push(("adapter2".into(), trainer.model.export_adapters()));
        }
        Regime::Hlora => {
            trainer.attach_fresh()?;
            trainer.run_stage(0, &schedule.stages[0])?;
            artifacts.push(("stage1".into(), trainer.model.export_adapters()));
            let points = trainer.opts.attach_points.clone();
            for point in &points {
                let spec = trainer.model.detach(point)?;
                let AdapterSpec::Lora(first) = spec else {
                    unreachable!("stage one attaches plain low-rank blocks")
                };
                let grown = HloraBlock::grow(
                    first,
                    trainer.opts.rank2,
                    trainer.opts.alpha2,
                    &mut trainer.prng,
                )?;
                trainer.model.attach(point, AdapterSpec::Hlora(grown))?;
            }
            trainer.run_stage(1, &schedule.stages[1])?;
            artifacts.push(("hlora".into(), trainer.model.export_adapters()));
        }
    }
    Ok(artifacts)
}
