//! Joint pretraining (span corruption plus one cross-lingual task per step)
//! and text-to-text fine-tuning.
//!
//! Every batch is a pure function of `(seed, update index)`: the example
//! sampler for update `t` draws from its own ChaCha stream, so a run resumed
//! from a checkpoint follows the uninterrupted trajectory exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::corpus::{MonolingualCorpus, ParallelCorpus, SamplingDistribution, DEFAULT_SAMPLING_ALPHA};
use crate::corruption::{
    make_mt, make_sc, make_tpsc, make_tsc, Task, TrainingExample, DEFAULT_MEAN_SPAN_LEN, DEFAULT_NOISE_DENSITY,
};
use crate::error::{bail, Result};
use crate::model::{loss_and_grads, SeqPair};
use crate::optim::OptimizerConfig;
use crate::pnat::{partition_groups, GroupPartition, DEFAULT_GROUPS};
use crate::tasks::FormattedExample;
use crate::vocab::{TokenId, Vocabulary};

/// What one pretraining run does per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainPlan {
    /// Cross-lingual task paired with SC; `None` trains on SC alone.
    pub cross_task: Option<Task>,
    pub n_groups: usize,
    pub noise_density: f64,
    pub mean_span_len: usize,
    /// Examples per term: each step uses one SC batch and one X batch.
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub alpha: f64,
}

impl PretrainPlan {
    pub fn desk(cross_task: Option<Task>, seed: u64) -> Self {
        Self {
            cross_task,
            n_groups: DEFAULT_GROUPS,
            noise_density: DEFAULT_NOISE_DENSITY,
            mean_span_len: DEFAULT_MEAN_SPAN_LEN,
            batch_size: 16,
            steps: 2000,
            seed,
            alpha: DEFAULT_SAMPLING_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cross_task == Some(Task::Sc) {
            bail!(InvalidArgument, "cross task must be MT, TPSC, TSC or none");
        }
        if self.n_groups == 0 || self.batch_size == 0 || self.mean_span_len == 0 {
            bail!(InvalidArgument, "n_groups, batch_size and mean_span_len must be >= 1");
        }
        if !(self.noise_density > 0.0 && self.noise_density <= 1.0) {
            bail!(InvalidArgument, "noise density {} outside (0, 1]", self.noise_density);
        }
        Ok(())
    }
}

/// Pretraining inputs.
#[derive(Debug, Clone, Copy)]
pub struct Corpora<'a> {
    pub mono: &'a [MonolingualCorpus],
    pub parallel: &'a [ParallelCorpus],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sc: f64,
    pub loss_x: f64,
    pub grad_norm: f64,
}

pub const PRETRAIN_CSV_HEADER: &str = "step,lr,loss_total,loss_sc,loss_x,grad_norm";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss_total, self.loss_sc, self.loss_x, self.grad_norm
        )
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(PRETRAIN_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Sampler for one update index.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn clipped(s: &[TokenId], max: usize) -> &[TokenId] {
    &s[..s.len().min(max)]
}

fn to_pair(ex: TrainingExample, n_groups: usize) -> Result<SeqPair> {
    let partition = partition_groups(&ex, n_groups)?;
    Ok(SeqPair {
        input: ex.input,
        target: ex.target,
        partition,
    })
}

/// Draws the SC and X batches of one update. Sentences are truncated so
/// every input fits the model's `max_len`.
pub struct BatchSampler<'a> {
    plan: &'a PretrainPlan,
    corpora: Corpora<'a>,
    vocab: &'a Vocabulary,
    max_len: usize,
    mono_dist: SamplingDistribution,
    par_dist: Option<SamplingDistribution>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(plan: &'a PretrainPlan, corpora: Corpora<'a>, vocab: &'a Vocabulary, max_len: usize) -> Result<Self> {
        plan.validate()?;
        let mono_sizes: Vec<usize> = corpora.mono.iter().map(|c| c.sentences.len()).collect();
        if mono_sizes.iter().all(|&n| n == 0) {
            bail!(Data, "no monolingual sentences for span corruption");
        }
        let par_dist = match plan.cross_task {
            None => None,
            Some(task) => {
                let sizes: Vec<usize> = corpora.parallel.iter().map(|c| c.len()).collect();
                if sizes.iter().all(|&n| n == 0) {
                    bail!(Data, "cross task {task} needs a parallel corpus");
                }
                Some(SamplingDistribution::new(&sizes, plan.alpha)?)
            }
        };
        if max_len < 3 {
            bail!(InvalidArgument, "max_len {max_len} too small");
        }
        Ok(Self {
            plan,
            corpora,
            vocab,
            max_len,
            mono_dist: SamplingDistribution::new(&mono_sizes, plan.alpha)?,
            par_dist,
        })
    }

    fn sc_example(&self, rng: &mut ChaCha8Rng) -> Result<TrainingExample> {
        let c = &self.corpora.mono[self.mono_dist.sample(rng)];
        let s = &c.sentences[rng.random_range(0..c.sentences.len())];
        let p = self.plan;
        make_sc(clipped(s, self.max_len), p.noise_density, p.mean_span_len, rng, self.vocab)
    }

    fn x_example(&self, task: Task, dist: &SamplingDistribution, rng: &mut ChaCha8Rng) -> Result<TrainingExample> {
        let c = &self.corpora.parallel[dist.sample(rng)];
        let (e, f) = &c.pairs[rng.random_range(0..c.pairs.len())];
        let p = self.plan;
        let side = (self.max_len - 1) / 2;
        let (e, f) = (clipped(e, side), clipped(f, side));
        match task {
            Task::Mt => {
                if rng.random_bool(0.5) {
                    make_mt(e, f)
                } else {
                    make_mt(f, e)
                }
            }
            Task::Tpsc => make_tpsc(e, f, p.noise_density, p.mean_span_len, rng, self.vocab),
            Task::Tsc => make_tsc(e, f, p.noise_density, p.mean_span_len, rng, self.vocab),
            Task::Sc => bail!(InvalidArgument, "SC is not a cross task"),
        }
    }

    /// Examples of update `step` (1-based): SC batch first, then X batch.
    pub fn examples(&self, step: u64) -> Result<(Vec<TrainingExample>, Vec<TrainingExample>)> {
        let mut rng = step_rng(self.plan.seed, step);
        let sc = (0..self.plan.batch_size)
            .map(|_| self.sc_example(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let x = match (self.plan.cross_task, &self.par_dist) {
            (Some(task), Some(dist)) => (0..self.plan.batch_size)
                .map(|_| self.x_example(task, dist, &mut rng))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        Ok((sc, x))
    }

    pub fn batches(&self, step: u64) -> Result<(Vec<SeqPair>, Vec<SeqPair>)> {
        let (sc, x) = self.examples(step)?;
        let n_g = self.plan.n_groups;
        let sc = sc.into_iter().map(|e| to_pair(e, n_g)).collect::<Result<Vec<_>>>()?;
        let x = x.into_iter().map(|e| to_pair(e, n_g)).collect::<Result<Vec<_>>>()?;
        Ok((sc, x))
    }
}

/// Fresh pretraining state.
pub fn init_pretrain(
    model: &crate::model::ModelConfig,
    optimizer: OptimizerConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Checkpoint> {
    Checkpoint::init(model, optimizer, vocab, seed, Phase::Pretrain)
}

/// Runs updates from `state.step()` until `plan.steps`, calling `on_step`
/// after each one. The objective of a step is `L_SC + L_X`, each the batch
/// mean of per-example grouped losses, with a single optimizer update on the
/// summed gradient.
pub fn pretrain(
    plan: &PretrainPlan,
    corpora: Corpora<'_>,
    vocab: &Vocabulary,
    state: &mut Checkpoint,
    mut on_step: impl FnMut(&StepMetrics, &Checkpoint) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    if state.phase != Phase::Pretrain {
        bail!(InvalidArgument, "checkpoint is a fine-tuning checkpoint");
    }
    state.check_vocab(vocab)?;
    let sampler = BatchSampler::new(plan, corpora, vocab, state.params.config().max_len)?;
    let start = vocab.bos();
    let mut log = Vec::new();
    while state.step() < plan.steps {
        let t = state.step() + 1;
        let (sc, x) = sampler.batches(t)?;
        let sc_out = loss_and_grads(&state.params, &sc, start)?;
        let mut grads = sc_out.grads;
        let loss_x = if x.is_empty() {
            0.0
        } else {
            let x_out = loss_and_grads(&state.params, &x, start)?;
            grads.add_assign(&x_out.grads);
            x_out.loss
        };
        let stats = state.optimizer.step(&mut state.params, &grads)?;
        let m = StepMetrics {
            step: t,
            lr: stats.lr,
            loss_total: sc_out.loss + loss_x,
            loss_sc: sc_out.loss,
            loss_x,
            grad_norm: stats.grad_norm,
        };
        on_step(&m, state)?;
        log.push(m);
    }
    Ok(log)
}

/// Fine-tuning batch size and sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetunePlan {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub const FINETUNE_CSV_HEADER: &str = "step,lr,loss,grad_norm";

impl FinetuneMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.lr, self.loss, self.grad_norm)
    }
}

/// A fine-tuning state from pretrained weights: same parameters, fresh
/// optimizer moments and schedule.
pub fn start_finetune(pretrained: &Checkpoint, optimizer: OptimizerConfig, vocab: &Vocabulary) -> Result<Checkpoint> {
    pretrained.check_vocab(vocab)?;
    let opt = crate::optim::OptimizerState::new(optimizer, &pretrained.params)?;
    Ok(Checkpoint {
        phase: Phase::Finetune,
        params: pretrained.params.clone(),
        optimizer: opt,
        vocab_fingerprint: pretrained.vocab_fingerprint.clone(),
    })
}

/// Plain text-to-text pair: one decoding group, causal mask, decoder started
/// by `<bos>`.
pub fn finetune_pair(ex: &FormattedExample) -> Result<SeqPair> {
    let target = ex.decoder_target().to_vec();
    Ok(SeqPair {
        input: ex.input_ids.clone(),
        partition: GroupPartition::single(target.len())?,
        target,
    })
}

/// Runs fine-tuning updates from `state.step()` until `plan.steps`.
pub fn finetune(
    plan: &FinetunePlan,
    data: &[FormattedExample],
    vocab: &Vocabulary,
    state: &mut Checkpoint,
    mut on_step: impl FnMut(&FinetuneMetrics, &Checkpoint) -> Result<()>,
) -> Result<Vec<FinetuneMetrics>> {
    if state.phase != Phase::Finetune {
        bail!(InvalidArgument, "start fine-tuning from a pretrained checkpoint with start_finetune");
    }
    state.check_vocab(vocab)?;
    if data.is_empty() {
        bail!(Data, "empty fine-tuning set");
    }
    if plan.batch_size == 0 {
        bail!(InvalidArgument, "batch_size must be >= 1");
    }
    let max_len = state.params.config().max_len;
    let pairs = data
        .iter()
        .map(|ex| {
            let mut p = finetune_pair(ex)?;
            if p.input.len() > max_len || p.target.len() > max_len {
                p.input.truncate(max_len);
                p.target.truncate(max_len);
                p.partition = GroupPartition::single(p.target.len())?;
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut log = Vec::new();
    while state.step() < plan.steps {
        let t = state.step() + 1;
        let mut rng = step_rng(plan.seed, t);
        let batch: Vec<SeqPair> = (0..plan.batch_size)
            .map(|_| pairs[rng.random_range(0..pairs.len())].clone())
            .collect();
        let out = loss_and_grads(&state.params, &batch, vocab.bos())?;
        let stats = state.optimizer.step(&mut state.params, &out.grads)?;
        let m = FinetuneMetrics {
            step: t,
            lr: stats.lr,
            loss: out.loss,
            grad_norm: stats.grad_norm,
        };
        on_step(&m, state)?;
        log.push(m);
    }
    Ok(log)
}
