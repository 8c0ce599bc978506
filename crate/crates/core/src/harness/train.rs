//! Training loop shared by pretraining and both fine-tuning tasks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PairExample;
use crate::embeddings::{assemble, Vocabulary};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{save_checkpoint, Checkpoint};
use crate::harness::config::TrainConfig;
use crate::harness::schedule::lr_schedule;
use crate::model::{ModelConfig, Provenance};
use crate::numerics::{accumulate, Gradients, Graph, ParameterStore, Var};
use crate::pretraining::{joint_loss, sample_vlm_pair, MaskPlan};
use crate::retrieval::{evaluate_retrieval, sample_triplets, triplet_example_loss, Direction, RecallEntry, DEFAULT_KS};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::vcr::{evaluate_vcr, prepare_choices, score_choices, vcr_loss, ChoiceInput, ChoiceMode, VcrAccuracy, VcrExample};

// Stream tags keep every sampled quantity on its own sequence.
const TAG_SHUFFLE: u64 = 1;
const TAG_PRETRAIN: u64 = 2;
const TAG_TRIPLET: u64 = 3;
const TAG_DROPOUT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Optimizer update index, starting at 1.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recall: Vec<RecallEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vcr: Option<VcrAccuracy>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl RunLog {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("run log serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Gradient accumulation plus scheduled Adam updates.
///
/// Micro-batch gradients are summed; once `accumulation_steps` have arrived
/// their mean is applied. Update `u` (1-based) of `N` uses the schedule at
/// step `u` of `N + 1`, so no update gets a zero rate.
pub struct Optimizer<S: Scalar> {
    acc: Gradients<S>,
    pending: usize,
    accumulation_steps: usize,
    total_updates: u64,
    updates: u64,
    cfg: TrainConfig,
    base_lr: f64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(store: &ParameterStore<S>, cfg: &TrainConfig, base_lr: f64, total_updates: u64) -> Self {
        Optimizer {
            acc: store.zero_gradients(),
            pending: 0,
            accumulation_steps: cfg.accumulation_steps,
            total_updates,
            updates: 0,
            cfg: cfg.clone(),
            base_lr,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Adds one micro-batch gradient; returns the learning rate if an update was applied.
    pub fn push(&mut self, store: &mut ParameterStore<S>, grads: &Gradients<S>) -> Result<Option<f64>> {
        accumulate(&mut self.acc, grads, S::one())?;
        self.pending += 1;
        if self.pending == self.accumulation_steps {
            return self.flush(store);
        }
        Ok(None)
    }

    /// Applies whatever has been accumulated (a short group at the end of an epoch).
    pub fn flush(&mut self, store: &mut ParameterStore<S>) -> Result<Option<f64>> {
        if self.pending == 0 {
            return Ok(None);
        }
        let inv = S::lit(1.0 / self.pending as f64);
        for g in self.acc.values_mut() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        self.updates += 1;
        let lr = lr_schedule(self.updates, self.total_updates.max(self.updates) + 1, self.base_lr, self.cfg.warmup_fraction, self.cfg.decay)?;
        store.adam_step(&self.acc, &self.cfg.adam(lr))?;
        self.acc = store.zero_gradients();
        self.pending = 0;
        Ok(Some(lr))
    }
}

/// Loss nodes of one training example.
pub struct ExampleLoss {
    pub total: Var,
    pub components: Vec<(&'static str, Var)>,
}

/// Result of a training-set evaluation.
#[derive(Clone, Debug, Default)]
pub struct EpochEval {
    pub recall: Vec<RecallEntry>,
    pub vcr: Option<VcrAccuracy>,
    pub perfect: bool,
}

/// Where and as what checkpoints are written.
#[derive(Clone, Debug)]
pub struct CheckpointTarget<'a> {
    pub model: &'a ModelConfig,
    pub provenance: Provenance,
    pub seed: u64,
    pub out_dir: Option<&'a Path>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_id: Option<String>,
}

fn write_checkpoint<S: Scalar>(target: &CheckpointTarget<'_>, store: &ParameterStore<S>, name: &str) -> Result<Option<(PathBuf, String)>> {
    let Some(dir) = target.out_dir else { return Ok(None) };
    let path = dir.join(name);
    let ckpt = Checkpoint { model: target.model.clone(), provenance: target.provenance, seed: target.seed, store: store.cast() };
    let id = save_checkpoint(&path, &ckpt)?;
    Ok(Some((path, id)))
}

fn finite_or_abort(step: u64, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step: step as usize, component: name.to_string(), value })
    }
}

/// Runs `cfg.epochs` epochs of seeded, shuffled micro-batches over examples of
/// the given assembled `lengths`, calling `loss_fn(graph, example, epoch)`.
pub fn run_training<S, L, E>(
    cfg: &TrainConfig,
    base_lr: f64,
    store: &mut ParameterStore<S>,
    lengths: &[usize],
    target: &CheckpointTarget<'_>,
    mut loss_fn: L,
    mut eval_fn: E,
) -> Result<TrainOutcome>
where
    S: Scalar,
    L: for<'g> FnMut(&mut Graph<'g, S>, usize, usize) -> Result<ExampleLoss>,
    E: FnMut(&ParameterStore<S>) -> Result<EpochEval>,
{
    cfg.validate()?;
    if lengths.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    let max_len = target.model.encoder.max_seq_len;
    if let Some(&len) = lengths.iter().find(|&&l| l > max_len) {
        return Err(Error::Length { len, max: max_len });
    }
    let batches_per_epoch = lengths.len().div_ceil(cfg.batch_size);
    let updates_per_epoch = batches_per_epoch.div_ceil(cfg.accumulation_steps);
    let total = (updates_per_epoch * cfg.epochs) as u64;
    let mut opt = Optimizer::new(store, cfg, base_lr, total);
    let mut log = RunLog::default();
    let start = Instant::now();
    let mut last = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let (mut group_loss, mut group_parts, mut group_n) = (0.0, BTreeMap::<String, f64>::new(), 0usize);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let step = opt.updates() + 1;
            let alpha = S::lit(1.0 / batch.len() as f64);
            let mut grads = store.zero_gradients();
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut g = Graph::new(&*store);
                let l = loss_fn(&mut g, i, epoch)?;
                for (name, v) in &l.components {
                    let value = g.scalar_value(*v)?.as_f64();
                    finite_or_abort(step, name, value)?;
                    *group_parts.entry(name.to_string()).or_default() += value / batch.len() as f64;
                }
                let total_value = g.scalar_value(l.total)?.as_f64();
                finite_or_abort(step, "total", total_value)?;
                batch_loss += total_value / batch.len() as f64;
                accumulate(&mut grads, &g.backward(l.total)?, alpha)?;
            }
            group_loss += batch_loss;
            group_n += 1;
            epoch_loss += batch_loss;
            if let Some(lr) = opt.push(store, &grads)? {
                log.steps.push(StepRecord {
                    step: opt.updates(),
                    epoch,
                    lr,
                    loss: group_loss / group_n as f64,
                    components: group_parts.iter().map(|(k, v)| (k.clone(), v / group_n as f64)).collect(),
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                });
                (group_loss, group_n) = (0.0, 0);
                group_parts.clear();
            }
        }
        if let Some(lr) = opt.flush(store)? {
            log.steps.push(StepRecord {
                step: opt.updates(),
                epoch,
                lr,
                loss: group_loss / group_n as f64,
                components: group_parts.iter().map(|(k, v)| (k.clone(), v / group_n as f64)).collect(),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let mut summary = EpochSummary { epoch, mean_loss: epoch_loss / batches_per_epoch as f64, ..Default::default() };
        let mut stop = false;
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let ev = eval_fn(store)?;
            summary.recall = ev.recall;
            summary.vcr = ev.vcr;
            stop = cfg.early_stop && ev.perfect;
        }
        log.epochs.push(summary);
        last = write_checkpoint(target, store, "last.ckpt")?;
        if stop {
            break;
        }
    }
    if let Some(dir) = target.out_dir {
        log.save(&dir.join("run_log.json"))?;
        last = write_checkpoint(target, store, "final.ckpt")?;
    }
    let (checkpoint, checkpoint_id) = last.map_or((None, None), |(p, id)| (Some(p), Some(id)));
    Ok(TrainOutcome { log, checkpoint, checkpoint_id })
}

fn dropout_for(cfg: &ModelConfig, seed: u64, epoch: usize, example: usize) -> Option<Dropout> {
    (cfg.encoder.dropout_rate > 0.0).then(|| Dropout::new(cfg.encoder.dropout_rate, derive_seed(seed, &[TAG_DROPOUT, epoch as u64, example as u64])))
}

fn pair_lengths<S: Scalar>(examples: &[PairExample<S>], max_seq_len: usize) -> Result<Vec<usize>> {
    examples.iter().map(|e| Ok(assemble(&e.tokens, &e.regions, max_seq_len)?.len())).collect()
}

/// Masked-token, masked-object and matching pretraining.
pub fn pretrain<S: Scalar>(
    cfg: &TrainConfig,
    model: &ModelConfig,
    store: &mut ParameterStore<S>,
    examples: &[PairExample<S>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let lengths = pair_lengths(examples, model.encoder.max_seq_len)?;
    let target = CheckpointTarget { model, provenance: Provenance::Pretrained, seed: cfg.seed, out_dir };
    let w = &cfg.loss_weights;
    let plain = w.mlm == 1.0 && w.moc == 1.0 && w.vlm == 1.0;
    let loss_fn = |g: &mut Graph<'_, S>, i: usize, epoch: usize| -> Result<ExampleLoss> {
        let mut rng = stream(cfg.seed, &[TAG_PRETRAIN, epoch as u64, i as u64]);
        let pair = sample_vlm_pair(examples, i, &mut rng)?;
        let input = assemble(&pair.tokens, &pair.regions, model.encoder.max_seq_len)?;
        let plan = MaskPlan::sample(input.token_ids.len(), input.num_regions(), &cfg.masking, model.vocab_size, &mut rng)?;
        let mut dropout = dropout_for(model, cfg.seed, epoch, i);
        let j = joint_loss(g, model, &input, &plan, pair.y, dropout.as_mut())?;
        let mut components = vec![("vlm", j.vlm)];
        components.extend(j.mlm.map(|v| ("mlm", v)));
        components.extend(j.moc.map(|v| ("moc", v)));
        let total = if plain {
            j.total
        } else {
            let mut t = g.scale(j.vlm, S::lit(w.vlm));
            for (v, wt) in [(j.mlm, w.mlm), (j.moc, w.moc)] {
                if let Some(v) = v {
                    let s = g.scale(v, S::lit(wt));
                    t = g.add(t, s)?;
                }
            }
            t
        };
        Ok(ExampleLoss { total, components })
    };
    run_training(cfg, cfg.base_lr, store, &lengths, &target, loss_fn, |_| Ok(EpochEval::default()))
}

/// Whether every R@1 entry is perfect.
pub fn recall_at_one_perfect(entries: &[RecallEntry]) -> bool {
    let r1: Vec<&RecallEntry> = entries.iter().filter(|e| e.k == 1).collect();
    [Direction::SentenceRetrieval, Direction::ImageRetrieval].iter().all(|d| r1.iter().any(|e| e.direction == *d && e.recall == 1.0))
}

/// Fine-tuning on the two-direction hardest-negative triplet loss.
pub fn finetune_retrieval<S: Scalar>(
    cfg: &TrainConfig,
    model: &ModelConfig,
    store: &mut ParameterStore<S>,
    examples: &[PairExample<S>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let lengths = pair_lengths(examples, model.encoder.max_seq_len)?;
    let target = CheckpointTarget { model, provenance: Provenance::FinetunedRetrieval, seed: cfg.seed, out_dir };
    let rc = &cfg.retrieval;
    let loss_fn = |g: &mut Graph<'_, S>, i: usize, epoch: usize| -> Result<ExampleLoss> {
        let mut rng = stream(cfg.seed, &[TAG_TRIPLET, epoch as u64, i as u64]);
        let sample = sample_triplets(examples, i, rc.negatives_per_positive, &mut rng)?;
        let mut dropout = dropout_for(model, cfg.seed, epoch, i);
        let total = triplet_example_loss(g, model, rc, examples, &sample, dropout.as_mut())?;
        Ok(ExampleLoss { total, components: vec![("triplet", total)] })
    };
    let eval_fn = |s: &ParameterStore<S>| -> Result<EpochEval> {
        let recall = evaluate_retrieval(s, model, examples, &DEFAULT_KS)?;
        Ok(EpochEval { perfect: recall_at_one_perfect(&recall), recall, vcr: None })
    };
    run_training(cfg, rc.learning_rate, store, &lengths, &target, loss_fn, eval_fn)
}

/// Fine-tuning on answer and rationale selection (cross-entropy over four choices each).
pub fn finetune_vcr<S: Scalar>(
    cfg: &TrainConfig,
    model: &ModelConfig,
    store: &mut ParameterStore<S>,
    examples: &[VcrExample<S>],
    vocab: &Vocabulary,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let max_len = model.encoder.max_seq_len;
    let budget = cfg.vcr.region_budget;
    let prepared: Vec<(Vec<ChoiceInput<S>>, Vec<ChoiceInput<S>>)> = examples
        .iter()
        .map(|ex| Ok((prepare_choices(ex, ChoiceMode::Qa, vocab, budget, max_len)?, prepare_choices(ex, ChoiceMode::Qar, vocab, budget, max_len)?)))
        .collect::<Result<_>>()?;
    let lengths: Vec<usize> = prepared.iter().map(|(qa, qar)| qa.iter().chain(qar).map(|c| c.input.len()).max().unwrap_or(1)).collect();
    let target = CheckpointTarget { model, provenance: Provenance::FinetunedVcr, seed: cfg.seed, out_dir };
    let loss_fn = |g: &mut Graph<'_, S>, i: usize, epoch: usize| -> Result<ExampleLoss> {
        let (qa, qar) = &prepared[i];
        let mut dropout = dropout_for(model, cfg.seed, epoch, i);
        let la = score_choices(g, model, qa, dropout.as_mut())?;
        let la = vcr_loss(g, la, examples[i].answer_label)?;
        let lr = score_choices(g, model, qar, dropout.as_mut())?;
        let lr = vcr_loss(g, lr, examples[i].rationale_label)?;
        let total = g.add(la, lr)?;
        Ok(ExampleLoss { total, components: vec![("q_a", la), ("qa_r", lr)] })
    };
    let eval_fn = |s: &ParameterStore<S>| -> Result<EpochEval> {
        let (acc, _) = evaluate_vcr(s, model, examples, vocab, budget)?;
        Ok(EpochEval { recall: Vec::new(), vcr: Some(acc), perfect: acc.q_a == 1.0 && acc.qa_r == 1.0 })
    };
    run_training(cfg, cfg.base_lr, store, &lengths, &target, loss_fn, eval_fn)
}
