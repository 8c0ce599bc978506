//! What each command-line subcommand does, callable without a process.
//!
//! Runs read everything from files and explicit arguments. Training commands
//! write `final.ckpt`, `last.ckpt`, `run_log.json`, the resolved `config.toml`
//! and the `vocab.txt` the model was trained with into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::records::in_fraction;
use crate::data::{generate_synthetic, load_dataset, load_vcr, prepare_examples, select_regions, LoadOptions, PairRecord, SynthConfig};
use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{checkpoint_id, load_checkpoint, Checkpoint};
use crate::harness::config::{Task, TrainConfig};
use crate::harness::diagnostics::{grad_check_loss, LossKind};
use crate::harness::report::{accuracy_records, recall_records, AccuracyRecord, RecallRecord};
use crate::harness::train::{finetune_retrieval, finetune_vcr, pretrain, TrainOutcome};
use crate::model::{init_parameters, ModelConfig};
use crate::numerics::{GradCheckReport, ParameterStore};
use crate::retrieval::{evaluate_retrieval, zero_shot_eval, DEFAULT_KS};
use crate::vcr::evaluate_vcr;

/// `--data` argument: a manifest path, or the corpus described by the config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Manifest(PathBuf),
}

impl DataSource {
    pub fn parse(arg: &str) -> Self {
        if arg == "synthetic" {
            DataSource::Synthetic
        } else {
            DataSource::Manifest(PathBuf::from(arg))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub updates: usize,
    pub final_loss: Option<f64>,
}

struct PairCorpus {
    vocab: Vocabulary,
    d_vis: usize,
    num_classes: usize,
    records: Vec<PairRecord>,
}

fn pair_corpus(data: &DataSource, cfg: &TrainConfig, fraction: Option<f64>) -> Result<PairCorpus> {
    let opts = LoadOptions { region_cap: cfg.region_cap, fraction };
    match data {
        DataSource::Manifest(path) => {
            let ds = load_dataset(path, &opts)?;
            Ok(PairCorpus { d_vis: ds.manifest.d_vis, num_classes: ds.manifest.num_classes, vocab: ds.vocab, records: ds.records })
        }
        DataSource::Synthetic => {
            let corpus = generate_synthetic(&cfg.synthetic)?;
            let mut records = Vec::with_capacity(corpus.records.len());
            for mut r in corpus.records {
                if fraction.is_some_and(|f| !in_fraction(&r.pair_id, f)) {
                    continue;
                }
                let keep = select_regions(&r.regions.scores, opts.region_cap);
                if keep.len() < r.regions.len() {
                    r.regions = r.regions.select(&keep)?;
                }
                records.push(r);
            }
            Ok(PairCorpus { vocab: corpus.vocab, d_vis: cfg.synthetic.d_vis, num_classes: cfg.synthetic.num_concepts, records })
        }
    }
}

fn check_compatible(model: &ModelConfig, vocab: &Vocabulary, d_vis: usize, num_classes: usize) -> Result<()> {
    if model.vocab_size != vocab.len() || model.d_vis != d_vis || model.num_classes != num_classes {
        return Err(Error::Config(format!(
            "checkpoint model (|V|={}, d_vis={}, K={}) does not fit the data (|V|={}, d_vis={d_vis}, K={num_classes})",
            model.vocab_size,
            model.d_vis,
            model.num_classes,
            vocab.len()
        )));
    }
    Ok(())
}

fn prepare_out_dir(out: &Path, cfg: &TrainConfig, vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    vocab.save(&out.join("vocab.txt"))
}

fn summarize(outcome: TrainOutcome) -> Result<RunSummary> {
    let (Some(checkpoint), Some(checkpoint_id)) = (outcome.checkpoint, outcome.checkpoint_id) else {
        return Err(Error::Checkpoint("training finished without writing a checkpoint".into()));
    };
    Ok(RunSummary { checkpoint, checkpoint_id, updates: outcome.log.steps.len(), final_loss: outcome.log.steps.last().map(|s| s.loss) })
}

/// Initial parameters: `cfg.init_checkpoint` if set, otherwise fresh ones.
fn initial_store(cfg: &TrainConfig, model: &ModelConfig) -> Result<ParameterStore<f32>> {
    match &cfg.init_checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model.parameter_shapes() != model.parameter_shapes() {
                return Err(Error::Checkpoint(format!("{}: parameter shapes differ from the configured model", path.display())));
            }
            Ok(ckpt.store)
        }
        None => init_parameters(model, cfg.seed, cfg.head_init),
    }
}

pub fn run_pretrain(data: &DataSource, cfg: &TrainConfig, out: &Path, fraction: Option<f64>) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.task = Task::Pretrain;
    cfg.validate()?;
    let corpus = pair_corpus(data, &cfg, fraction)?;
    let model = cfg.model_config(corpus.vocab.len(), corpus.d_vis, corpus.num_classes);
    let mut store = initial_store(&cfg, &model)?;
    let examples = prepare_examples::<f32>(&corpus.records, &corpus.vocab)?;
    prepare_out_dir(out, &cfg, &corpus.vocab)?;
    summarize(pretrain(&cfg, &model, &mut store, &examples, Some(out))?)
}

/// The fine-tuned model keeps the initial checkpoint's architecture; only
/// the dropout rate is taken from `cfg`.
fn finetune_start(init: &Path, cfg: &TrainConfig) -> Result<(ModelConfig, Checkpoint)> {
    let ckpt = load_checkpoint(init)?;
    let mut model = ckpt.model.clone();
    model.encoder.dropout_rate = cfg.encoder.dropout_rate;
    Ok((model, ckpt))
}

pub fn run_finetune_retrieval(data: &Path, init: &Path, out: &Path, cfg: &TrainConfig) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.task = Task::FinetuneRetrieval;
    cfg.init_checkpoint = Some(init.to_path_buf());
    cfg.validate()?;
    let (model, mut ckpt) = finetune_start(init, &cfg)?;
    let corpus = pair_corpus(&DataSource::Manifest(data.to_path_buf()), &cfg, None)?;
    check_compatible(&model, &corpus.vocab, corpus.d_vis, corpus.num_classes)?;
    let examples = prepare_examples::<f32>(&corpus.records, &corpus.vocab)?;
    prepare_out_dir(out, &cfg, &corpus.vocab)?;
    summarize(finetune_retrieval(&cfg, &model, &mut ckpt.store, &examples, Some(out))?)
}

pub fn run_finetune_vcr(data: &Path, init: &Path, out: &Path, cfg: &TrainConfig) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.task = Task::FinetuneVcr;
    cfg.init_checkpoint = Some(init.to_path_buf());
    cfg.validate()?;
    let (model, mut ckpt) = finetune_start(init, &cfg)?;
    let (manifest, vocab, examples) = load_vcr(data)?;
    check_compatible(&model, &vocab, manifest.d_vis, manifest.num_classes)?;
    prepare_out_dir(out, &cfg, &vocab)?;
    summarize(finetune_vcr(&cfg, &model, &mut ckpt.store, &examples, &vocab, Some(out))?)
}

/// R@1, R@5 and R@10 in both directions. With `zero_shot`, fine-tuned
/// checkpoints are refused.
pub fn run_eval_retrieval(data: &Path, ckpt_path: &Path, zero_shot: bool) -> Result<Vec<RecallRecord>> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let id = checkpoint_id(ckpt_path)?;
    let ds = load_dataset(data, &LoadOptions::default())?;
    check_compatible(&ckpt.model, &ds.vocab, ds.manifest.d_vis, ds.manifest.num_classes)?;
    let examples = prepare_examples::<f32>(&ds.records, &ds.vocab)?;
    let entries = if zero_shot {
        zero_shot_eval(ckpt.provenance, &ckpt.store, &ckpt.model, &examples, &DEFAULT_KS)?
    } else {
        evaluate_retrieval(&ckpt.store, &ckpt.model, &examples, &DEFAULT_KS)?
    };
    Ok(recall_records(&entries, &id, ckpt.seed))
}

/// Q→A, QA→R and Q→AR accuracy.
pub fn run_eval_vcr(data: &Path, ckpt_path: &Path, region_budget: usize) -> Result<Vec<AccuracyRecord>> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let id = checkpoint_id(ckpt_path)?;
    let (manifest, vocab, examples) = load_vcr(data)?;
    check_compatible(&ckpt.model, &vocab, manifest.d_vis, manifest.num_classes)?;
    let (acc, _) = evaluate_vcr(&ckpt.store, &ckpt.model, &examples, &vocab, region_budget)?;
    Ok(accuracy_records(&acc, &id, ckpt.seed))
}

/// Reads a corpus description (TOML) and writes the corpus; returns the manifests written.
pub fn run_gen_synthetic(config: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    generate_synthetic(&cfg)?.write(out)
}

pub fn run_grad_check(loss: LossKind, seed: u64) -> Result<GradCheckReport> {
    grad_check_loss(loss, seed)
}
