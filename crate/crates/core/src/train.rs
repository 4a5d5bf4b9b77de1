//! Training drivers for the scorer and for the CST variants.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{splitmix64, Dataset, SplitRole, SplitTriple};
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, smd, Completer, SequentialCompleter};
use crate::losses::{batch_loss_graph, LossConfig};
use crate::matching::{pretrain_matching, MatchTrainConfig, PretrainReport, SetMatcher};
use crate::model::{CstModel, ModelConfig, Variant};
use crate::params::Sgd;
use crate::retrieval::{RetrievalIndex, SearchMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs when an output directory is given.
    pub checkpoint_every: Option<usize>,
    /// `k` of the validation Recall@k used for model selection.
    pub val_k: usize,
    /// Caps the validation triples scored after each epoch.
    pub val_limit: Option<usize>,
    /// Caps the training outfits.
    pub max_train_outfits: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Cr,
            model: ModelConfig::default(),
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            alpha: 0.5,
            temperature: 0.2,
            seed: 0,
            checkpoint_every: None,
            val_k: 32,
            val_limit: None,
            max_train_outfits: None,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss().validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.val_k == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size and val_k must be positive".into(),
            ));
        }
        if self.variant.loss_wiring().cross_entropy && self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "cross-entropy training needs a batch size of at least 2".into(),
            ));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidArgument(
                "checkpoint_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: Option<f64>,
    pub sm: Option<f64>,
    pub chamfer: Option<f64>,
    pub total: f64,
    pub val_recall: f64,
    pub val_accuracy: f64,
    pub val_smd: Option<f64>,
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation recall.
    pub model: CstModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Validation split and index, built once per run.
struct Validation {
    triples: Vec<SplitTriple>,
    index: RetrievalIndex,
}

fn validation(dataset: &Dataset, config: &TrainConfig) -> Result<Validation> {
    let mut triples = dataset.triples(SplitRole::Val, splitmix64(config.seed ^ 0x76_616c))?;
    if let Some(n) = config.val_limit {
        triples.truncate(n);
    }
    if triples.is_empty() {
        return Err(Error::EmptySet("validation split"));
    }
    let index = RetrievalIndex::build(dataset.items_in(SplitRole::Val), None)?;
    Ok(Validation { triples, index })
}

/// Trains one variant with SGD. The scorer, when given, must be frozen; it
/// is required by variants with the set-matching term and used for the
/// validation SMD by all others.
pub fn train_cst(
    dataset: &Dataset,
    scorer: Option<&SetMatcher>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let variant = config.variant;
    if variant.needs_scorer() && scorer.is_none() {
        return Err(Error::MissingScorer {
            variant: variant.tag().into(),
        });
    }
    if scorer.is_some_and(|s| !s.is_frozen()) {
        return Err(Error::InvalidArgument(
            "the scorer must be frozen before CST training".into(),
        ));
    }
    if dataset.catalog.num_categories() > config.model.categories {
        return Err(Error::InvalidArgument(format!(
            "data has {} categories but the model table has {}",
            dataset.catalog.num_categories(),
            config.model.categories
        )));
    }
    let mut train = dataset.triples(SplitRole::Train, config.seed)?;
    if let Some(n) = config.max_train_outfits {
        train.truncate(n);
    }
    if train.len() < 2 {
        return Err(Error::EmptySet("training split"));
    }
    let val = validation(dataset, config)?;
    let mut model = CstModel::build_variant(variant, config.model, config.seed)?;
    let mut opt = Sgd::new(config.learning_rate, config.momentum)?;
    let loss_cfg = config.loss();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x7472_6169_6e));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, CstModel)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 && variant.loss_wiring().cross_entropy {
                continue;
            }
            let batch: Vec<&SplitTriple> = chunk.iter().map(|&i| &train[i]).collect();
            let slot_seed = splitmix64(config.seed ^ ((epoch as u64) << 32) ^ b as u64);
            let mut g = Graph::new();
            let nodes = batch_loss_graph(
                &mut g,
                &model,
                model.params(),
                &batch,
                scorer,
                &loss_cfg,
                slot_seed,
            )?;
            let (value, grads) = g.eval_and_grad(model.params(), nodes.total)?;
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            let br = nodes.breakdown(&g);
            let w = batch.len() as f64;
            sums[0] += br.ce.unwrap_or(0.0) * w;
            sums[1] += br.sm.unwrap_or(0.0) * w;
            sums[2] += br.chamfer.unwrap_or(0.0) * w;
            sums[3] += br.total * w;
            seen += batch.len();
            opt.step(model.params_mut(), &grads)?;
        }
        let n = seen as f64;
        let wiring = variant.loss_wiring();
        let (val_recall, val_accuracy, val_smd) = validate_epoch(&model, &val, scorer, config)?;
        let row = EpochLog {
            epoch,
            ce: wiring.cross_entropy.then(|| sums[0] / n),
            sm: wiring.set_matching.then(|| sums[1] / n),
            chamfer: wiring.chamfer.then(|| sums[2] / n),
            total: sums[3] / n,
            val_recall,
            val_accuracy,
            val_smd,
        };
        info!(
            "{variant} epoch {epoch}: total {:.5} val recall {:.4} accuracy {:.4}",
            row.total, row.val_recall, row.val_accuracy
        );
        log.push(row);
        if best.as_ref().is_none_or(|(r, _, _)| val_recall > *r) {
            best = Some((val_recall, epoch, model.clone()));
        }
        if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
            if epoch % every == 0 {
                model.save(&dir.join(format!("{variant}-epoch{epoch}.ckpt")))?;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}

fn validate_epoch(
    model: &CstModel,
    val: &Validation,
    scorer: Option<&SetMatcher>,
    config: &TrainConfig,
) -> Result<(f64, f64, Option<f64>)> {
    let seq;
    let completer: &dyn Completer = if model.variant() == Variant::St {
        seq = SequentialCompleter {
            model,
            index: &val.index,
            mode: SearchMode::Exact,
        };
        &seq
    } else {
        model
    };
    let r = evaluate_retrieval(
        completer,
        &val.triples,
        &val.index,
        config.val_k,
        SearchMode::Exact,
        config.seed,
    )?;
    let s = match scorer {
        Some(s) => Some(
            smd(
                completer,
                &val.triples,
                &val.index,
                s,
                SearchMode::Exact,
                config.seed,
            )?
            .retrieved_summary
            .mean,
        ),
        None => None,
    };
    Ok((r.recall.value, r.accuracy.value, s))
}

/// Scorer pretraining on the train split, reporting FINB on the val split.
pub fn train_matching(
    dataset: &Dataset,
    config: &MatchTrainConfig,
) -> Result<(SetMatcher, PretrainReport)> {
    let train = dataset.outfits_in(SplitRole::Train);
    let val = dataset.outfits_in(SplitRole::Val);
    pretrain_matching(&train, &val, &dataset.catalog, config)
}
