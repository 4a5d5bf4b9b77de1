//! One function per subcommand. Each artifact-producing command writes its
//! files into the manifest's output directory and registers them there.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use setcomplete::data::{
    generate_dataset, read_jsonl, write_jsonl, Dataset, ReadOptions, SplitTriple,
};
use setcomplete::eval::{
    diversity_histogram, evaluate_retrieval, finb_eval, smd, timing_benchmark, write_samples_csv,
    Completer, FinbChooser, MetricsReport, SequentialCompleter, TimingConfig, UniformChooser,
};
use setcomplete::matching::SetMatcher;
use setcomplete::model::{CstModel, SlotInit, Variant};
use setcomplete::retrieval::{AnnConfig, RetrievalIndex, SearchMode};
use setcomplete::set::FeatureSet;
use setcomplete::train::{train_cst, train_matching, write_log_csv};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

pub fn load_data(path: &Path) -> Result<Dataset> {
    read_jsonl(path, ReadOptions::default())
        .with_context(|| format!("cannot load dataset {}", path.display()))
}

pub fn load_model(path: &Path, expect: Option<Variant>) -> Result<CstModel> {
    let m = match expect {
        Some(v) => CstModel::load_expecting(path, v),
        None => CstModel::load(path),
    };
    m.with_context(|| format!("cannot load checkpoint {}", path.display()))
}

pub fn load_scorer(path: &Path) -> Result<SetMatcher> {
    SetMatcher::load(path).with_context(|| format!("cannot load scorer {}", path.display()))
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex> {
    RetrievalIndex::load(path).with_context(|| format!("cannot load index {}", path.display()))
}

fn write_reports(m: &mut RunManifest, reports: &[MetricsReport]) -> Result<()> {
    let json = m.artifact("metrics.json");
    std::fs::write(&json, serde_json::to_string_pretty(reports)?)?;
    let samples: Vec<_> = reports.iter().flat_map(MetricsReport::samples).collect();
    write_samples_csv(&m.artifact("samples.csv"), &samples)?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, m: &mut RunManifest) -> Result<()> {
    let data = generate_dataset(&cfg.data)?;
    write_jsonl(&m.artifact("data.jsonl"), &data)?;
    let index = RetrievalIndex::build(data.catalog.items(), Some(cfg.index))?;
    index.save(&m.artifact("index.bin"))?;
    std::fs::write(m.artifact("gen.toml"), toml::to_string(&cfg.data)?)?;
    println!(
        "{} items, {} outfits, dimension {}",
        data.catalog.len(),
        data.outfits.len(),
        data.catalog.dim()
    );
    Ok(())
}

pub fn train_match(cfg: &RunConfig, m: &mut RunManifest, data: &Path) -> Result<()> {
    let data = load_data(data)?;
    let (scorer, report) = train_matching(&data, &cfg.matching)?;
    scorer.save(&m.artifact("scorer.bin"))?;
    std::fs::write(
        m.artifact("pretrain.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.5}", e + 1);
    }
    if let Some(f) = &report.heldout_finb {
        println!(
            "held-out FINB {:.4} [{:.4}, {:.4}] over {} outfits",
            f.accuracy, f.ci_low, f.ci_high, f.total
        );
    }
    println!("scorer checksum {}", scorer.checksum());
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    m: &mut RunManifest,
    data: &Path,
    scorer: Option<&Path>,
) -> Result<()> {
    let data = load_data(data)?;
    let scorer = scorer.map(load_scorer).transpose()?;
    let variant = cfg.train.variant;
    let out = train_cst(&data, scorer.as_ref(), &cfg.train, Some(&m.out_dir))?;
    if let Some(every) = cfg.train.checkpoint_every {
        for e in (every..=cfg.train.epochs).step_by(every) {
            m.artifacts.push(format!("{variant}-epoch{e}.ckpt"));
        }
    }
    out.model.save(&m.artifact(&format!("{variant}.ckpt")))?;
    write_log_csv(&m.artifact("train_log.csv"), &out.log)?;
    println!("epoch        total    val recall  val accuracy");
    for r in &out.log {
        println!(
            "{:>5}  {:>11.5}  {:>12.4}  {:>12.4}",
            r.epoch, r.total, r.val_recall, r.val_accuracy
        );
    }
    println!("kept epoch {} as {variant}.ckpt", out.best_epoch);
    Ok(())
}

fn eval_triples(cfg: &RunConfig, data: &Dataset) -> Result<Vec<SplitTriple>> {
    let mut t = data.triples(cfg.eval.split, cfg.eval.seed)?;
    if let Some(n) = cfg.eval.limit {
        t.truncate(n);
    }
    ensure!(
        !t.is_empty(),
        "the {:?} split has no outfits",
        cfg.eval.split
    );
    Ok(t)
}

pub struct EvalInputs<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub variant: Option<Variant>,
    pub scorer: Option<&'a Path>,
    pub index: Option<&'a Path>,
}

pub fn eval(cfg: &RunConfig, m: &mut RunManifest, inp: &EvalInputs) -> Result<()> {
    let data = load_data(inp.data)?;
    let model = load_model(inp.checkpoint, inp.variant)?;
    let scorer = inp.scorer.map(load_scorer).transpose()?;
    let index = match inp.index {
        Some(p) => load_index(p)?,
        None => RetrievalIndex::build(data.items_in(cfg.eval.split), None)?,
    };
    let mode = cfg.eval.mode;
    let triples = eval_triples(cfg, &data)?;
    let seq;
    let completer: &dyn Completer = if model.variant() == Variant::St {
        seq = SequentialCompleter {
            model: &model,
            index: &index,
            mode,
        };
        &seq
    } else {
        &model
    };
    let seed = cfg.eval.seed;
    let retrieval = evaluate_retrieval(completer, &triples, &index, cfg.eval.k, mode, seed)?;
    let smd = scorer
        .as_ref()
        .map(|s| smd(completer, &triples, &index, s, mode, seed))
        .transpose()?;
    let diversity = diversity_histogram(completer, &triples, &index, mode)?;
    println!("metric                 value");
    println!(
        "recall@{:<4}      {:>10.4}   (random {:.4})",
        cfg.eval.k, retrieval.recall.value, retrieval.random_recall_baseline
    );
    println!(
        "accuracy         {:>10.4}   (random {:.4})",
        retrieval.accuracy.value, retrieval.random_accuracy_baseline
    );
    if let Some(s) = &smd {
        println!(
            "mean SMD         {:>10.4}   (median {:.4})",
            s.retrieved_summary.mean, s.retrieved_summary.p50
        );
    }
    println!(
        "distinct items   {:>10}   (top share {:.4})",
        diversity.distinct_items, diversity.top_share
    );
    let report = MetricsReport {
        method: completer.name(),
        seed,
        retrieval: Some(retrieval),
        smd,
        diversity: Some(diversity),
        ..Default::default()
    };
    write_reports(m, &[report])
}

pub fn finb(
    cfg: &RunConfig,
    m: &mut RunManifest,
    data: &Path,
    checkpoint: Option<&Path>,
    variant: Option<Variant>,
    scorer: Option<&Path>,
) -> Result<()> {
    let data = load_data(data)?;
    let mut outfits = data.outfits_in(cfg.eval.split);
    if let Some(n) = cfg.eval.limit {
        outfits.truncate(n);
    }
    let model = checkpoint.map(|p| load_model(p, variant)).transpose()?;
    let scorer = scorer.map(load_scorer).transpose()?;
    let uniform = UniformChooser::new(cfg.eval.seed);
    let mut choosers: Vec<(String, &dyn FinbChooser)> = Vec::new();
    if let Some(s) = &scorer {
        choosers.push(("scorer".into(), s));
    }
    if let Some(c) = &model {
        choosers.push((c.variant().tag().into(), c));
    }
    if choosers.is_empty() {
        choosers.push(("uniform".into(), &uniform));
    }
    let mut reports = Vec::new();
    println!("method      accuracy   95% interval        n");
    for (name, c) in choosers {
        let r = finb_eval(
            c,
            &outfits,
            &data.catalog,
            cfg.eval.negatives,
            cfg.eval.seed,
        )?;
        println!(
            "{name:<10} {:>9.4}   [{:.4}, {:.4}]  {:>5}",
            r.accuracy, r.ci_low, r.ci_high, r.total
        );
        reports.push(MetricsReport {
            method: name,
            seed: cfg.eval.seed,
            finb: Some(r),
            ..Default::default()
        });
    }
    write_reports(m, &reports)
}

/// Bench settings; the query set is the first `query_items` items of the
/// first evaluated outfit that has that many.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub max_m: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub mode: SearchMode,
    pub query_items: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let t = TimingConfig::default();
        BenchConfig {
            max_m: t.max_m,
            repeats: t.repeats,
            warmup: t.warmup,
            mode: t.mode,
            query_items: 3,
        }
    }
}

pub fn bench(
    cfg: &RunConfig,
    m: &mut RunManifest,
    data: &Path,
    checkpoint: &Path,
    baseline: Option<&Path>,
    index: Option<&Path>,
) -> Result<()> {
    let data = load_data(data)?;
    let cst = load_model(checkpoint, None)?;
    ensure!(
        cst.variant() != Variant::St,
        "--checkpoint must be a set model, not st"
    );
    let st = match baseline {
        Some(p) => load_model(p, Some(Variant::St))?,
        None => CstModel::build_variant(Variant::St, *cst.config(), cfg.train.seed)?,
    };
    let index = match index {
        Some(p) => load_index(p)?,
        None => RetrievalIndex::build(data.catalog.items(), Some(cfg.index))?,
    };
    let b = &cfg.bench;
    let Some(outfit) = data
        .outfits_in(cfg.eval.split)
        .into_iter()
        .find(|o| o.item_ids.len() >= b.query_items)
    else {
        bail!("no outfit has {} items", b.query_items);
    };
    let x = data
        .catalog
        .feature_set(&outfit.item_ids[..b.query_items])?;
    let timing = TimingConfig {
        max_m: b.max_m,
        repeats: b.repeats,
        warmup: b.warmup,
        mode: b.mode,
    };
    let report = timing_benchmark(&cst, &st, &x, &index, &timing)?;
    println!("method   M   median us   passes");
    for r in &report.rows {
        println!(
            "{:<6} {:>3}  {:>10.1}  {:>7}",
            r.method,
            r.m,
            r.median_secs * 1e6,
            r.forward_passes
        );
    }
    for method in ["cst", "st"] {
        if let Some(ratio) = report.ratio(method, 1, b.max_m) {
            println!("{method} t({})/t(1) = {ratio:.2}", b.max_m);
        }
    }
    write_reports(
        m,
        &[MetricsReport {
            method: "bench".into(),
            seed: cfg.train.seed,
            timing: Some(report),
            ..Default::default()
        }],
    )
}

pub struct CompleteInputs<'a> {
    pub checkpoint: &'a Path,
    pub variant: Option<Variant>,
    pub query: &'a Path,
    pub labels: &'a [u32],
    pub index: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub filter: bool,
}

/// Completes one query outfit; returns `(item_id, category_id, similarity)`
/// per label, never repeating a query item.
pub fn complete(inp: &CompleteInputs) -> Result<Vec<(u64, u32, f64)>> {
    ensure!(
        !inp.labels.is_empty(),
        "--labels needs at least one category id"
    );
    let model = load_model(inp.checkpoint, inp.variant)?;
    let index = match (inp.index, inp.data) {
        (Some(p), _) => load_index(p)?,
        (None, Some(d)) => {
            RetrievalIndex::build(load_data(d)?.catalog.items(), Some(AnnConfig::default()))?
        }
        (None, None) => bail!("complete needs --index or --data for the candidate items"),
    };
    let query = load_data(inp.query)?;
    let Some(outfit) = query.outfits.first() else {
        bail!("{} holds no query outfit", inp.query.display());
    };
    let x: FeatureSet = query.catalog.feature_set(&outfit.item_ids)?;
    let taken = &outfit.item_ids;
    let mode = if index.has_clustering() {
        SearchMode::Approx
    } else {
        SearchMode::Exact
    };
    if model.variant() == Variant::St {
        let ids = model.st_sequential_complete(&x, inp.labels, &index, mode)?;
        return Ok(ids
            .into_iter()
            .map(|id| (id, index.category(id).unwrap_or(u32::MAX), f64::NAN))
            .collect());
    }
    let init: SlotInit = model.slot_init_for(inp.labels, model.eval_seed());
    let out = model.complete_features(&x, &init)?;
    info!("completed {} slots", out.len());
    let mut picks = Vec::with_capacity(inp.labels.len());
    for (i, &label) in inp.labels.iter().enumerate() {
        let filter = inp.filter.then_some(label);
        let hits = index.query_knn(out.row(i), taken.len() + 1, filter, mode)?;
        let Some(h) = hits.iter().find(|h| !taken.contains(&h.item_id)) else {
            bail!("no candidate outside the query set for label {label}");
        };
        picks.push((h.item_id, h.category_id, h.similarity));
    }
    Ok(picks)
}

pub fn out_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| Path::new("runs").join(command))
}
