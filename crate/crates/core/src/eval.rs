//! Evaluation: retrieval Recall@k, category accuracy, score differences
//! under the frozen scorer, fill-in-the-blank selection, item-frequency
//! concentration, timing and the abstract cost model.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::data::{split_outfit, splitmix64, Catalog, Outfit, SplitTriple};
use crate::error::{Error, Result};
use crate::matching::SetMatcher;
use crate::model::{CstModel, Variant};
use crate::retrieval::{RetrievalIndex, SearchMode};
use crate::set::FeatureSet;
use crate::tensor::{dot, Tensor};

/// Anything that turns a query set and target labels into one feature row
/// per label.
pub trait Completer {
    fn name(&self) -> String;
    fn complete(&self, triple: &SplitTriple) -> Result<Tensor>;
}

impl Completer for CstModel {
    fn name(&self) -> String {
        self.variant().tag().into()
    }

    fn complete(&self, t: &SplitTriple) -> Result<Tensor> {
        let init = self.slot_init_for(&t.z, self.eval_seed());
        Ok(self.complete_features(&t.x, &init)?.into_features())
    }
}

/// The sequential baseline; its outputs are the features of the items it
/// retrieves step by step.
pub struct SequentialCompleter<'a> {
    pub model: &'a CstModel,
    pub index: &'a RetrievalIndex,
    pub mode: SearchMode,
}

impl Completer for SequentialCompleter<'_> {
    fn name(&self) -> String {
        self.model.variant().tag().into()
    }

    fn complete(&self, t: &SplitTriple) -> Result<Tensor> {
        let ids = self
            .model
            .st_sequential_complete(&t.x, &t.z, self.index, self.mode)?;
        let rows: Vec<&[f64]> = ids
            .iter()
            .map(|&id| self.index.feature(id).expect("retrieved ids are indexed"))
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// Emits the true target features.
pub struct GroundTruth;

impl Completer for GroundTruth {
    fn name(&self) -> String {
        "ground-truth".into()
    }

    fn complete(&self, t: &SplitTriple) -> Result<Tensor> {
        Ok(t.y.features().clone())
    }
}

/// A value with the number of samples behind it and the seed that produced
/// the samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEval {
    pub k: usize,
    pub recall: Metric,
    pub accuracy: Metric,
    /// `min(1, k·M/N)` averaged over triples.
    pub random_recall_baseline: f64,
    /// `Σ_c p_c²` over the indexed category frequencies.
    pub random_accuracy_baseline: f64,
    pub per_triple_recall: Vec<f64>,
    /// Unfiltered top-1 item for every output row, per triple.
    pub top1: Vec<Vec<u64>>,
}

/// Recall@k and top-1 category accuracy in one pass over `triples`.
///
/// Recall for a triple is `|∪_m topk(ŷ_m) ∩ Y| / |Y|`; accuracy compares the
/// category of each output's top-1 item with the requested label. Queries are
/// unfiltered.
pub fn evaluate_retrieval(
    model: &dyn Completer,
    triples: &[SplitTriple],
    index: &RetrievalIndex,
    k: usize,
    mode: SearchMode,
    seed: u64,
) -> Result<RetrievalEval> {
    if triples.is_empty() {
        return Err(Error::EmptySet("evaluation triples"));
    }
    let mut per_triple = Vec::with_capacity(triples.len());
    let mut top1 = Vec::with_capacity(triples.len());
    let (mut hits, mut elements) = (0usize, 0usize);
    let mut baseline = 0.0;
    for t in triples {
        let out = model.complete(t)?;
        if out.rows() != t.z.len() {
            return Err(Error::shape("evaluate_retrieval", "one output per label"));
        }
        let mut cands = HashSet::new();
        let mut firsts = Vec::with_capacity(out.rows());
        for (m, row) in out.iter_rows().enumerate() {
            let res = index.query_knn(row, k, None, mode)?;
            if res[0].category_id == t.z[m] {
                hits += 1;
            }
            firsts.push(res[0].item_id);
            cands.extend(res.iter().map(|h| h.item_id));
        }
        elements += out.rows();
        let y = t.y_ids();
        per_triple.push(y.iter().filter(|id| cands.contains(id)).count() as f64 / y.len() as f64);
        baseline += ((k * y.len()) as f64 / index.len() as f64).min(1.0);
        top1.push(firsts);
    }
    let n = triples.len();
    Ok(RetrievalEval {
        k,
        recall: Metric {
            value: per_triple.iter().sum::<f64>() / n as f64,
            n,
            seed,
        },
        accuracy: Metric {
            value: hits as f64 / elements as f64,
            n: elements,
            seed,
        },
        random_recall_baseline: baseline / n as f64,
        random_accuracy_baseline: frequency_baseline(index),
        per_triple_recall: per_triple,
        top1,
    })
}

pub fn recall_at_k(
    model: &dyn Completer,
    triples: &[SplitTriple],
    index: &RetrievalIndex,
    k: usize,
    mode: SearchMode,
) -> Result<f64> {
    Ok(evaluate_retrieval(model, triples, index, k, mode, 0)?
        .recall
        .value)
}

pub fn category_accuracy(
    model: &dyn Completer,
    triples: &[SplitTriple],
    index: &RetrievalIndex,
    mode: SearchMode,
) -> Result<f64> {
    Ok(evaluate_retrieval(model, triples, index, 1, mode, 0)?
        .accuracy
        .value)
}

/// Accuracy of a chooser that retrieves a uniformly random indexed item.
pub fn frequency_baseline(index: &RetrievalIndex) -> f64 {
    let n = index.len() as f64;
    index
        .category_counts()
        .values()
        .map(|&c| (c as f64 / n).powi(2))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p10: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub n: usize,
}

impl Summary {
    /// Percentiles by linear interpolation between order statistics.
    pub fn of(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySet("summary samples"));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        Ok(Summary {
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            p10: q(0.10),
            p25: q(0.25),
            p50: q(0.50),
            p75: q(0.75),
            p90: q(0.90),
            n: samples.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmdReport {
    /// `g(X, features of the retrieved top-1 items) - g(X, Y)` per triple.
    pub retrieved: Vec<f64>,
    /// `g(X, raw model outputs) - g(X, Y)` per triple.
    pub raw: Vec<f64>,
    pub retrieved_summary: Summary,
    pub raw_summary: Summary,
    pub seed: u64,
}

/// Score differences under the frozen scorer. Retrieval is unfiltered top-1.
pub fn smd(
    model: &dyn Completer,
    triples: &[SplitTriple],
    index: &RetrievalIndex,
    scorer: &SetMatcher,
    mode: SearchMode,
    seed: u64,
) -> Result<SmdReport> {
    if !scorer.is_frozen() {
        return Err(Error::InvalidArgument("SMD needs a frozen scorer".into()));
    }
    if triples.is_empty() {
        return Err(Error::EmptySet("evaluation triples"));
    }
    let mut retrieved = Vec::with_capacity(triples.len());
    let mut raw = Vec::with_capacity(triples.len());
    for t in triples {
        let out = model.complete(t)?;
        let base = scorer.match_score(&t.x, &t.y)?;
        let rows: Vec<&[f64]> = out
            .iter_rows()
            .map(|r| {
                let h = index.query_knn(r, 1, None, mode)?;
                Ok(index.feature(h[0].item_id).expect("indexed"))
            })
            .collect::<Result<_>>()?;
        let ret = FeatureSet::new(Tensor::from_rows(&rows)?);
        retrieved.push(scorer.match_score(&t.x, &ret)? - base);
        raw.push(scorer.match_score(&t.x, &FeatureSet::new(out))? - base);
    }
    Ok(SmdReport {
        retrieved_summary: Summary::of(&retrieved)?,
        raw_summary: Summary::of(&raw)?,
        retrieved,
        raw,
        seed,
    })
}

/// Selects one of several candidate target sets for a query set.
pub trait FinbChooser {
    fn choose(&self, x: &FeatureSet, labels: &[u32], candidates: &[FeatureSet]) -> Result<usize>;
}

impl FinbChooser for CstModel {
    /// Candidate with the largest `Σ_m ŷ_m · c_m`, rows aligned with labels.
    fn choose(&self, x: &FeatureSet, labels: &[u32], candidates: &[FeatureSet]) -> Result<usize> {
        if self.variant() == Variant::St {
            return Err(Error::InvalidArgument(
                "the st baseline cannot rank candidates".into(),
            ));
        }
        let yhat = self.complete_features(x, &self.slot_init_for(labels, self.eval_seed()))?;
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, c) in candidates.iter().enumerate() {
            let s: f64 = (0..labels.len()).map(|m| dot(yhat.row(m), c.row(m))).sum();
            if s > best.0 {
                best = (s, i);
            }
        }
        Ok(best.1)
    }
}

/// Picks uniformly at random.
pub struct UniformChooser {
    rng: RefCell<ChaCha8Rng>,
}

impl UniformChooser {
    pub fn new(seed: u64) -> Self {
        UniformChooser {
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl FinbChooser for UniformChooser {
    fn choose(&self, _x: &FeatureSet, _labels: &[u32], candidates: &[FeatureSet]) -> Result<usize> {
        Ok(self.rng.borrow_mut().random_range(0..candidates.len()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinbReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Outfits without a distinct same-category replacement for some target.
    pub skipped: usize,
    pub negatives: usize,
    /// 95% Clopper-Pearson interval for the accuracy.
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
}

impl FinbReport {
    pub fn chance(&self) -> f64 {
        1.0 / (self.negatives + 1) as f64
    }
}

/// Exact (Clopper-Pearson) two-sided interval for a binomial proportion.
pub fn clopper_pearson(successes: usize, trials: usize, confidence: f64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials || !(0.0..1.0).contains(&confidence) {
        return Err(Error::InvalidArgument(
            "invalid binomial interval inputs".into(),
        ));
    }
    let a = (1.0 - confidence) / 2.0;
    let (k, n) = (successes as f64, trials as f64);
    let beta = |p: f64, q: f64| Beta::new(p, q).expect("positive shapes");
    let low = if successes == 0 {
        0.0
    } else {
        beta(k, n - k + 1.0).inverse_cdf(a)
    };
    let high = if successes == trials {
        1.0
    } else {
        beta(k + 1.0, n - k).inverse_cdf(1.0 - a)
    };
    Ok((low, high))
}

/// Fill-in-the-blank: per outfit, a random split, `negatives` category-matched
/// replacements of the target set and the true target set, shuffled; the
/// chooser must find the true one.
pub fn finb_eval(
    chooser: &dyn FinbChooser,
    outfits: &[&Outfit],
    catalog: &Catalog,
    negatives: usize,
    seed: u64,
) -> Result<FinbReport> {
    if negatives == 0 {
        return Err(Error::InvalidArgument(
            "at least one negative is required".into(),
        ));
    }
    let (mut correct, mut total, mut skipped) = (0, 0, 0);
    for o in outfits {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(o.outfit_id)));
        let t = split_outfit(o, catalog, &mut rng)?;
        let negs: Option<Vec<Vec<u64>>> = (0..negatives)
            .map(|_| catalog.category_matched_negative(t.y_ids(), &mut rng))
            .collect();
        let Some(negs) = negs else {
            skipped += 1;
            continue;
        };
        let mut cands = vec![t.y.clone()];
        for n in negs {
            cands.push(catalog.feature_set(&n)?);
        }
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<FeatureSet> = order.iter().map(|&i| cands[i].clone()).collect();
        let pick = chooser.choose(&t.x, &t.z, &shuffled)?;
        if order[pick] == 0 {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptySet("FINB questions"));
    }
    let (ci_low, ci_high) = clopper_pearson(correct, total, 0.95)?;
    Ok(FinbReport {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        skipped,
        negatives,
        ci_low,
        ci_high,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// `(item_id, count)` for the 100 most selected items, count descending,
    /// ties by ascending id.
    pub top: Vec<(u64, usize)>,
    pub selections: usize,
    pub distinct_items: usize,
    pub max_frequency: usize,
    /// Fraction of all selections taken by the `top` items.
    pub top_share: f64,
}

pub const DIVERSITY_TOP: usize = 100;

/// Frequency of each selected item given per-triple top-1 selections.
pub fn diversity_from_selections(selections: &[Vec<u64>]) -> DiversityReport {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for &id in selections.iter().flatten() {
        *counts.entry(id).or_default() += 1;
    }
    let mut ranked: Vec<(u64, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: usize = ranked.iter().map(|r| r.1).sum();
    let distinct_items = ranked.len();
    ranked.truncate(DIVERSITY_TOP);
    let covered: usize = ranked.iter().map(|r| r.1).sum();
    DiversityReport {
        max_frequency: ranked.first().map_or(0, |r| r.1),
        top_share: if total == 0 {
            0.0
        } else {
            covered as f64 / total as f64
        },
        top: ranked,
        selections: total,
        distinct_items,
    }
}

/// Item frequencies over the unfiltered top-1 completions of `model`.
pub fn diversity_histogram(
    model: &dyn Completer,
    triples: &[SplitTriple],
    index: &RetrievalIndex,
    mode: SearchMode,
) -> Result<DiversityReport> {
    let mut sel = Vec::with_capacity(triples.len());
    for t in triples {
        let out = model.complete(t)?;
        sel.push(
            out.iter_rows()
                .map(|r| Ok(index.query_knn(r, 1, None, mode)?[0].item_id))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(diversity_from_selections(&sel))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub m: usize,
    pub n_items: usize,
    pub median_secs: f64,
    /// Forward passes per completion.
    pub forward_passes: u64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    pub query_set_size: usize,
    pub mode: SearchMode,
}

impl TimingReport {
    pub fn row(&self, method: &str, m: usize) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.method == method && r.m == m)
    }

    /// `t(m_hi) / t(m_lo)` for one method.
    pub fn ratio(&self, method: &str, m_lo: usize, m_hi: usize) -> Option<f64> {
        Some(self.row(method, m_hi)?.median_secs / self.row(method, m_lo)?.median_secs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub max_m: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub mode: SearchMode,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            max_m: 5,
            repeats: 25,
            warmup: 3,
            mode: SearchMode::Approx,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wall time of completing `M = 1..=max_m` missing items for the query set
/// `x`: one CST inference plus `M` top-1 retrievals, against `M` sequential
/// encoder passes each followed by a retrieval. Labels cycle through the
/// index's categories.
pub fn timing_benchmark(
    cst: &CstModel,
    st: &CstModel,
    x: &FeatureSet,
    index: &RetrievalIndex,
    config: &TimingConfig,
) -> Result<TimingReport> {
    if config.repeats < 1 || config.max_m < 1 {
        return Err(Error::InvalidArgument(
            "repeats and max_m must be at least 1".into(),
        ));
    }
    let cats: Vec<u32> = index.category_counts().into_keys().collect();
    let mut rows = Vec::new();
    for m in 1..=config.max_m {
        let labels: Vec<u32> = (0..m).map(|i| cats[i % cats.len()]).collect();
        let run_cst = || -> Result<Vec<u64>> {
            let out = cst.complete_features(x, &cst.slot_init_for(&labels, cst.eval_seed()))?;
            (0..m)
                .map(|i| {
                    Ok(index.query_knn(out.row(i), 1, Some(labels[i]), config.mode)?[0].item_id)
                })
                .collect()
        };
        let run_st = || st.st_sequential_complete(x, &labels, index, config.mode);
        for (name, model, run) in [
            ("cst", cst, &run_cst as &dyn Fn() -> Result<Vec<u64>>),
            ("st", st, &run_st as &dyn Fn() -> Result<Vec<u64>>),
        ] {
            for _ in 0..config.warmup {
                run()?;
            }
            model.reset_forward_passes();
            let mut times = Vec::with_capacity(config.repeats);
            for _ in 0..config.repeats {
                let t0 = Instant::now();
                std::hint::black_box(run()?);
                times.push(t0.elapsed().as_secs_f64());
            }
            let passes = model.forward_passes() / config.repeats as u64;
            let med = median(times);
            if med <= 0.0 {
                return Err(Error::InvalidArgument(
                    "timer resolution is coarser than the measured span".into(),
                ));
            }
            rows.push(TimingRow {
                method: name.into(),
                m,
                n_items: index.len(),
                median_secs: med,
                forward_passes: passes,
                repeats: config.repeats,
            });
        }
    }
    Ok(TimingReport {
        rows,
        query_set_size: x.valid_count(),
        mode: config.mode,
    })
}

/// Cost of one nearest-neighbour query as a function of the candidate count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum QueryCost {
    Constant(f64),
    /// `per_item · N_y`
    Linear(f64),
    /// `scale · log2(N_y)`
    Logarithmic(f64),
}

impl QueryCost {
    pub fn at(&self, n_y: usize) -> f64 {
        match *self {
            QueryCost::Constant(c) => c,
            QueryCost::Linear(c) => c * n_y as f64,
            QueryCost::Logarithmic(c) => c * (n_y as f64).log2(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityInputs {
    /// Cost of one model inference.
    pub p: f64,
    pub q: QueryCost,
    /// Number of missing items.
    pub m: usize,
    /// Series length of a sequential model.
    pub l: usize,
    /// Candidate count.
    pub n_y: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompletionMethod {
    Proposed,
    SetTransformer,
    BiLstm,
}

/// `P + M·Q`, `M·(P + Q)` or `(L - M)·L·(P + Q)` with `Q = Q(N_y)`.
pub fn complexity_calc(inputs: &ComplexityInputs, method: CompletionMethod) -> Result<f64> {
    let q = inputs.q.at(inputs.n_y);
    if !(inputs.p > 0.0 && q > 0.0) || inputs.m == 0 || inputs.n_y == 0 {
        return Err(Error::InvalidArgument(
            "complexity inputs must be positive".into(),
        ));
    }
    let (p, m) = (inputs.p, inputs.m as f64);
    Ok(match method {
        CompletionMethod::Proposed => p + m * q,
        CompletionMethod::SetTransformer => m * (p + q),
        CompletionMethod::BiLstm => {
            if inputs.m > inputs.l {
                return Err(Error::InvalidArgument(format!(
                    "M = {} exceeds the series length L = {}",
                    inputs.m, inputs.l
                )));
            }
            (inputs.l - inputs.m) as f64 * inputs.l as f64 * (p + q)
        }
    })
}

/// Everything measured for one method.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub retrieval: Option<RetrievalEval>,
    pub smd: Option<SmdReport>,
    pub finb: Option<FinbReport>,
    pub diversity: Option<DiversityReport>,
    pub timing: Option<TimingReport>,
}

/// One plot-ready sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub method: String,
    pub metric: String,
    pub index: usize,
    pub value: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// Per-sample values: per-triple recall and both SMD variants.
    pub fn samples(&self) -> Vec<SampleRow> {
        let mut out = Vec::new();
        let mut push = |metric: &str, vals: &[f64]| {
            out.extend(vals.iter().enumerate().map(|(i, &v)| SampleRow {
                method: self.method.clone(),
                metric: metric.into(),
                index: i,
                value: v,
            }))
        };
        if let Some(r) = &self.retrieval {
            push("recall", &r.per_triple_recall);
        }
        if let Some(s) = &self.smd {
            push("smd", &s.retrieved);
            push("smd_raw", &s.raw);
        }
        out
    }
}

pub fn write_samples_csv(path: &Path, rows: &[SampleRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<SampleRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Equal-width histogram of `samples` on `[lo, hi]`; out-of-range values
/// land in the edge bins.
pub fn histogram(samples: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut h = vec![0; bins];
    if bins == 0 || !(hi > lo) {
        return h;
    }
    for &s in samples {
        let b = ((s - lo) / (hi - lo) * bins as f64).floor();
        let b = if b.is_nan() {
            0
        } else {
            (b.max(0.0) as usize).min(bins - 1)
        };
        h[b] += 1;
    }
    h
}

/// Relative frequency of each label.
pub fn category_frequencies(labels: impl IntoIterator<Item = u32>) -> BTreeMap<u32, f64> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut n = 0;
    for l in labels {
        *counts.entry(l).or_default() += 1;
        n += 1;
    }
    counts
        .into_iter()
        .map(|(c, k)| (c, k as f64 / n as f64))
        .collect()
}
