//! Values checked against independent reference computations.

mod common;

use std::collections::HashMap;
use std::io::Write;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setcomplete::autodiff::softplus;
use setcomplete::data::{
    generate_dataset, read_jsonl, split_outfit, write_jsonl, Outfit, ReadOptions, SplitRole,
    SplitTriple,
};
use setcomplete::eval::{
    complexity_calc, diversity_histogram, evaluate_retrieval, finb_eval, smd, Completer,
    CompletionMethod, ComplexityInputs, GroundTruth, QueryCost, UniformChooser,
};
use setcomplete::layers::{mab, AttentionBlock};
use setcomplete::losses::{ce_inbatch, chamfer, sm_reg, LossConfig};
use setcomplete::matching::SetMatcher;
use setcomplete::params::ParamStore;
use setcomplete::retrieval::{AnnConfig, RetrievalIndex, SearchMode};
use setcomplete::set::FeatureSet;
use setcomplete::tensor::{dot, Tensor};
use setcomplete::{Error, Result};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Mat {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

fn affine(x: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let w = store.get(&format!("{prefix}.w")).unwrap();
    let b = store.get(&format!("{prefix}.b")).ok();
    x.iter()
        .map(|r| {
            (0..w.cols())
                .map(|j| {
                    let s: f64 = (0..w.rows()).map(|i| r[i] * w.get(i, j)).sum();
                    s + b.map_or(0.0, |b| b.get(0, j))
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let gain = store.get(&format!("{prefix}.gain")).unwrap();
    let offset = store.get(&format!("{prefix}.offset")).unwrap();
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain.get(0, j) + offset.get(0, j))
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Multi-head attention block written out with plain loops.
fn mab_oracle(q_in: &Mat, k_in: &Mat, store: &ParamStore, heads: usize) -> Mat {
    let q = affine(q_in, store, "b.q");
    let k = affine(k_in, store, "b.k");
    let v = affine(k_in, store, "b.v");
    let d = q[0].len();
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum();
            }
        }
    }
    let h = layer_norm(&add(q_in, &affine(&cat, store, "b.o")), store, "b.ln1");
    let f: Mat = affine(&h, store, "b.ff1")
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    layer_norm(&add(&h, &affine(&f, store, "b.ff2")), store, "b.ln2")
}

#[test]
fn attention_block_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = AttentionBlock::new("b", small_attention()).unwrap();
    let mut store = ParamStore::new();
    b.init(&mut store, &mut rng).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let q = gaussian_set(&mut rng, 3, 8);
    let k = gaussian_set(&mut rng, 5, 8);
    let got = mab(&q, &k, &b, &store).unwrap();
    let want = mab_oracle(&rows(q.features()), &rows(k.features()), &store, 2);
    for (g, w) in rows(got.features()).iter().zip(&want) {
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn chamfer_matches_exhaustive_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 1..=4 {
        for m in 1..=4 {
            let x = gaussian_set(&mut rng, n, 3);
            let y = gaussian_set(&mut rng, m, 3);
            let d =
                |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
            let (mut fwd, mut bwd) = (0.0, 0.0);
            for i in 0..n {
                fwd += (0..m)
                    .map(|j| d(x.row(i), y.row(j)))
                    .fold(f64::INFINITY, f64::min);
            }
            for j in 0..m {
                bwd += (0..n)
                    .map(|i| d(x.row(i), y.row(j)))
                    .fold(f64::INFINITY, f64::min);
            }
            let want = fwd + bwd;
            assert_eq!(chamfer(&x, &y).unwrap(), want);
        }
    }
}

#[test]
fn in_batch_cross_entropy_matches_brute_force_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let universe = unit_set(&mut rng, 16, 6);
    let cfg = LossConfig {
        alpha: 0.0,
        temperature: 0.2,
    };
    for b in 0..8 {
        let targets = [2 * b, 2 * b + 1];
        let ytrue = FeatureSet::new(universe.features().select_rows(&targets));
        let yhat = unit_set(&mut rng, 2, 6);
        let mut want = 0.0;
        for (m, &t) in targets.iter().enumerate() {
            let e: Vec<f64> = (0..16)
                .map(|j| (dot(yhat.row(m), universe.row(j)) / 0.2).exp())
                .collect();
            want -= (e[t] / e.iter().sum::<f64>()).ln();
        }
        want /= 2.0;
        assert!((ce_inbatch(&yhat, &ytrue, &universe, &cfg).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn target_outside_universe_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let universe = unit_set(&mut rng, 4, 3);
    let stray = unit_set(&mut rng, 1, 3);
    let err = ce_inbatch(&stray, &stray, &universe, &LossConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NotInUniverse(0)));
}

#[test]
fn set_matching_penalty_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut scorer = SetMatcher::new(small_matcher(), 3).unwrap();
    scorer.freeze();
    let x = unit_set(&mut rng, 3, 8);
    let y = unit_set(&mut rng, 2, 8);
    assert!((sm_reg(&y, &x, &y, &scorer).unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!((softplus(1.0) - (1.0 + 1f64.exp()).ln()).abs() < 1e-15);
    assert!((softplus(1.0) - 1.313_261_687_5).abs() < 1e-10);

    let unfrozen = SetMatcher::new(small_matcher(), 3).unwrap();
    assert!(sm_reg(&y, &x, &y, &unfrozen).is_err());
}

#[test]
fn split_size_is_uniform() {
    let data = generate_dataset(&tiny_data(1)).unwrap();
    let ids: Vec<u64> = data
        .catalog
        .items()
        .iter()
        .take(5)
        .map(|i| i.item_id)
        .collect();
    let outfit = Outfit {
        outfit_id: 1,
        likes: 0,
        item_ids: ids,
        extra: Default::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut counts = [0usize; 4];
    let trials = 10_000;
    for _ in 0..trials {
        let t = split_outfit(&outfit, &data.catalog, &mut rng).unwrap();
        assert_eq!(t.x.len() + t.y.len(), 5);
        assert!(t.x_ids().iter().all(|id| !t.y_ids().contains(id)));
        counts[t.y.len() - 1] += 1;
    }
    let expected = trials as f64 / 4.0;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square p = {p}, counts {counts:?}");
}

#[test]
fn generated_outfits_are_coherent() {
    let data = generate_dataset(&tiny_data(6)).unwrap();
    let feat = |id: u64| data.catalog.get(id).unwrap().feature.clone();
    let (mut within, mut wn) = (0.0, 0);
    for o in &data.outfits {
        for i in 0..o.item_ids.len() {
            for j in i + 1..o.item_ids.len() {
                within += dot(&feat(o.item_ids[i]), &feat(o.item_ids[j]));
                wn += 1;
            }
        }
    }
    let (mut across, mut an) = (0.0, 0);
    for w in data.outfits.windows(2) {
        for &a in &w[0].item_ids {
            for &b in &w[1].item_ids {
                across += dot(&feat(a), &feat(b));
                an += 1;
            }
        }
    }
    assert!(within / wn as f64 > across / an as f64 + 0.05);
}

#[test]
fn jsonl_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let data = generate_dataset(&tiny_data(2)).unwrap();
    write_jsonl(&path, &data).unwrap();
    let back = read_jsonl(
        &path,
        ReadOptions {
            dim: Some(8),
            strict: true,
        },
    )
    .unwrap();
    assert_eq!(back, data);

    let bad = dir.path().join("bad.jsonl");
    let mut f = std::fs::File::create(&bad).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    writeln!(f, "{first}").unwrap();
    let mut v: serde_json::Value = serde_json::from_str(first).unwrap();
    v["outfit_id"] = 999_999.into();
    v["items"][0]["item_id"] = 888_888.into();
    let feat = v["items"][0]["feature"].as_array_mut().unwrap();
    feat.truncate(7);
    writeln!(f, "{v}").unwrap();
    drop(f);
    let err = read_jsonl(
        &bad,
        ReadOptions {
            dim: Some(8),
            strict: true,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

    let empty = dir.path().join("empty.jsonl");
    std::fs::File::create(&empty).unwrap();
    let d = read_jsonl(&empty, ReadOptions::default()).unwrap();
    assert!(d.outfits.is_empty() && d.catalog.is_empty());
}

#[test]
fn uniform_chooser_scores_chance() {
    let data = generate_dataset(&tiny_data(9)).unwrap();
    let outfits: Vec<&Outfit> = data.outfits.iter().collect();
    let report = finb_eval(&UniformChooser::new(3), &outfits, &data.catalog, 7, 21).unwrap();
    assert_eq!(report.chance(), 0.125);
    assert!(report.total > 150);
    assert!(
        report.ci_low <= 0.125 && 0.125 <= report.ci_high,
        "{report:?}"
    );
}

struct RandomCompleter(std::cell::RefCell<ChaCha8Rng>);

impl Completer for RandomCompleter {
    fn name(&self) -> String {
        "random".into()
    }

    fn complete(&self, t: &SplitTriple) -> Result<Tensor> {
        let mut rng = self.0.borrow_mut();
        Ok(Tensor::randn(t.z.len(), t.x.dim(), 0.0, 1.0, &mut *rng).normalize_rows())
    }
}

#[test]
fn retrieval_oracles_and_baselines() {
    let data = generate_dataset(&tiny_data(12)).unwrap();
    let index = RetrievalIndex::build(data.catalog.items(), None).unwrap();
    let triples = data.triples(SplitRole::Train, 0).unwrap();

    let gt = evaluate_retrieval(&GroundTruth, &triples, &index, 1, SearchMode::Exact, 0).unwrap();
    assert_eq!(gt.recall.value, 1.0);
    assert_eq!(gt.accuracy.value, 1.0);

    let random = RandomCompleter(ChaCha8Rng::seed_from_u64(5).into());
    let r = evaluate_retrieval(&random, &triples, &index, 10, SearchMode::Exact, 0).unwrap();
    let base = r.random_recall_baseline;
    assert!(
        (r.recall.value - base).abs() < 0.5 * base,
        "{} vs {base}",
        r.recall.value
    );

    let mut freq: HashMap<u64, usize> = HashMap::new();
    for t in &triples {
        for &id in t.y_ids() {
            *freq.entry(id).or_default() += 1;
        }
    }
    let div = diversity_histogram(&GroundTruth, &triples, &index, SearchMode::Exact).unwrap();
    assert_eq!(div.distinct_items, freq.len());
    for (id, count) in &div.top {
        assert_eq!(freq[id], *count);
    }

    let mut scorer = SetMatcher::new(small_matcher(), 0).unwrap();
    scorer.freeze();
    let s = smd(
        &GroundTruth,
        &triples[..20],
        &index,
        &scorer,
        SearchMode::Exact,
        0,
    )
    .unwrap();
    assert!(s.raw.iter().chain(&s.retrieved).all(|&d| d == 0.0));
}

#[test]
fn complexity_worked_examples() {
    let inputs = ComplexityInputs {
        p: 10.0,
        q: QueryCost::Constant(1.0),
        m: 3,
        l: 8,
        n_y: 1000,
    };
    let c = |m| complexity_calc(&inputs, m).unwrap();
    assert_eq!(c(CompletionMethod::Proposed), 13.0);
    assert_eq!(c(CompletionMethod::SetTransformer), 33.0);
    assert_eq!(c(CompletionMethod::BiLstm), 440.0);

    let lin = ComplexityInputs {
        q: QueryCost::Linear(0.01),
        ..inputs
    };
    assert!((complexity_calc(&lin, CompletionMethod::Proposed).unwrap() - 40.0).abs() < 1e-12);
    let too_many = ComplexityInputs { m: 9, ..inputs };
    assert!(complexity_calc(&too_many, CompletionMethod::BiLstm).is_err());
}

#[test]
fn singleton_clusters_make_probing_exact() {
    let data = generate_dataset(&tiny_data(4)).unwrap();
    let items = data.catalog.items();
    let cfg = AnnConfig {
        clusters: items.len(),
        probes: 5,
        iterations: 3,
        seed: 1,
    };
    let index = RetrievalIndex::build(items, Some(cfg)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let q = unit_set(&mut rng, 1, 8);
        let a = index
            .query_knn(q.row(0), 5, None, SearchMode::Approx)
            .unwrap();
        let e = index
            .query_knn(q.row(0), 5, None, SearchMode::Exact)
            .unwrap();
        assert_eq!(a, e);
    }
}

#[test]
fn default_index_keeps_recall_at_32() {
    let data = generate_dataset(&Default::default()).unwrap();
    let index = RetrievalIndex::build(data.catalog.items(), Some(AnnConfig::default())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut found, mut total) = (0, 0);
    for _ in 0..200 {
        let anchor = &data.catalog.items()[rng.random_range(0..data.catalog.len())];
        let noisy: Vec<f64> = anchor
            .feature
            .iter()
            .map(|v| v + rng.random_range(-0.1..0.1))
            .collect();
        let q = Tensor::from_vec(1, noisy.len(), noisy)
            .unwrap()
            .normalize_rows();
        let exact = index
            .query_knn(q.row(0), 32, None, SearchMode::Exact)
            .unwrap();
        let approx = index
            .query_knn(q.row(0), 32, None, SearchMode::Approx)
            .unwrap();
        found += approx
            .iter()
            .filter(|h| exact.iter().any(|e| e.item_id == h.item_id))
            .count();
        total += 32;
    }
    let recall = found as f64 / total as f64;
    assert!(recall >= 0.95, "recall@32 = {recall}");
}
