//! Desk-scale acceptance suite. Every criterion runs in isolation and prints
//! one PASS/FAIL line with its tolerance; the test fails if any criterion does.
//!
//! Run with `cargo test -p reid-core --test acceptance -- --nocapture`.

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{array, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_core::data::{build_pair_instances, Attribute, DatasetSplit, ImageRecord, Role, SplitName};
use reid_core::encoder::text::TextEmbeddingProvider;
use reid_core::encoder::{reference_tiny_encoder, EmbeddingMatrix, VisionTower};
use reid_core::eval::{
    average_precision, cmc_rank_k, cosine_distance_matrix, k_reciprocal_rerank, mean_average_precision,
    DistanceMatrix, EmbeddingSet, RerankParams,
};
use reid_core::images::ImageStore;
use reid_core::loss::{dual_view_forward, info_nce_symmetric, LogitMatrix};
use reid_core::preprocess::{NormalizedImage, PixelImage};
use reid_core::sampler::{sample_epoch, SamplerConfig};
use reid_core::scorecam::{min_max, score_cam, upsample, ScoreCamConfig};
use reid_core::synth::{generate, SynthConfig};
use reid_core::train::{poly_warmup_lr, train, TrainConfig, TrainSettings};
use reid_core::zeroshot::{
    build_prompts, classify_zero_shot, macro_metrics, topk_accuracy, AttributeReport, PromptEmbeddings,
};
use reid_core::ReidError;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(time: Duration, limit: Duration) -> Result<(), String> {
    check(time < limit, || format!("took {time:.1?}, limit {limit:?}"))
}

// 1. Loss oracle ------------------------------------------------------------

fn brute_force_info_nce(l: &Array2<f64>, eps: f64) -> f64 {
    let n = l.nrows();
    let target = |i: usize, j: usize| if i == j { 1.0 - eps + eps / n as f64 } else { eps / n as f64 };
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        let zr: f64 = (0..n).map(|j| l[[i, j]].exp()).sum();
        let zc: f64 = (0..n).map(|j| l[[j, i]].exp()).sum();
        for j in 0..n {
            rows -= target(i, j) * (l[[i, j]].exp() / zr).ln();
            cols -= target(i, j) * (l[[j, i]].exp() / zc).ln();
        }
    }
    (rows / n as f64 + cols / n as f64) / 2.0
}

fn criterion_loss_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let n = [2, 4, 8, 16][k % 4];
        let eps = [0.0, 0.1][(k / 4) % 2];
        let scale = rng.random_range(1.0..30.0);
        let values = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0) * scale);
        let got = info_nce_symmetric(&LogitMatrix { values: values.clone(), scale }, eps).map_err(|e| e.to_string())?;
        let want = brute_force_info_nce(&values, eps);
        worst = worst.max((got - want).abs());
    }
    check(worst < 1e-6, || format!("max abs error {worst:e}"))?;
    let uniform = info_nce_symmetric(&LogitMatrix { values: Array2::zeros((5, 5)), scale: 1.0 }, 0.1).unwrap();
    check((uniform - 5f64.ln()).abs() < 1e-12, || format!("uniform logits gave {uniform}, want ln 5"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("100 matrices, max abs error {worst:.2e}"))
}

// 2. Gradient audit ---------------------------------------------------------

fn random_images(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<NormalizedImage> {
    (0..n)
        .map(|_| NormalizedImage {
            height: side,
            width: side,
            data: (0..side * side * 3).map(|_| rng.random_range(-1.5..1.5)).collect(),
        })
        .collect()
}

fn criterion_gradient_audit() -> Outcome {
    let start = Instant::now();
    let enc = reference_tiny_encoder(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let side = enc.input_side();
    let qs = random_images(4, side, &mut rng);
    let gs = random_images(4, side, &mut rng);
    let (scale, eps) = (10.0, 0.1);
    let out = dual_view_forward(&enc, &qs, &gs, scale, eps, true).map_err(|e| e.to_string())?;
    let grads = out.grads.expect("requested");
    let loss = |e: &reid_core::encoder::VisionEncoder| dual_view_forward(e, &qs, &gs, scale, eps, false).unwrap().loss;

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in 0..enc.params().len() {
        let n = enc.params().get(id).data.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for &k in idx.iter().take(10) {
            let mut plus = enc.clone();
            plus.params_mut().get_mut(id).data[k] += h;
            let mut minus = enc.clone();
            minus.params_mut().get_mut(id).data[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.get(id)[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            if rel >= 1e-3 {
                return Err(format!(
                    "{}[{k}]: analytic {an:e} vs numeric {fd:e} (rel {rel:.2e})",
                    enc.params().name(id)
                ));
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let fd_scale = {
        let lp = dual_view_forward(&enc, &qs, &gs, scale * h.exp(), eps, false).unwrap().loss;
        let lm = dual_view_forward(&enc, &qs, &gs, scale * (-h).exp(), eps, false).unwrap().loss;
        (lp - lm) / (2.0 * h)
    };
    let rel = (fd_scale - out.d_log_scale).abs() / fd_scale.abs().max(1e-8);
    check(rel < 1e-3, || format!("log scale gradient {} vs numeric {fd_scale}", out.d_log_scale))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{checked} parameters over {} tensors, max rel error {worst:.2e}",
        enc.params().len()
    ))
}

// 3. Sampler ----------------------------------------------------------------

fn random_split(rng: &mut ChaCha8Rng, players: usize) -> DatasetSplit {
    let mut records = Vec::new();
    for p in 0..players {
        let nq = rng.random_range(1..=2);
        let ng = rng.random_range(1..=6);
        for (role, count) in [(Role::Query, nq), (Role::Gallery, ng)] {
            for k in 0..count {
                records.push(ImageRecord {
                    record_id: format!("p{p}-{role}{k}"),
                    player_id: format!("p{p}"),
                    role,
                    image_path: PathBuf::from("unused.png"),
                    height_px: 64,
                    width_px: 32,
                });
            }
        }
    }
    DatasetSplit::new(SplitName::Train, records).unwrap()
}

fn criterion_sampler() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut bad_batches, mut duplicates, mut batches, mut short) = (0, 0, 0, 0);
    for epoch in 0..1000u64 {
        let players = rng.random_range(2..=40);
        let n = rng.random_range(2..=players.min(16));
        let drop_last = rng.random_bool(0.8);
        let split = random_split(&mut rng, players);
        let (instances, _) = build_pair_instances(&split, epoch);
        let key = |i: &reid_core::data::PairInstance| (i.query_record.record_id.clone(), i.gallery_record.record_id.clone());
        let mut available: HashMap<(String, String), usize> = HashMap::new();
        for i in &instances {
            *available.entry(key(i)).or_default() += 1;
        }
        let cfg = SamplerConfig {
            batch_size: n,
            seed: epoch,
            drop_last,
        };
        let out = sample_epoch(&instances, &cfg).map_err(|e| format!("epoch {epoch}: {e}"))?;
        let mut used: HashMap<(String, String), usize> = HashMap::new();
        for b in &out {
            batches += 1;
            let distinct: HashSet<&str> = b.instances.iter().map(|i| i.player_id.as_str()).collect();
            if distinct.len() != b.instances.len() || b.instances.is_empty() || b.instances.len() > n {
                bad_batches += 1;
            }
            if drop_last && b.instances.len() != n {
                short += 1;
            }
            for i in &b.instances {
                *used.entry(key(i)).or_default() += 1;
            }
        }
        duplicates += used
            .iter()
            .filter(|(k, &c)| c > available.get(*k).copied().unwrap_or(0))
            .count();
    }
    check(bad_batches == 0, || format!("{bad_batches} batches with repeated players"))?;
    check(duplicates == 0, || format!("{duplicates} duplicated instances"))?;
    check(short == 0, || format!("{short} short batches with drop_last"))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("1000 epochs, {batches} batches, 0 violations"))
}

// 4. Metric oracle ----------------------------------------------------------

/// Rank positions (1-based) of relevant gallery items, ties by gallery index.
fn relevant_ranks(row: &[f64], gp: &[usize], qp: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
    order
        .iter()
        .enumerate()
        .filter(|(_, &g)| gp[g] == qp)
        .map(|(r, _)| r + 1)
        .collect()
}

fn naive_ap(ranks: &[usize]) -> f64 {
    ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64
}

fn criterion_metrics() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut evaluated = 0;
    for inst in 0..200 {
        let q = rng.random_range(1..=8);
        let g = rng.random_range(1..=32);
        let pool = rng.random_range(1..=6);
        let qp: Vec<usize> = (0..q).map(|_| rng.random_range(0..pool)).collect();
        let gp: Vec<usize> = (0..g).map(|_| rng.random_range(0..pool)).collect();
        let quantise = inst % 3 == 0;
        let values = Array2::from_shape_fn((q, g), |_| {
            let v: f64 = rng.random_range(0.0..2.0);
            if quantise {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        });
        let rows: Vec<Vec<f64>> = values.rows().into_iter().map(|r| r.to_vec()).collect();
        let ranks: Vec<Vec<usize>> = (0..q).map(|i| relevant_ranks(&rows[i], &gp, qp[i])).collect();
        let usable: Vec<usize> = (0..q).filter(|&i| !ranks[i].is_empty()).collect();
        let d = DistanceMatrix::new(
            values,
            (0..q).map(|i| format!("q{i}")).collect(),
            (0..g).map(|i| format!("g{i}")).collect(),
            qp.iter().map(|p| p.to_string()).collect(),
            gp.iter().map(|p| p.to_string()).collect(),
        )
        .unwrap();
        if usable.is_empty() {
            check(mean_average_precision(&d).is_err(), || format!("instance {inst}: mAP without relevant items"))?;
            continue;
        }
        evaluated += 1;
        let want_map = usable.iter().map(|&i| naive_ap(&ranks[i])).sum::<f64>() / usable.len() as f64;
        let got_map = mean_average_precision(&d).map_err(|e| e.to_string())?;
        worst = worst.max((got_map - want_map).abs());
        for k in [1, 5, 10, g].into_iter().filter(|&k| k <= g) {
            let want = usable.iter().filter(|&&i| ranks[i][0] <= k).count() as f64 / usable.len() as f64;
            let got = cmc_rank_k(&d, k).map_err(|e| e.to_string())?;
            worst = worst.max((got - want).abs());
        }
    }
    check(worst < 1e-9, || format!("max abs error {worst:e}"))?;
    let pids: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
    let ap = average_precision(array![0.1, 0.2, 0.3].view(), &pids, "a");
    check(ap == Some(5.0 / 6.0), || format!("hand case AP {ap:?}, want 5/6"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{evaluated} instances with relevant items, max abs error {worst:.2e}, AP hand case exactly 5/6"))
}

// 5. Re-ranking -------------------------------------------------------------

fn unit_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn embedding_set(rows: &[Vec<f64>], pids: &[&str], tag: &str) -> EmbeddingSet {
    let ids = (0..rows.len()).map(|i| format!("{tag}{i}")).collect();
    let m = EmbeddingMatrix::from_raw_rows(ids, rows.to_vec()).unwrap();
    EmbeddingSet::new(m, pids.iter().map(|s| s.to_string()).collect()).unwrap()
}

/// Step-by-step k-reciprocal re-ranking on plain vectors.
fn naive_rerank(q: &[Vec<f64>], g: &[Vec<f64>], k1: usize, k2: usize, lambda: f64) -> Vec<Vec<f64>> {
    let q = unit_rows(q);
    let g = unit_rows(g);
    let all: Vec<Vec<f64>> = q.iter().chain(&g).cloned().collect();
    let n = all.len();

    // Squared Euclidean distances, each row divided by its maximum.
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            dist[i][j] = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        let m = dist[i].iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            for v in dist[i].iter_mut() {
                *v /= m;
            }
        }
    }
    let rank: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| dist[i][a].partial_cmp(&dist[i][b]).unwrap().then(a.cmp(&b)));
            o
        })
        .collect();
    let reciprocal = |i: usize, k: usize| -> Vec<usize> {
        rank[i][..=k.min(n - 1)]
            .iter()
            .copied()
            .filter(|&c| rank[c][..=k.min(n - 1)].contains(&i))
            .collect()
    };

    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let r = reciprocal(i, k1);
        let mut set: Vec<usize> = r.clone();
        for &c in &r {
            let rc = reciprocal(c, half);
            let common = rc.iter().filter(|x| r.contains(x)).count();
            if 3 * common > 2 * rc.len() {
                set.extend(rc);
            }
        }
        set.sort();
        set.dedup();
        let total: f64 = set.iter().map(|&j| (-dist[i][j]).exp()).sum();
        for &j in &set {
            v[i][j] = (-dist[i][j]).exp() / total;
        }
    }
    if k2 > 1 {
        let mut qe = vec![vec![0.0; n]; n];
        for i in 0..n {
            for &m in &rank[i][..k2] {
                for j in 0..n {
                    qe[i][j] += v[m][j] / k2 as f64;
                }
            }
        }
        v = qe;
    }
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            g.iter()
                .enumerate()
                .map(|(gj, gv)| {
                    let j = q.len() + gj;
                    let overlap: f64 = (0..n).map(|t| v[i][t].min(v[j][t])).sum();
                    let jaccard = 1.0 - overlap / (2.0 - overlap);
                    let cos: f64 = qi.iter().zip(gv).map(|(a, b)| a * b).sum();
                    lambda * (1.0 - cos).clamp(0.0, 2.0) + (1.0 - lambda) * jaccard
                })
                .collect()
        })
        .collect()
}

fn max_diff(a: &Array2<f64>, b: &[Vec<f64>]) -> f64 {
    a.indexed_iter().map(|((i, j), v)| (v - b[i][j]).abs()).fold(0.0, f64::max)
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn criterion_rerank() -> Outcome {
    let start = Instant::now();
    // Two clusters, around the x axis and around the y axis.
    let q = vec![vec![1.0, 0.05], vec![0.1, 1.0]];
    let g = vec![vec![0.98, 0.2], vec![0.9, -0.15], vec![-0.05, 0.95], vec![0.3, 0.9]];
    let qs = embedding_set(&q, &["a", "b"], "q");
    let gs = embedding_set(&g, &["a", "a", "b", "b"], "g");
    let params = RerankParams { k1: 3, k2: 2, lambda: 0.3 };
    let got = k_reciprocal_rerank(&qs, &gs, params).map_err(|e| e.to_string())?;
    let oracle = naive_rerank(&q, &g, 3, 2, 0.3);
    let hand = max_diff(&got.values, &oracle);
    check(hand < 1e-9, || format!("6-point oracle differs by {hand:e}"))?;
    // Same fixture through a numpy port of the original reference code.
    let frozen = vec![
        vec![0.003429863450373316, 0.11077711524988948, 0.9715702636096667, 0.8300252974538876],
        vec![0.8818443258716029, 1.0196299727682028, 0.0034703761111499754, 0.11132591341880371],
    ];
    let reference = max_diff(&got.values, &frozen);
    check(reference < 1e-9, || format!("6-point reference values differ by {reference:e}"))?;

    let identity = k_reciprocal_rerank(&qs, &gs, RerankParams { lambda: 1.0, ..params }).unwrap();
    let cos = cosine_distance_matrix(&qs, &gs).unwrap();
    check(identity.values == cos.values, || "λ = 1 changed the distances".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let nq = rng.random_range(1..=6);
        let ng = rng.random_range(2..=20);
        let d = rng.random_range(2..=8);
        let q = random_rows(&mut rng, nq, d);
        let g = random_rows(&mut rng, ng, d);
        let qp: Vec<String> = (0..nq).map(|i| format!("p{}", i % 3)).collect();
        let gp: Vec<String> = (0..ng).map(|i| format!("p{}", i % 3)).collect();
        let qs = embedding_set(&q, &qp.iter().map(String::as_str).collect::<Vec<_>>(), "q");
        let gs = embedding_set(&g, &gp.iter().map(String::as_str).collect::<Vec<_>>(), "g");
        let p = RerankParams {
            k1: rng.random_range(2..nq + ng),
            k2: 1,
            lambda: rng.random_range(0.0..1.0),
        };
        let p = RerankParams { k2: rng.random_range(1..p.k1), ..p };
        let out = k_reciprocal_rerank(&qs, &gs, p).map_err(|e| e.to_string())?;
        check(out.values.iter().all(|v| v.is_finite()), || "non-finite output".into())?;
        let same = k_reciprocal_rerank(&qs, &gs, RerankParams { lambda: 1.0, ..p }).unwrap();
        check(same.values == cosine_distance_matrix(&qs, &gs).unwrap().values, || "λ = 1 identity broke".into())?;
        worst = worst.max(max_diff(&out.values, &naive_rerank(&q, &g, p.k1, p.k2, p.lambda)));
    }
    check(worst < 1e-9, || format!("random instances differ from the oracle by {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "λ=1 exact, 6-point oracle error {hand:.2e} (reference {reference:.2e}), 50 random instances finite (oracle error {worst:.2e})"
    ))
}

// 6. LR schedule ------------------------------------------------------------

fn criterion_lr_schedule() -> Outcome {
    let (lr_max, lr_min) = TrainConfig::default().learning_rates(reid_core::encoder::ArchKind::Transformer);
    check((lr_max, lr_min) == (4e-5, 4e-6), || format!("transformer defaults {lr_max}/{lr_min}"))?;
    let steps_per_epoch = 125;
    let total = 8 * steps_per_epoch;
    let warmup = 2 * steps_per_epoch;
    let lr = |s| poly_warmup_lr(s, total, warmup, lr_max, lr_min, 1.0).unwrap();
    check(lr(warmup) == 4e-5, || format!("lr(warmup) = {:e}", lr(warmup)))?;
    check(lr(total) == 4e-6, || format!("lr(total) = {:e}", lr(total)))?;
    let mid = lr(warmup + (total - warmup) / 2);
    check((mid - 2.2e-5).abs() < 1e-18, || format!("midpoint {mid:e}"))?;
    let trace: Vec<f64> = (0..=total).map(lr).collect();
    check(trace[..=warmup].windows(2).all(|w| w[1] >= w[0]), || "warm-up not increasing".into())?;
    check(trace[warmup..].windows(2).all(|w| w[1] <= w[0]), || "decay not monotone".into())?;
    check(trace.iter().all(|&v| v <= lr_max), || "trace exceeds lr_max".into())?;
    check(trace[warmup..].iter().all(|&v| v >= lr_min), || "decay below lr_min".into())?;
    check(
        poly_warmup_lr(total + 1, total, warmup, lr_max, lr_min, 1.0).is_err(),
        || "step beyond total accepted".into(),
    )?;
    Ok(format!("lr({warmup}) = 4e-5, lr({total}) = 4e-6 exactly; monotone after warm-up"))
}

// 7. End-to-end -------------------------------------------------------------

fn criterion_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = generate(&SynthConfig::default(), dir.path()).map_err(|e| e.to_string())?;
    let settings = TrainSettings::default();
    let run = || {
        let enc = reference_tiny_encoder(7);
        let images = ImageStore::load(
            corpus.train.records.iter().chain(&corpus.test.records),
            &enc.preprocess_config(settings.train.flip_probability),
        )
        .unwrap();
        train(&settings, &corpus.train, &corpus.test, &images, enc, None)
    };
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    let means = a.history.epoch_mean_losses();
    check(means.len() == 8, || format!("{} epochs", means.len()))?;
    check(means.windows(2).all(|w| w[1] < w[0]), || format!("epoch mean losses not strictly decreasing: {means:?}"))?;
    let best = a.best_report.map_no_rerank();
    check(best >= 0.95, || format!("best eval mAP {best:.4}"))?;
    let same = a.history.losses().iter().zip(b.history.losses()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.history.losses().len() == b.history.losses().len();
    check(same, || "loss traces differ between same-seed runs".into())?;
    within(start.elapsed(), Duration::from_secs(600))?;
    let map_per_epoch: Vec<String> = a.history.evals.iter().map(|e| format!("{:.3}", e.map_no_rerank)).collect();
    Ok(format!(
        "best mAP {best:.4} (per epoch [{}]); epoch loss {:.3} -> {:.3}; identical traces; {:.1?} for two runs",
        map_per_epoch.join(", "),
        means[0],
        means[7],
        start.elapsed()
    ))
}

// 8. Score-CAM --------------------------------------------------------------

/// Side-4 tower that embeds the red channel of pixel (0,0) and reports fixed
/// activation maps.
struct Corner {
    maps: Vec<Array2<f64>>,
}

impl VisionTower for Corner {
    fn input_side(&self) -> usize {
        4
    }
    fn embed_pixels(&self, img: &PixelImage) -> reid_core::Result<Vec<f64>> {
        Ok(vec![img.at(0, 0, 0), 1.0])
    }
    fn activation_maps_for(&self, _: &PixelImage, _: &str) -> reid_core::Result<Vec<Array2<f64>>> {
        Ok(self.maps.clone())
    }
}

fn criterion_score_cam() -> Outcome {
    let ones = PixelImage::filled(4, 4, [1.0; 3]);
    let cfg = ScoreCamConfig::new("maps");
    let score = |e: &[f64]| -> reid_core::Result<f64> { Ok(2.0 * e[0]) };

    // M = 1: the map itself, normalised.
    let single = array![[0.2, 0.9, 0.4, 0.4], [0.1, 0.3, 0.8, 0.5], [0.6, 0.6, 0.7, 0.0], [0.5, 0.2, 0.3, 0.9]];
    let cam = score_cam(&Corner { maps: vec![single.clone()] }, &ones, "one", score, &cfg).map_err(|e| e.to_string())?;
    let want = single.mapv(|v| (v - 0.0) / (0.9 - 0.0));
    check(cam.values == want, || format!("M=1 map differs: {:?}", cam.values))?;
    let coarse = array![[0.0, 2.0], [1.0, 4.0]];
    let cam = score_cam(&Corner { maps: vec![coarse.clone()] }, &ones, "one", score, &cfg).unwrap();
    check(cam.values == min_max(&upsample(&min_max(&coarse), 4, 4)), || "M=1 upsampled map differs".into())?;

    // Two maps: a falling column ramp (1 at the corner) and a rising row ramp
    // (0 at the corner), so the masked scores are exactly 2 and 0.
    let a = Array2::from_shape_fn((4, 4), |(_, x)| (3 - x) as f64 / 3.0);
    let b = Array2::from_shape_fn((4, 4), |(y, _)| y as f64 / 3.0);
    let cam = score_cam(&Corner { maps: vec![a, b] }, &ones, "two", score, &cfg).unwrap();
    check(cam.scores == vec![2.0, 0.0], || format!("scores {:?}", cam.scores))?;
    let e2 = 2f64.exp();
    let (w0, w1) = (e2 / (e2 + 1.0), 1.0 / (e2 + 1.0));
    check((w0 - 0.881).abs() < 1e-3, || format!("w0 = {w0}"))?;
    // Weighted sum is w0*(3-x)/3 + w1*y/3: minimum 0 at (0,3), maximum 1 at (3,0).
    let mut hand = 0.0f64;
    for y in 0..4 {
        for x in 0..4 {
            let want = w0 * (3 - x) as f64 / 3.0 + w1 * y as f64 / 3.0;
            hand = hand.max((cam.values[[y, x]] - want).abs());
        }
    }
    check(hand < 1e-6, || format!("2-map fixture differs by {hand:e}"))?;
    check((cam.weights[0] - w0).abs() < 1e-12, || format!("weights {:?}", cam.weights))?;

    // Weight normalisation and chunking on the tiny encoder.
    let enc = reference_tiny_encoder(4);
    let img = PixelImage::from_fn(40, 24, |y, x, c| ((y * 5 + x * 3 + c * 7) % 17) as f64 / 16.0);
    let reference = enc.embed_pixels(&PixelImage::from_fn(40, 24, |y, x, c| ((y + 2 * x + c) % 9) as f64 / 8.0)).unwrap();
    let target = |e: &[f64]| -> reid_core::Result<f64> { Ok(e.iter().zip(&reference).map(|(a, b)| a * b).sum()) };
    let mut sum_err = 0.0f64;
    let mut chunk_err = 0.0f64;
    let mut maps = 0;
    for layer in ["conv1", "conv2", "conv3"] {
        let full = score_cam(&enc, &img, "sim", target, &ScoreCamConfig { batch_chunk: 10_000, ..ScoreCamConfig::new(layer) })
            .map_err(|e| e.to_string())?;
        maps += full.weights.len();
        sum_err = sum_err.max((full.weights.iter().sum::<f64>() - 1.0).abs());
        for chunk in [1, 3, 7] {
            let part = score_cam(&enc, &img, "sim", target, &ScoreCamConfig { batch_chunk: chunk, ..ScoreCamConfig::new(layer) })
                .unwrap();
            for (x, y) in full.scores.iter().zip(&part.scores) {
                chunk_err = chunk_err.max((x - y).abs());
            }
        }
        check(full.values.iter().all(|v| (0.0..=1.0).contains(v)), || format!("{layer} map outside [0,1]"))?;
    }
    check(sum_err <= 1e-9, || format!("weights sum off by {sum_err:e}"))?;
    check(chunk_err <= 1e-6, || format!("chunked scores differ by {chunk_err:e}"))?;
    Ok(format!(
        "M=1 exact; 2-map fixture error {hand:.1e}; {maps} maps, weight sum error {sum_err:.1e}; chunked error {chunk_err:.1e}"
    ))
}

// 9. Zero-shot probe --------------------------------------------------------

struct Stub {
    table: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl TextEmbeddingProvider for Stub {
    fn encoder_name(&self) -> &str {
        "stub"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed(&self, text: &str) -> reid_core::Result<Vec<f64>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| ReidError::Invalid(format!("no prompt `{text}`")))
    }
}

fn prompts_for(attribute: Attribute, rows: Vec<Vec<f64>>) -> PromptEmbeddings {
    let set = build_prompts(attribute);
    let dim = rows[0].len();
    let table = set.rendered.iter().cloned().zip(rows).collect();
    PromptEmbeddings::new(set, &Stub { table, dim }).unwrap()
}

fn criterion_zero_shot() -> Outcome {
    let err = |e: ReidError| e.to_string();
    // Jersey colour: the first three prompts get similarities 0.9, 0.2 and 0.5.
    let mut rows = vec![vec![0.0, 0.0, 0.0, 1.0]; 7];
    rows[0] = vec![1.0, 0.0, 0.0, 0.0];
    rows[1] = vec![0.0, 1.0, 0.0, 0.0];
    rows[2] = vec![0.0, 0.0, 1.0, 0.0];
    let colour = prompts_for(Attribute::JerseyColour, rows);
    let img = [0.9, 0.2, 0.5, -2.0];
    let ranking = classify_zero_shot(&img, &colour).map_err(err)?;
    check(ranking[..3] == [0, 2, 1], || format!("similarities (0.9, 0.2, 0.5) ranked {ranking:?}"))?;

    let nums = prompts_for(
        Attribute::JerseyNumber,
        (0..32).map(|i| (0..32).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
    );
    let mut rankings = Vec::new();
    let labels = vec![4, 9, 17, 30];
    for &l in &labels {
        // Second-best match is the true class; best is the next number.
        let mut e = vec![0.0; 32];
        e[(l + 1) % 32] = 1.0;
        e[l] = 0.8;
        rankings.push(classify_zero_shot(&e, &nums).map_err(err)?);
    }
    let top1 = topk_accuracy(&rankings, &labels, 1).map_err(err)?;
    let top3 = topk_accuracy(&rankings, &labels, 3).map_err(err)?;
    check(top1 == 0.0 && top3 == 1.0, || format!("top1 {top1}, top3 {top3}"))?;

    // Binary toy: class A has TP=1, FP=1, FN=0; class B has TP=1, FP=0, FN=1.
    let labels = [0, 1, 1];
    let preds = [0, 0, 1];
    let m = macro_metrics(&preds, &labels, 2).map_err(err)?;
    check(m.macro_precision == 0.75 && m.macro_recall == 0.75, || {
        format!("macroP {} macroR {}", m.macro_precision, m.macro_recall)
    })?;
    let f1 = (2.0 * 0.5 / 1.5 + 2.0 * 0.5 / 1.5) / 2.0;
    check((m.macro_f1 - f1).abs() < 1e-15, || format!("macroF1 {}", m.macro_f1))?;

    let sex = prompts_for(Attribute::Sex, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let embs = [[1.0, 0.2], [0.9, 0.1], [0.8, 0.3], [0.1, 1.0]];
    let rankings: Vec<Vec<usize>> = embs.iter().map(|e| classify_zero_shot(e, &sex).unwrap()).collect();
    let report = AttributeReport::from_rankings(&sex.prompts, &rankings, &[0, 0, 1, 1], &[1, 2]).map_err(err)?;
    check(report.confusion == vec![vec![2, 0], vec![1, 1]], || format!("confusion {:?}", report.confusion))?;
    check(report.topk_accuracy[&1] == 0.75 && report.topk_accuracy[&2] == 1.0, || {
        format!("top-k {:?}", report.topk_accuracy)
    })?;
    let (p, r) = ((2.0 / 3.0 + 1.0) / 2.0, (1.0 + 0.5) / 2.0);
    let f = (2.0 * (2.0 / 3.0) / (2.0 / 3.0 + 1.0) + 2.0 * 0.5 / 1.5) / 2.0;
    check(
        report.macro_precision == p && report.macro_recall == r && (report.macro_f1 - f).abs() < 1e-15,
        || format!("P {} R {} F1 {}", report.macro_precision, report.macro_recall, report.macro_f1),
    )?;
    Ok("sort, top-k and confusion fixtures exact; binary toy macroP = macroR = 0.75".into())
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let criteria: Vec<(&str, &str, fn() -> Outcome)> = vec![
        ("1 loss oracle", "abs 1e-6, < 10 s", criterion_loss_oracle),
        ("2 gradient audit", "rel 1e-3, < 2 min", criterion_gradient_audit),
        ("3 sampler", "0 violations, < 30 s", criterion_sampler),
        ("4 metric oracle", "abs 1e-9, AP = 5/6 exact, < 10 s", criterion_metrics),
        ("5 re-ranking", "λ=1 exact, oracle 1e-9, finite, < 10 s", criterion_rerank),
        ("6 lr schedule", "exact endpoints, monotone", criterion_lr_schedule),
        ("7 end-to-end", "mAP ≥ 0.95, strict descent, identical traces, < 10 min", criterion_end_to_end),
        ("8 score-cam", "M=1 exact, fixture 1e-6, Σw = 1 ± 1e-9, chunks 1e-6", criterion_score_cam),
        ("9 zero-shot", "exact fixtures, macroP = macroR = 0.75", criterion_zero_shot),
    ];
    let mut failed = Vec::new();
    for (name, tolerance, f) in criteria {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS  criterion {name} [{tolerance}]: {detail}"),
            Err(detail) => {
                println!("FAIL  criterion {name} [{tolerance}]: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
