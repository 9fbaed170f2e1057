//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tdm_core::channels::{isometry_residual, solve_right_density};
use tdm_core::io::{read_model, write_model};
use tdm_core::linalg::{self, c, unit, CMatrix};
use tdm_core::training::{batch_nll, evaluate_ids};
use tdm_core::{
    gauge_transform, nll_gradient, random_isometric_dictionary, train, Corpus, Density,
    Dictionary, TraceDensityModel, TrainConfig, Vocabulary,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn vocab(n: usize) -> Arc<Vocabulary> {
    Arc::new(Vocabulary::numbered(n).unwrap())
}

/// Every phrase of length `k` over `n` words, in lexicographic order.
fn enumerate(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..n).map(move |w| {
                    let mut q = p.clone();
                    q.push(w);
                    q
                })
            })
            .collect();
    }
    out
}

fn solved_model(dict: Dictionary) -> TraceDensityModel {
    let d = dict.d();
    let n = dict.n();
    let fp = solve_right_density(&dict, &Density::identity(d), 1e-10, 10_000).unwrap();
    TraceDensityModel::new(vocab(n), dict, Density::identity(d), fp.density).unwrap()
}

/// The twenty seeded dictionaries shared by criteria 2–4.
fn suite_dictionaries() -> Vec<Dictionary> {
    (0..20u64)
        .map(|i| {
            let n = 2 + (i as usize % 4);
            let d = 2 + (i as usize % 3);
            random_isometric_dictionary(n, d, 1_000 + i).unwrap()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let m = TraceDensityModel::trivial(vocab(2), 2).unwrap();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for k in 1..=4 {
        for x in enumerate(2, k) {
            let q = m.prob(&x).unwrap();
            worst = worst.max((q - 2f64.powi(-(k as i32))).abs());
            count += 1;
        }
    }
    let ids: Vec<usize> = (0..97).map(|i| (i * 7 + i / 3) % 2).collect();
    let mut ppl_err: f64 = 0.0;
    for k in 1..=4 {
        let ll = m.log_likelihood_ids(&ids, k).unwrap();
        ppl_err = ppl_err.max((ll.perplexity - 2.0).abs());
    }
    let elapsed = start.elapsed();
    Outcome {
        passed: count == 30 && worst <= 1e-12 && ppl_err <= 1e-12 && elapsed < Duration::from_secs(1),
        detail: format!(
            "{count} phrases, max |q − 2^-k| = {worst:.2e}, max |ppl − 2| = {ppl_err:.2e}, {elapsed:.2?}"
        ),
    }
}

fn criterion_2(models: &[TraceDensityModel]) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for m in models {
        for k in 1..=3 {
            let total: f64 = enumerate(m.n(), k).iter().map(|x| m.prob(x).unwrap()).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        passed: models.len() == 20 && worst <= 1e-9 && elapsed < Duration::from_secs(10),
        detail: format!("max |Σ q − 1| over k ≤ 3 = {worst:.2e}, {elapsed:.2?}"),
    }
}

fn criterion_3(models: &[TraceDensityModel]) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for m in models {
        let n = m.n();
        for len in 0..=2 {
            for x in enumerate(n, len) {
                let qx = m.prob(&x).unwrap();
                for k in 0..=2 {
                    for l in 0..=2 {
                        let mut total = 0.0;
                        for left in enumerate(n, k) {
                            for right in enumerate(n, l) {
                                let phrase: Vec<usize> =
                                    left.iter().chain(&x).chain(&right).copied().collect();
                                total += m.prob(&phrase).unwrap();
                            }
                        }
                        worst = worst.max((qx - total).abs());
                        checks += 1;
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        passed: worst <= 1e-9 && elapsed < Duration::from_secs(30),
        detail: format!("{checks} marginal identities, max deviation {worst:.2e}, {elapsed:.2?}"),
    }
}

fn criterion_4(dicts: &[Dictionary]) -> Outcome {
    let mut worst_residual: f64 = 0.0;
    let mut worst_iters = 0;
    let mut all_ok = true;
    for dict in dicts {
        match solve_right_density(dict, &Density::identity(dict.d()), 1e-10, 10_000) {
            Ok(r) => {
                worst_residual = worst_residual.max(r.residual);
                worst_iters = worst_iters.max(r.iterations);
            }
            Err(_) => all_ok = false,
        }
    }
    let e_dict = Dictionary::new(vec![unit(2, 0, 0), unit(2, 0, 1)]).unwrap();
    let e = solve_right_density(&e_dict, &Density::identity(2), 1e-10, 10_000).unwrap();
    let e_err = linalg::max_abs_diff(e.density.matrix(), &unit(2, 0, 0));
    Outcome {
        passed: all_ok && worst_residual <= 1e-10 && worst_iters <= 10_000 && e_err <= 1e-14 && e.iterations <= 2,
        detail: format!(
            "random: max residual {worst_residual:.2e}, max iterations {worst_iters}; E11/E12: entry error {e_err:.1e} in {} iteration(s)",
            e.iterations
        ),
    }
}

/// Central differences of the batch NLL, combined as `(∂_re + i ∂_im) / 2`.
fn finite_difference_gradient(model: &TraceDensityModel, batch: &[Vec<usize>], h: f64) -> CMatrix {
    let v = model.dict().stack();
    let f = |stack: &CMatrix| {
        let m = model
            .with_parts(
                Dictionary::from_stack(stack).unwrap(),
                model.p_left().clone(),
                model.p_right().clone(),
            )
            .unwrap();
        batch_nll(&m, batch).unwrap()
    };
    CMatrix::from_fn(v.nrows(), v.ncols(), |r, col| {
        let mut parts = [0.0; 2];
        for (slot, dir) in [c(h, 0.0), c(0.0, h)].into_iter().enumerate() {
            let mut plus = v.clone();
            plus[(r, col)] += dir;
            let mut minus = v.clone();
            minus[(r, col)] -= dir;
            parts[slot] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        c(parts[0] / 2.0, parts[1] / 2.0)
    })
}

fn criterion_5() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let model = solved_model(random_isometric_dictionary(3, 2, 500 + seed).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream: Vec<usize> = (0..7).map(|_| rng.random_range(0..3)).collect();
        let batch: Vec<Vec<usize>> = stream.windows(3).map(<[usize]>::to_vec).collect();
        let grad = nll_gradient(&model, &batch).unwrap();
        let fd = finite_difference_gradient(&model, &batch, 1e-5);
        for (g, f) in grad.iter().zip(fd.iter()) {
            for (a, b) in [(g.re, f.re), (g.im, f.im)] {
                let rel = (a - b).abs() / a.abs().max(b.abs());
                worst = worst.max(rel);
            }
        }
    }
    Outcome {
        passed: worst <= 1e-6,
        detail: format!("10 models, max relative error {worst:.2e}"),
    }
}

const TRANSITIONS: [[f64; 3]; 3] = [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]];

fn markov_chain(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = rng.random_range(0..3);
    let mut out = Vec::with_capacity(len);
    out.push(state);
    while out.len() < len {
        let u: f64 = rng.random();
        let row = &TRANSITIONS[state];
        let mut acc = 0.0;
        state = 2;
        for (t, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                state = t;
                break;
            }
        }
        out.push(state);
    }
    out
}

/// `−Σ_s π_s Σ_t P_st ln P_st`, with `π` from iterating the chain itself.
fn entropy_rate() -> f64 {
    let mut pi = [1.0, 0.0, 0.0];
    for _ in 0..10_000 {
        let mut next = [0.0; 3];
        for (s, &ps) in pi.iter().enumerate() {
            for t in 0..3 {
                next[t] += ps * TRANSITIONS[s][t];
            }
        }
        pi = next;
    }
    -(0..3)
        .map(|s| pi[s] * TRANSITIONS[s].iter().map(|&p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
}

struct Experiment {
    outcome: Outcome,
    report: tdm_core::TrainReport,
    model: TraceDensityModel,
}

fn criterion_6() -> Experiment {
    let start = Instant::now();
    let train_ids = markov_chain(50_000, 11);
    let held_out = markov_chain(10_000, 12);
    let corpus = Corpus::from_ids(train_ids.clone(), vocab(3)).unwrap();
    let config = TrainConfig {
        d: 4,
        k: 3,
        epochs: 200,
        learning_rate: 0.5,
        batch_size: 50_000,
        seed: 7,
        fp_tol: 1e-10,
        fp_max_iter: 10_000,
        min_count: 1,
    };
    let (model, report) = train(&corpus, &config).unwrap();

    // per-word cross-entropy of the whole held-out sequence
    let eval = evaluate_ids(&model, &held_out, held_out.len()).unwrap();
    let h = entropy_rate();

    let mut freq = [0.0; 3];
    for &w in &train_ids {
        freq[w] += 1.0 / train_ids.len() as f64;
    }
    let unigram = -held_out.iter().map(|&w| freq[w].ln()).sum::<f64>() / held_out.len() as f64;

    let elapsed = start.elapsed();
    let gap = (eval.cross_entropy - h).abs();
    Experiment {
        outcome: Outcome {
            passed: (h - 0.6390).abs() < 5e-5
                && gap <= 0.05
                && eval.cross_entropy < unigram
                && elapsed < Duration::from_secs(300),
            detail: format!(
                "held-out {:.4} nats/word vs entropy rate {h:.4} (gap {gap:.4}), unigram {unigram:.4}, {} epochs, {elapsed:.2?}",
                eval.cross_entropy,
                report.records.len()
            ),
        },
        report,
        model,
    }
}

fn random_complex(d: usize, rng: &mut ChaCha8Rng) -> CMatrix {
    CMatrix::from_fn(d, d, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        c(re, im)
    })
}

fn criterion_7() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut gauges = 0;
    for (mi, (n, d)) in [(3usize, 3usize), (2, 4)].into_iter().enumerate() {
        let model = solved_model(random_isometric_dictionary(n, d, 70 + mi as u64).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(900 + mi as u64);
        let phrases: Vec<Vec<usize>> = (0..=3).flat_map(|k| enumerate(n, k)).collect();
        let base: Vec<f64> = phrases.iter().map(|x| model.prob(x).unwrap()).collect();
        for j in 0..20 {
            let g = if j < 10 {
                random_isometric_dictionary(1, d, rng.random()).unwrap().mat(0).clone()
            } else {
                let noise = random_complex(d, &mut rng);
                let scale = 0.5 / linalg::frobenius(&noise);
                linalg::identity(d) + noise * c(scale, 0.0)
            };
            let gauged = gauge_transform(&model, &g).unwrap();
            for (x, q) in phrases.iter().zip(&base) {
                worst = worst.max((gauged.prob(x).unwrap() - q).abs());
            }
            gauges += 1;
        }
    }
    Outcome {
        passed: worst <= 1e-10,
        detail: format!("{gauges} gauges, max |q_g − q| over |x| ≤ 3 = {worst:.2e}"),
    }
}

fn criterion_8(trained: &TraceDensityModel) -> Outcome {
    let dir = std::env::temp_dir().join(format!("tdm-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut models: Vec<TraceDensityModel> = (0..5u64)
        .map(|s| solved_model(random_isometric_dictionary(2 + s as usize, 1 + s as usize % 4, 300 + s).unwrap()))
        .collect();
    models.push(trained.clone());
    let mut ok = true;
    let mut compared = 0;
    for (i, m) in models.iter().enumerate() {
        let path = dir.join(format!("model-{i}.json"));
        write_model(m, &path).unwrap();
        let back = read_model(&path).unwrap();
        ok &= back.dict() == m.dict() && back.p_left() == m.p_left() && back.p_right() == m.p_right();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for _ in 0..100 {
            let len = rng.random_range(1..=12);
            let x: Vec<usize> = (0..len).map(|_| rng.random_range(0..m.n())).collect();
            let a = m.trace_density(&x).unwrap();
            let b = back.trace_density(&x).unwrap();
            ok &= a.mantissa.to_bits() == b.mantissa.to_bits() && a.exp2 == b.exp2;
            compared += 1;
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    Outcome {
        passed: ok,
        detail: format!("{} models, {compared} phrase probabilities compared bitwise", models.len()),
    }
}

fn criterion_9(report: &tdm_core::TrainReport, model: &TraceDensityModel) -> Outcome {
    let max_left = report.records.iter().map(|r| r.left_residual).fold(0.0, f64::max);
    let max_right = report.records.iter().map(|r| r.right_residual).fold(0.0, f64::max);
    let iso = isometry_residual(model.dict());
    Outcome {
        passed: !report.records.is_empty() && max_left <= 1e-10 && max_right <= 1e-10,
        detail: format!(
            "{} epochs, max left {max_left:.2e}, max right {max_right:.2e}, final isometry defect {iso:.2e}",
            report.records.len()
        ),
    }
}

fn main() {
    let dicts = suite_dictionaries();
    let models: Vec<TraceDensityModel> = dicts.iter().cloned().map(solved_model).collect();

    let mut results = vec![
        ("1 trivial-model exactness", criterion_1()),
        ("2 normalization", criterion_2(&models)),
        ("3 marginalization", criterion_3(&models)),
        ("4 fixed-point solver", criterion_4(&dicts)),
        ("5 gradient check", criterion_5()),
    ];
    let experiment = criterion_6();
    let c9 = criterion_9(&experiment.report, &experiment.model);
    let c8 = criterion_8(&experiment.model);
    results.push(("6 Markov learning experiment", experiment.outcome));
    results.push(("7 gauge invariance", criterion_7()));
    results.push(("8 serialization", c8));
    results.push(("9 constraint maintenance", c9));

    let mut failures = 0;
    for (name, outcome) in &results {
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!("criterion {name}: {tag} ({})", outcome.detail);
        if !outcome.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all {} acceptance criteria passed", results.len());
}
