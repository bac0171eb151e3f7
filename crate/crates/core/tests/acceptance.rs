//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Tolerances and budgets are pinned below.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use linefl::adapter::{backward, forward, grad_check, loss, AdapterConfig, GradCheckOptions, Mode};
use linefl::corpus::LineLabels;
use linefl::eval::{self, auc, rank_lines, roc, wilcoxon_signed_rank, LineScores};
use linefl::par::Exec;
use linefl::sbfl::{ochiai, CoverageMatrix, Outcome};
use linefl::states::encode_corpus;
use linefl::synth::{SynthConfig, SynthCorpus};
use linefl::training::{crossval, fold_assignment, lr_at, CrossvalResult, Dataset, Example, TrainConfig};
use linefl::windowing::{segment, WindowConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TRIALS: u64 = 100;
const GRAD_MAX_REL_ERR: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const WITNESS_MIN_DELTA: f64 = 1e-9;

const WINDOW_INSTANCES: u64 = 10_000;
const WINDOW_BUDGET: Duration = Duration::from_secs(60);

const PLANTED_DOCS: usize = 50;
const PLANTED_FOLDS: usize = 10;
const PLANTED_WINDOW: usize = 16;
const PLANTED_MODEL_DIM: usize = 32;
const PLANTED_STATE_DIM: usize = 64;
const PLANTED_MIN_TOP5: f64 = 0.90;
const PLANTED_MIN_AUC: f64 = 0.90;
const RANDOM_AUC_TOLERANCE: f64 = 0.05;
const PLANTED_BUDGET: Duration = Duration::from_secs(600);
// fixed once, before any run
const PLANTED_SEED: u64 = 2026;

#[allow(clippy::approx_constant)]
const OCHIAI_EXPECTED: f64 = 0.7071;
const OCHIAI_TOLERANCE: f64 = 5e-3;
const OCHIAI_RANDOM_MATRICES: u64 = 1_000;

const AUC_INSTANCES: u64 = 500;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { name, pass, detail }
}

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut layers_seen = BTreeSet::new();
    for trial in 0..GRAD_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let cfg = common::tiny_config(&mut rng);
        layers_seen.insert(cfg.n_layers);
        let model = common::seeded_model(cfg.clone(), trial);
        let cap = rng.random_range(1..=8);
        let n = rng.random_range(1..=3);
        let batch = common::random_batch(&mut rng, n, cap, cfg.input_dim);
        let opts = GradCheckOptions { exec: Exec::default(), ..Default::default() };
        worst = worst.max(grad_check(&model, &batch, &opts).unwrap());
    }
    let elapsed = t.elapsed();
    verdict(
        "gradient correctness",
        worst < GRAD_MAX_REL_ERR && elapsed < GRAD_BUDGET && layers_seen.len() == 3,
        format!("max relative error {worst:.2e} over {GRAD_TRIALS} configs (layers {layers_seen:?}) in {elapsed:.1?}"),
    )
}

fn bidirectionality() -> Verdict {
    let mut min_witness = f64::INFINITY;
    let mut max_probe_leak = 0.0f64;
    for trial in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        for layers in 0..=2 {
            let cfg = AdapterConfig { dropout: 0.0, ..AdapterConfig::small(16, 8, layers, 2) };
            let model = common::seeded_model(cfg, trial * 3 + layers as u64);
            let len = rng.random_range(2..=8);
            let base = vec![common::sample_with_len(&mut rng, "w", len, 8, 16)];
            let mut moved = base.clone();
            moved[0].states.row_mut(len - 1).mapv_inplace(|v| v + 0.5);
            let a = forward(&model, &base, Mode::Eval, Exec::Sequential).unwrap();
            let b = forward(&model, &moved, Mode::Eval, Exec::Sequential).unwrap();
            let deltas = (0..len - 1).map(|i| (a.probs[0][i] - b.probs[0][i]).abs());
            if layers == 0 {
                max_probe_leak = max_probe_leak.max(deltas.fold(0.0, f64::max));
            } else {
                min_witness = min_witness.min(deltas.fold(0.0, f64::max));
            }
        }
    }
    verdict(
        "bidirectionality / linear-probe contrast",
        min_witness > WITNESS_MIN_DELTA && max_probe_leak == 0.0,
        format!("smallest earlier-line |dB| with layers {min_witness:.2e}; linear probe leak {max_probe_leak:e}"),
    )
}

fn masking() -> Verdict {
    let mut mismatches = 0;
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + trial);
        let cfg = common::tiny_config(&mut rng);
        let model = common::seeded_model(cfg.clone(), trial);
        let batch = common::random_batch(&mut rng, 3, 8, cfg.input_dim);
        let extra = rng.random_range(1..=16);
        let padded: Vec<_> = batch.iter().map(|s| s.with_extra_padding(extra)).collect();
        let t1 = forward(&model, &batch, Mode::Eval, Exec::default()).unwrap();
        let t2 = forward(&model, &padded, Mode::Eval, Exec::default()).unwrap();
        let same_loss = loss(&t1, &batch).unwrap().to_bits() == loss(&t2, &padded).unwrap().to_bits();
        let same_grads = backward(&model, &t1, &batch, Exec::default()).unwrap()
            == backward(&model, &t2, &padded, Exec::default()).unwrap();
        mismatches += usize::from(!(same_loss && same_grads));
    }
    verdict("masking", mismatches == 0, format!("{mismatches} of 50 padded batches differed in loss or gradients"))
}

fn windowing_coverage() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let mut failures = 0;
    for _ in 0..WINDOW_INSTANCES {
        let m = rng.random_range(1..=2000);
        let w = if rng.random_bool(0.5) { 8 } else { 128 };
        let k = rng.random_range(1..=20.min(m));
        let faulty: BTreeSet<usize> = (0..k).map(|_| rng.random_range(1..=m)).collect();
        let windows = segment("d", m, &faulty, w, &mut rng).unwrap();
        let covered = faulty.iter().all(|f| windows.iter().any(|s| s.contains(*f)));
        let bounded = windows.iter().all(|s| s.start >= 1 && s.length <= w && s.end() <= m);
        let single = m > w || windows.len() == 1;
        failures += usize::from(!(covered && bounded && single));
    }
    let elapsed = t.elapsed();
    verdict(
        "windowing coverage",
        failures == 0 && elapsed < WINDOW_BUDGET,
        format!("{failures} violations in {WINDOW_INSTANCES} instances, {elapsed:.1?}"),
    )
}

fn planted_crossval(corpus: &SynthCorpus) -> CrossvalResult {
    let manifest = corpus.manifest().unwrap();
    let states = encode_corpus(&corpus.sources(), PLANTED_STATE_DIM, PLANTED_SEED, Exec::default()).unwrap();
    let examples =
        states.into_iter().zip(&manifest.records).map(|(s, r)| Example::new(s, r.labels()).unwrap()).collect();
    let data = Dataset::new(examples).unwrap();
    let folds = fold_assignment(&manifest, PLANTED_FOLDS, PLANTED_SEED).unwrap();
    let cfg =
        TrainConfig { seed: PLANTED_SEED, window: WindowConfig::with_capacity(PLANTED_WINDOW), ..TrainConfig::desk() };
    let adapter = AdapterConfig {
        max_positions: PLANTED_WINDOW,
        ..AdapterConfig::small(PLANTED_STATE_DIM, PLANTED_MODEL_DIM, 2, 4)
    };
    crossval(&data, &folds, &adapter, &cfg, Exec::default()).unwrap()
}

fn planted_signal() -> Verdict {
    let t = Instant::now();
    let corpus =
        SynthCorpus::generate(&SynthConfig { docs: PLANTED_DOCS, seed: PLANTED_SEED, ..Default::default() }).unwrap();
    let planted = planted_crossval(&corpus);
    let control = planted_crossval(&corpus.with_random_labels(PLANTED_SEED + 1));
    let elapsed = t.elapsed();

    let top5 = planted.aggregate.top_n_fraction(5);
    let auc_planted = planted.aggregate.auc.unwrap_or(0.0);
    let auc_control = control.aggregate.auc.unwrap_or(0.0);
    verdict(
        "planted-signal end-to-end",
        top5 >= PLANTED_MIN_TOP5
            && auc_planted >= PLANTED_MIN_AUC
            && (auc_control - 0.5).abs() <= RANDOM_AUC_TOLERANCE
            && elapsed < PLANTED_BUDGET,
        format!(
            "top-5 {}/{} ({:.1}%), auc {auc_planted:.4}; random-label auc {auc_control:.4}; {elapsed:.1?}",
            planted.aggregate.top_n(5),
            planted.aggregate.total_bugs,
            100.0 * top5
        ),
    )
}

#[allow(clippy::needless_range_loop)]
fn ochiai_oracle() -> Verdict {
    // two failing tests both cover the line; two of the five passing tests do
    let text = "tests=7 lines=1\n1|fail\n1|fail\n1|pass\n1|pass\n0|pass\n0|pass\n0|pass\n";
    let score = ochiai(&CoverageMatrix::parse("getNullText", text).unwrap()).unwrap().scores.scores[0];

    let mut mismatches = 0;
    for trial in 0..OCHIAI_RANDOM_MATRICES {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let (t, m) = (rng.random_range(1..=20), rng.random_range(1..=30));
        let covered: Vec<Vec<bool>> = (0..t).map(|_| (0..m).map(|_| rng.random_bool(0.5)).collect()).collect();
        let outcomes: Vec<Outcome> =
            (0..t).map(|_| if rng.random_bool(0.3) { Outcome::Fail } else { Outcome::Pass }).collect();
        let got = ochiai(&CoverageMatrix::new("r", covered.clone(), outcomes.clone()).unwrap()).unwrap();
        let nf_total = outcomes.iter().filter(|o| **o == Outcome::Fail).count() as f64;
        for l in 0..m {
            let (mut lf, mut lp) = (0.0, 0.0);
            for i in 0..t {
                if covered[i][l] {
                    match outcomes[i] {
                        Outcome::Fail => lf += 1.0,
                        Outcome::Pass => lp += 1.0,
                    }
                }
            }
            let denom = ((lf + lp) * nf_total).sqrt();
            let expected = if denom == 0.0 { 0.0 } else { lf / denom };
            mismatches += usize::from(got.scores.scores[l] != expected);
        }
    }
    verdict(
        "ochiai oracle",
        (score - OCHIAI_EXPECTED).abs() <= OCHIAI_TOLERANCE && mismatches == 0,
        format!("getNullText {score:.6}; {mismatches} mismatching lines over {OCHIAI_RANDOM_MATRICES} random matrices"),
    )
}

fn metric_oracles() -> Verdict {
    let mut auc_mismatch = 0;
    let mut monotone_violations = 0;
    for trial in 0..AUC_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + trial);
        let n = rng.random_range(2..=200);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10u8)) / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut twice, mut p, mut q) = (0u64, 0u64, 0u64);
        for i in 0..n {
            if !labels[i] {
                q += 1;
                continue;
            }
            p += 1;
            for j in (0..n).filter(|&j| !labels[j]) {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        let pairwise = twice as f64 / (2 * p * q) as f64;
        auc_mismatch += usize::from(auc(&roc(&scores, &labels).unwrap()) != pairwise);

        let docs: Vec<(LineScores, LineLabels)> = scores
            .chunks(10)
            .enumerate()
            .map(|(i, c)| {
                let id = format!("d{i}");
                (LineScores::new(id.clone(), c.to_vec()).unwrap(), LineLabels::new(id, [rng.random_range(1..=c.len())]))
            })
            .collect();
        let counts = eval::top_n_counts(&docs, &[1, 3, 5]);
        monotone_violations += usize::from(!(counts[&1] <= counts[&3] && counts[&3] <= counts[&5]));
    }
    let mut ranked = rank_lines(&LineScores::new("t", vec![0.9, 0.9, 0.1]).unwrap());
    ranked.sort_by_key(|r| r.line);
    let ranks: Vec<usize> = ranked.iter().map(|r| r.rank).collect();
    let pairs: Vec<(f64, f64)> = (1..=6).map(|i| (f64::from(i) + 1.0, 1.0)).collect();
    let p = wilcoxon_signed_rank(&pairs).unwrap().p_value;
    verdict(
        "metric oracles",
        auc_mismatch == 0 && monotone_violations == 0 && ranks == [2, 2, 3] && p == 0.03125,
        format!(
            "{auc_mismatch} AUC/pairwise mismatches in {AUC_INSTANCES}; {monotone_violations} Top-N violations; \
             tie ranks {ranks:?}; wilcoxon n=6 p={p}"
        ),
    )
}

fn schedule() -> Verdict {
    let cfg = TrainConfig::full();
    let got = [lr_at(0, &cfg), lr_at(1000, &cfg), lr_at(20_000, &cfg)];
    verdict("schedule", got == [0.0, 1e-4, 1e-7], format!("lr at 0/1000/20000 = {got:?}"))
}

/// Every artifact of a small end-to-end run, serialized.
fn pipeline_artifacts(seed: u64) -> Vec<(String, Vec<u8>)> {
    let corpus = SynthCorpus::generate(&SynthConfig { docs: 10, seed, ..Default::default() }).unwrap();
    let manifest = linefl::corpus::assign_folds(&corpus.manifest().unwrap(), 2, seed).unwrap();
    let mut out = vec![("manifest".to_string(), manifest.to_bytes())];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut windows = Vec::new();
    for r in &manifest.records {
        let m = corpus.docs.iter().find(|d| d.id == r.id).unwrap().lines.len();
        windows.extend(segment(&r.id, m, &r.labels().faulty_lines, 16, &mut rng).unwrap());
    }
    out.push(("windows".into(), format!("{windows:?}").into_bytes()));

    let states = encode_corpus(&corpus.sources(), 32, seed, Exec::default()).unwrap();
    let examples = states.into_iter().zip(&manifest.records).map(|(s, r)| Example::new(s, r.labels()).unwrap());
    let data = Dataset::new(examples.collect()).unwrap();
    let folds = fold_assignment(&manifest, 2, seed).unwrap();
    let cfg = TrainConfig { seed, max_epochs: 8, window: WindowConfig::with_capacity(16), ..TrainConfig::desk() };
    let result = crossval(&data, &folds, &AdapterConfig::small(32, 16, 2, 2), &cfg, Exec::default()).unwrap();
    for f in &result.folds {
        out.push((format!("checkpoint {}", f.fold), f.checkpoint.to_bytes().unwrap()));
        out.push((format!("report {}", f.fold), f.report.to_json().unwrap().into_bytes()));
        out.push((format!("history {}", f.fold), f.history.to_csv().into_bytes()));
    }
    out.push(("aggregate".into(), result.aggregate.to_json().unwrap().into_bytes()));
    out
}

fn determinism() -> Verdict {
    let a = pipeline_artifacts(77);
    let b = pipeline_artifacts(77);
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    verdict(
        "determinism",
        a.len() == b.len() && differing.is_empty(),
        format!("{} artifacts compared byte for byte; differing: {differing:?}", a.len()),
    )
}

type Check = fn() -> Verdict;

fn main() -> ExitCode {
    let checks: [(&str, Check); 9] = [
        ("gradient", gradient_correctness),
        ("bidirectionality", bidirectionality),
        ("masking", masking),
        ("windowing", windowing_coverage),
        ("planted", planted_signal),
        ("ochiai", ochiai_oracle),
        ("metrics", metric_oracles),
        ("schedule", schedule),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (key, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let v = check();
        failed += usize::from(!v.pass);
        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
