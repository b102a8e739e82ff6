//! Acceptance checks, one line each. Runs as a plain binary so the lines
//! are printed even when everything passes.
//!
//! cargo test --test acceptance [-- NAME_FILTER]

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

use fineas::data::NewsEvent;
use fineas::experiment::{run_experiment, ExperimentSettings};
use fineas::ingest::{build_bundle, dedupe, filter_top_entities, split_sizes, IngestConfig};
use fineas::models::{
    headline_key, Arm, Batch, BiLstmModel, BiLstmSpec, EmbeddingTable, EncoderSpec, Example, FineasModel, Model, Pooling,
};
use fineas::numeric::rng::{self, stream};
use fineas::numeric::{finite_diff_check_params, op_suite, Tensor};
use fineas::synth::{generate, lexicon_corpus, SynthConfig};
use fineas::tokenize::{build_word_vocab, encode, train_subword_vocab, TokenSeq};
use fineas::train::{evaluate, mse, simulate_early_stopping, train, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn() -> Outcome;

const CHECKS: [(&str, Check); 7] = [
    ("gradient-suite", gradient_suite),
    ("oracle-equivalence", oracle_equivalence),
    ("overfit-sanity", overfit_sanity),
    ("learnability", learnability),
    ("protocol-invariants", protocol_invariants),
    ("report-fidelity", report_fidelity),
    ("determinism", determinism),
];

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, check) in CHECKS {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), out.detail);
        if !out.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

// ---- gradient suite ---------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (rtol, h) = (1e-4, 1e-5);
    let mut worst = (String::new(), 0.0f64);
    let mut failures = Vec::new();
    let mut reports = op_suite(rtol, h).expect("op suite runs");

    let mut spec = EncoderSpec::new(12, 8, 1, 2);
    spec.max_len = 8;
    spec.dropout_p = 0.0;
    let batch = Batch::from_rows(&[vec![2, 5, 6, 3], vec![2, 7, 3], vec![2, 9, 10, 11, 3]]).unwrap();
    let target = [0.4, -0.3, 0.1];
    for pooling in [Pooling::Mean, Pooling::Cls] {
        let model = Model::Fineas(FineasModel::new(spec.clone(), pooling, false, 3).unwrap());
        reports.push((
            if pooling == Pooling::Mean { "fineas-stack-mean" } else { "fineas-stack-cls" },
            stack_check(&model, &batch, &target, rtol, h),
        ));
    }
    let bl = BiLstmSpec {
        vocab_size: 12,
        embed_dim: 4,
        hidden: 3,
        layers: 2,
        dropout_p: 0.0,
    };
    let model = Model::Bilstm(BiLstmModel::new(bl, 3).unwrap());
    reports.push(("bilstm-stack", stack_check(&model, &batch, &target, rtol, h)));

    for (name, r) in &reports {
        if r.max_rel_error > worst.1 {
            worst = (name.to_string(), r.max_rel_error);
        }
        if !r.passed() || r.checked == 0 {
            failures.push(*name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 60.0,
        format!(
            "{} checks at rtol {rtol:e}, worst {} rel err {:.2e}, failures {:?}, {secs:.1}s of 60s",
            reports.len(),
            worst.0,
            worst.1,
            failures
        ),
    )
}

fn stack_check(model: &Model, batch: &Batch, target: &[f64], rtol: f64, h: f64) -> fineas::numeric::GradCheckReport {
    let mut params = model.params().clone();
    let t = Tensor::new(&[target.len(), 1], target.to_vec()).unwrap();
    finite_diff_check_params(
        |g, p| {
            let mut local = model.clone();
            *local.params_mut() = p.clone();
            let y = local.forward(g, batch)?;
            let c = g.constant(t.clone());
            let d = g.sub(y, c)?;
            let sq = g.mul(d, d)?;
            g.mean_all(sq)
        },
        &mut params,
        rtol,
        h,
    )
    .expect("stack check runs")
}

// ---- oracle equivalence ---------------------------------------------------------------

/// Solves `a x = b` for square `a` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn oracle_equivalence() -> Outcome {
    let (n, d) = (512, 32);
    let mut r = rng::seeded(17, stream::SYNTH);
    let w: Vec<f64> = (0..d).map(|_| rng::normal(&mut r) / (d as f64).sqrt()).collect();
    let b = 0.1;
    let mut table = EmbeddingTable::new(d);
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut excluded = 0;
    let headlines: Vec<String> = (0..n).map(|i| format!("item{i}")).collect();
    let vocab = build_word_vocab(&headlines, n + 8, 1).unwrap();
    let mut examples = Vec::new();
    for text in &headlines {
        let x: Vec<f64> = (0..d).map(|_| rng::normal(&mut r)).collect();
        let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b + 0.1 * rng::normal(&mut r);
        let y = z.tanh();
        if y.abs() > 0.999 {
            excluded += 1;
            continue;
        }
        table.insert(headline_key(text), x.clone()).unwrap();
        examples.push(Example {
            seq: encode(&vocab, text, 4),
            key: headline_key(text),
            target: y,
        });
        features.push(x);
        targets.push(y);
    }

    // normal equations on [x, 1] against atanh(y)
    let m = d + 1;
    let mut ata = vec![vec![0.0; m]; m];
    let mut atb = vec![0.0; m];
    for (x, y) in features.iter().zip(&targets) {
        let row: Vec<f64> = x.iter().copied().chain([1.0]).collect();
        let t = y.atanh();
        for i in 0..m {
            atb[i] += row[i] * t;
            for j in 0..m {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let beta = solve(ata, atb);
    let oracle_pred: Vec<f64> = features
        .iter()
        .map(|x| (x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + beta[d]).tanh())
        .collect();
    let oracle_mse = mse(&oracle_pred, &targets).unwrap();

    let mut model = Model::Fineas(FineasModel::with_embeddings(table, 42));
    let cfg = TrainConfig {
        max_epochs: 2000,
        patience: 50,
        ..TrainConfig::default()
    };
    let record = train(&mut model, &examples, &examples, &cfg).unwrap();
    let head_mse = evaluate(&model, &examples, 256).unwrap();
    let rel = (head_mse - oracle_mse) / oracle_mse;
    outcome(
        rel.abs() <= 0.05,
        format!(
            "n={} d={d}: head MSE {head_mse:.6} vs least-squares {oracle_mse:.6} ({:+.2}% rel) after {} epochs; {excluded} rows with |y| > 0.999 excluded",
            examples.len(),
            100.0 * rel,
            record.epochs()
        ),
    )
}

// ---- overfit ------------------------------------------------------------------------

fn overfit_one(arm: Arm, bilstm: &BiLstmSpec, events: &[NewsEvent]) -> (f64, usize, f64) {
    let start = Instant::now();
    let corpus: Vec<&str> = events.iter().map(NewsEvent::headline).collect();
    let vocab = match arm {
        Arm::Bilstm => build_word_vocab(&corpus, 1000, 1).unwrap(),
        _ => train_subword_vocab(&corpus, 400).unwrap(),
    };
    let examples = fineas::models::encode_events(&vocab, events, 64);
    let mut model = Model::for_arm(arm, &EncoderSpec::default(), bilstm, vocab.len(), 42).unwrap();
    let cfg = TrainConfig {
        max_epochs: 500,
        patience: 500,
        target_loss: Some(1e-3),
        ..TrainConfig::default()
    };
    let record = train(&mut model, &examples, &examples, &cfg).unwrap();
    let final_mse = evaluate(&model, &examples, 64).unwrap();
    (final_mse, record.epochs(), start.elapsed().as_secs_f64())
}

fn overfit_sanity() -> Outcome {
    let events = lexicon_corpus(64, 3).unwrap();
    let bilstm = BiLstmSpec::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for arm in [Arm::FineasFinetune, Arm::Bilstm] {
        let (m, epochs, secs) = overfit_one(arm, &bilstm, &events);
        pass &= m < 1e-3 && epochs <= 500 && secs < 300.0;
        parts.push(format!("{arm} train MSE {m:.2e} in {epochs} epochs ({secs:.0}s)"));
    }
    outcome(pass, format!("{}; BiLSTM hidden {}", parts.join(", "), bilstm.hidden))
}

// ---- learnability -----------------------------------------------------------------

fn learnability() -> Outcome {
    let events = generate(&SynthConfig::default()).unwrap();
    let bundle = build_bundle(&events, &IngestConfig::default()).unwrap();
    let mut settings = ExperimentSettings::default();
    settings.bilstm.hidden = 64;
    settings.bilstm.embed_dim = 64;
    let report = run_experiment(&[bundle], &Arm::ALL, &settings, "acceptance").unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for c in &report.cells {
        let gain = 1.0 - c.test_mse / c.baseline_test_mse;
        let oos = c.oos_mse.expect("synthetic corpus has an oos span");
        let drift = oos / c.test_mse - 1.0;
        let ok = gain >= 0.40 && drift <= 0.50;
        pass &= ok;
        parts.push(format!(
            "{} {} (test {:.4} vs baseline {:.4}, {:+.0}%; oos {:.4}, {:+.0}% vs test)",
            c.arm,
            if ok { "ok" } else { "MISS" },
            c.test_mse,
            c.baseline_test_mse,
            -100.0 * gain,
            oos,
            100.0 * drift
        ));
    }
    outcome(pass, parts.join("; "))
}

// ---- protocol invariants ----------------------------------------------------------------

fn protocol_invariants() -> Outcome {
    let mut problems = Vec::new();

    let f = [0.995, 0.0025, 0.0025];
    for (n, expect) in [(400, (398, 1, 1)), (1_000, (994, 3, 3)), (1_000_000, (995_000, 2_500, 2_500))] {
        if split_sizes(n, &f) != expect {
            problems.push(format!("split_sizes({n}) = {:?}", split_sizes(n, &f)));
        }
    }

    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let es = runner.run(
        &(prop::collection::vec(0u16..50, 1..80), 1usize..10),
        |(losses, patience)| {
            let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
            let (best, stopped, run) = simulate_early_stopping(&losses, patience);
            let min = losses[..run].iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(losses[best], min);
            prop_assert!(losses[..best].iter().all(|&l| l > min));
            if stopped {
                prop_assert_eq!(run - 1 - best, patience);
            } else {
                prop_assert_eq!(run, losses.len());
            }
            Ok(())
        },
    );
    if let Err(e) = es {
        problems.push(format!("early stopping: {e}"));
    }

    let mut runner = TestRunner::new(PropConfig {
        cases: 300,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let idem = runner.run(
        &(prop::collection::vec((0u32..40, 0usize..5, 0usize..4, -2i8..=2), 0..60), 1usize..6),
        |(rows, k)| {
            let events: Vec<NewsEvent> = rows
                .into_iter()
                .map(|(day, ent, text, s)| {
                    let ts = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap() + chrono::Duration::hours(i64::from(day));
                    let texts = ["up", "Up ", "down", " flat  day"];
                    NewsEvent::new(ts, &format!("E{ent}"), texts[text], f64::from(s) / 2.0).unwrap()
                })
                .collect();
            let once = filter_top_entities(&dedupe(&events), k);
            prop_assert_eq!(&filter_top_entities(&dedupe(&once), k), &once);
            prop_assert_eq!(&dedupe(&once), &once);
            Ok(())
        },
    );
    if let Err(e) = idem {
        problems.push(format!("dedupe/filter: {e}"));
    }

    match padding_bit_exact() {
        Ok(n) => {
            if n != 0 {
                problems.push(format!("{n} predictions changed under extra padding"));
            }
        }
        Err(e) => problems.push(format!("padding check: {e}")),
    }

    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "split sizes for n in {400, 1e3, 1e6}; early stopping over 1000 sequences; dedupe/filter idempotence over 300 lists; padding invariance bit-exact for 4 arms".to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn padded(seq: &TokenSeq, extra: usize) -> TokenSeq {
    let mut s = seq.clone();
    s.ids.extend(std::iter::repeat(fineas::tokenize::PAD).take(extra));
    s
}

/// Count of predictions whose bits change when rows get extra trailing
/// padding or share a batch with a much longer row.
fn padding_bit_exact() -> fineas::Result<usize> {
    let events = generate(&SynthConfig {
        n_events: 40,
        ..SynthConfig::default()
    })?;
    let corpus: Vec<&str> = events.iter().map(NewsEvent::headline).collect();
    let sub = train_subword_vocab(&corpus, 300)?;
    let word = build_word_vocab(&corpus, 1000, 1)?;
    let mut spec = EncoderSpec::new(sub.len(), 16, 2, 2);
    spec.max_len = 64;
    let bl = BiLstmSpec {
        vocab_size: word.len(),
        embed_dim: 8,
        hidden: 8,
        ..BiLstmSpec::default()
    };
    let long = "AAPL ".repeat(30);
    let mut changed = 0;
    for arm in Arm::ALL {
        let vocab = if arm == Arm::Bilstm { &word } else { &sub };
        let model = Model::for_arm(arm, &spec, &bl, vocab.len(), 5)?;
        let seqs: Vec<TokenSeq> = corpus.iter().map(|h| encode(vocab, h, 64)).collect();
        let keys = vec![String::new(); seqs.len()];
        let base = model.predict(&Batch::from_seqs(&seqs.iter().collect::<Vec<_>>(), keys.clone())?)?;
        let with_pad: Vec<TokenSeq> = seqs.iter().map(|s| padded(s, 7)).collect();
        let mut with_long: Vec<&TokenSeq> = with_pad.iter().collect();
        let long_seq = encode(vocab, &long, 64);
        with_long.push(&long_seq);
        let mut keys_long = keys.clone();
        keys_long.push(String::new());
        let other = model.predict(&Batch::from_seqs(&with_long, keys_long)?)?;
        let singles: Vec<f64> = seqs
            .iter()
            .map(|s| model.predict(&Batch::from_seqs(&[s], vec![String::new()]).unwrap()).unwrap()[0])
            .collect();
        changed += base
            .iter()
            .zip(&other)
            .zip(&singles)
            .filter(|((a, b), c)| a.to_bits() != b.to_bits() || a.to_bits() != c.to_bits())
            .count();
    }
    Ok(changed)
}

// ---- report fidelity and determinism ------------------------------------------------------

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run_matrix(work: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fineas"))
        .args(["run-matrix", "--config"])
        .arg(fixture("tiny.toml"))
        .env("FINEAS_WORK_DIR", work)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

/// Non-empty, non-footer lines of a rendered table, split on runs of spaces.
fn table_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty() && !l.starts_with("config_hash="))
        .map(|l| l.split("  ").map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
        .collect()
}

fn report_fidelity() -> Outcome {
    let work = tempfile::tempdir().unwrap();
    if let Err(e) = run_matrix(work.path()) {
        return outcome(false, format!("run-matrix failed: {e}"));
    }
    let read = |f: &str| std::fs::read_to_string(work.path().join("report").join(f)).unwrap_or_default();
    let t1 = table_rows(&read("table1.txt"));
    let t2 = table_rows(&read("table2.txt"));
    let mut problems = Vec::new();

    let want_labels = ["6 months", "↪ next 2w", "12 months", "↪ next 2w", "24 months", "↪ next 2w"];
    if t1.first().map(|r| r.as_slice()) != Some(&["FinEAS".to_string(), "BERT".into(), "BiLSTM".into()][..]) {
        problems.push(format!("table 1 header {:?}", t1.first()));
    }
    let labels: Vec<&str> = t1.iter().skip(1).map(|r| r[0].as_str()).collect();
    if labels != want_labels {
        problems.push(format!("table 1 rows {labels:?}"));
    }
    if t1.iter().skip(1).any(|r| r.len() != 4 || r[1..].iter().any(|v| v.parse::<f64>().is_err())) {
        problems.push("table 1 has a row without three numeric cells".into());
    }

    if t2.first().map(|r| r.as_slice()) != Some(&["FinEAS".to_string(), "FinBERT".into()][..]) {
        problems.push(format!("table 2 header {:?}", t2.first()));
    }
    let labels2: Vec<&str> = t2.iter().skip(1).map(|r| r[0].as_str()).collect();
    if labels2 != ["6 months", "12 months", "24 months"] {
        problems.push(format!("table 2 rows {labels2:?}"));
    }
    if t2.iter().skip(1).any(|r| r.len() != 3 || r[1].parse::<f64>().is_err()) {
        problems.push("table 2 has a row without a FinEAS value".into());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "table 1: 3 columns x (3 windows + 3 next-2w rows); table 2: 2 columns x 3 windows".to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for w in [a.path(), b.path()] {
        if let Err(e) = run_matrix(w) {
            return outcome(false, format!("run-matrix failed: {e}"));
        }
    }
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    let names: HashSet<&PathBuf> = fa.keys().chain(fb.keys()).collect();
    let mut differ: Vec<String> = names
        .into_iter()
        .filter(|n| fa.get(*n) != fb.get(*n))
        .map(|n| n.display().to_string())
        .collect();
    differ.sort();
    outcome(
        differ.is_empty() && !fa.is_empty(),
        format!("{} files compared byte-for-byte, {} differ {:?}", fa.len(), differ.len(), differ),
    )
}

