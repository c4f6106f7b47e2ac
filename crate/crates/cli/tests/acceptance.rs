//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::HashMap;
use std::fs;
use std::io::{self, BufReader, Read};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urfc::branches::{BranchKind, GbdtBranchTrainer};
use urfc::features::{
    extract_region_graph, extract_statistical, extract_user_activity, StatFeature, UserIndex, N_STAT,
};
use urfc::fusion::{out_of_fold, FusionConfig};
use urfc::gbdt::{self, log_loss, softmax_grad_hess, GbdtModel, GbdtParams};
use urfc::ingest::{load_dataset, parse_visit_file, parse_visit_str, serialize_visit_log};
use urfc::metrics::{evaluate, F1Scope};
use urfc::model::{CalendarWindow, Category, Visit, VisitLog, N_CATEGORIES};
use urfc::pipeline::{read_truth, run_holdout, Corpus, EvalReport, TrainConfig};
use urfc::synth::{synth, SynthConfig};

struct CountingAlloc;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn holdout_report(config: &SynthConfig, dir: &Path) -> Result<EvalReport, String> {
    let out = synth(config, dir).map_err(err)?;
    let dataset = load_dataset(&out.root, &out.manifest, config.window, 5, config.seed).map_err(err)?;
    let truth = read_truth(&out.test_labels).map_err(err)?;
    let train = TrainConfig {
        branches: GbdtBranchTrainer::uniform(GbdtParams { seed: config.seed, ..GbdtParams::default() }),
        fusion: FusionConfig { seed: config.seed, ..FusionConfig::default() },
    };
    let (_, report) = run_holdout(dataset, &truth, &train, F1Scope::All).map_err(err)?;
    Ok(report)
}

fn branch_accuracy(report: &EvalReport, kind: BranchKind) -> f64 {
    report.branches.iter().find(|(k, _)| *k == kind).map(|(_, e)| e.accuracy).unwrap_or(f64::NAN)
}

fn criterion_1_fusion_ordering() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = SynthConfig::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(err)?;
    let start = Instant::now();
    let report = pool.install(|| holdout_report(&config, dir.path()))?;
    let elapsed = start.elapsed();
    let fused = report.fused.accuracy;
    let [i, t, m] = BranchKind::ALL.map(|k| branch_accuracy(&report, k));
    let detail = format!(
        "fused {fused:.4}, I {i:.4}, T {t:.4}, M {m:.4}, kappa {:.4}, macro-F1 {:.4}, {:.1}s on one thread",
        report.fused.kappa,
        report.fused.macro_f1,
        elapsed.as_secs_f64()
    );
    ensure(fused >= i.max(t).max(m) - 0.01, format!("fused below best branch - 1pt: {detail}"))?;
    ensure(m > i && m > t, format!("M does not beat I and T: {detail}"))?;
    ensure(elapsed <= Duration::from_secs(300), format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_2_signal_sanity() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let clean = holdout_report(&SynthConfig { noise: 0.0, ..SynthConfig::default() }, &dir.path().join("clean"))?;
    let pure = holdout_report(
        &SynthConfig { noise: 1.0, test_fraction: 0.5, ..SynthConfig::default() },
        &dir.path().join("pure"),
    )?;
    let (a0, a1) = (clean.fused.accuracy, pure.fused.accuracy);
    let detail = format!("noise 0: {a0:.4} (n={}), noise 1: {a1:.4} (n={})", clean.fused.n, pure.fused.n);
    ensure(a0 >= 0.90, format!("noise-0 accuracy too low: {detail}"))?;
    ensure((a1 - 1.0 / 9.0).abs() <= 0.05, format!("noise-1 accuracy outside 1/9 +- 0.05: {detail}"))?;
    Ok(detail)
}

/// Accuracy, kappa and present-class macro F1 by direct counting.
fn naive_metrics(y: &[usize], p: &[usize]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let agree = y.iter().zip(p).filter(|(a, b)| a == b).count() as f64;
    let p_o = agree / n;
    let mut p_e = 0.0;
    let mut f1_sum = 0.0;
    let mut present = 0;
    for c in 0..N_CATEGORIES {
        let in_true = y.iter().filter(|&&v| v == c).count() as f64;
        let in_pred = p.iter().filter(|&&v| v == c).count() as f64;
        p_e += (in_true / n) * (in_pred / n);
        if in_true + in_pred == 0.0 {
            continue;
        }
        let tp = y.iter().zip(p).filter(|(a, b)| **a == c && **b == c).count() as f64;
        let precision = if in_pred > 0.0 { tp / in_pred } else { 0.0 };
        let recall = if in_true > 0.0 { tp / in_true } else { 0.0 };
        f1_sum += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        present += 1;
    }
    let kappa = if p_o == 1.0 { 1.0 } else { (p_o - p_e) / (1.0 - p_e) };
    (p_o, kappa, f1_sum / present as f64)
}

fn cats(v: &[usize]) -> Vec<Category> {
    v.iter().map(|&i| Category::ALL[i]).collect()
}

fn criterion_3_metric_oracle() -> Outcome {
    let hand = evaluate(&cats(&[0, 0, 1, 1]), &cats(&[0, 1, 1, 1])).map_err(err)?;
    let expected = (0.75, 0.5, 11.0 / 15.0);
    ensure(
        (hand.accuracy - expected.0).abs() <= 1e-12
            && (hand.kappa - expected.1).abs() <= 1e-12
            && (hand.macro_f1 - expected.2).abs() <= 1e-12,
        format!("hand case gave ({}, {}, {})", hand.accuracy, hand.kappa, hand.macro_f1),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=50);
        let classes = rng.random_range(1..=N_CATEGORIES);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let p: Vec<usize> =
            (0..n).map(|i| if rng.random_bool(0.5) { y[i] } else { rng.random_range(0..classes) }).collect();
        let got = evaluate(&cats(&y), &cats(&p)).map_err(err)?;
        let (acc, kappa, f1) = naive_metrics(&y, &p);
        let diff = (got.accuracy - acc).abs().max((got.kappa - kappa).abs()).max((got.macro_f1 - f1).abs());
        ensure(diff <= 1e-12, format!("trial {trial}: difference {diff:e} on y={y:?} p={p:?}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("hand case exact; 1000 random pairs, max deviation {worst:e}"))
}

fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 3;
        x.push((0..4).map(|d| if d == c { 1.5 } else { 0.0 } + rng.random_range(-1.0..1.0)).collect());
        y.push(c);
    }
    (x, y)
}

fn criterion_4_gbdt() -> Outcome {
    let xor_x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
    let xor_y = vec![0, 1, 1, 0];
    let params = GbdtParams {
        n_rounds: 50,
        learning_rate: 0.3,
        max_depth: 2,
        min_samples_leaf: 1,
        min_gain: 0.0,
        ..GbdtParams::default()
    };
    let xor = gbdt::fit(&xor_x, &xor_y, 2, &params).map_err(err)?;
    for (x, &y) in xor_x.iter().zip(&xor_y) {
        ensure(xor.predict_class(x).map_err(err)? == y, format!("XOR misclassifies {x:?}"))?;
    }

    let (x, y) = blobs(240, 8);
    let params = GbdtParams { n_rounds: 40, max_depth: 3, ..GbdtParams::default() };
    let model = gbdt::fit(&x, &y, 3, &params).map_err(err)?;
    let mut previous = f64::INFINITY;
    for r in 0..=model.n_rounds() {
        let mut loss = 0.0;
        for (row, &label) in x.iter().zip(&y) {
            loss += log_loss(&model.predict_scores_upto(row, r).map_err(err)?, label);
        }
        loss /= x.len() as f64;
        ensure(loss <= previous + 1e-9, format!("loss rose at round {r}: {previous} -> {loss}"))?;
        previous = loss;
    }
    for row in &x {
        let sum: f64 = model.predict_proba(row).map_err(err)?.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-9, format!("probabilities sum to {sum}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let eps = 1e-5;
    for _ in 0..10 {
        let scores: Vec<f64> = (0..N_CATEGORIES).map(|_| rng.random_range(-3.0..3.0)).collect();
        let label = rng.random_range(0..N_CATEGORIES);
        let (g, _) = softmax_grad_hess(&scores, label);
        for k in 0..N_CATEGORIES {
            let shifted = |d: f64| {
                let mut s = scores.clone();
                s[k] += d;
                log_loss(&s, label)
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            ensure(
                (fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1e-3),
                format!("gradient {k}: analytic {} vs numeric {fd}", g[k]),
            )?;
        }
    }

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.json");
    model.save(&path).map_err(err)?;
    let loaded = GbdtModel::load(&path).map_err(err)?;
    for row in &x {
        let a = model.predict_scores(row).map_err(err)?;
        let b = loaded.predict_scores(row).map_err(err)?;
        ensure(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()), "save/load changed predictions")?;
    }
    Ok(format!(
        "XOR exact, loss non-increasing over {} rounds (final {previous:.4}), gradients, sums and save/load ok",
        model.n_rounds()
    ))
}

fn log_of(region: &str, events: &[(&str, u32, u8)]) -> Result<VisitLog, String> {
    let mut log = VisitLog::new(region, CalendarWindow::default());
    for &(u, d, h) in events {
        log.insert(u, Visit::new(d, h)).map_err(err)?;
    }
    Ok(log)
}

fn criterion_5_features() -> Outcome {
    let a = log_of("a", &[("u", 0, 8)])?;
    let b = log_of("b", &[("u", 5, 20)])?;
    let index = UserIndex::build([(&a, Category::Res), (&b, Category::Shop)]).map_err(err)?;
    let target = log_of("t", &[("u", 2, 11)])?;
    let mut expected = vec![0.0; 45];
    expected[Category::Res.index() * 5..][..5].copy_from_slice(&[1.0, 1.0, 1.0, 8.0, 0.0]);
    expected[Category::Shop.index() * 5..][..5].copy_from_slice(&[1.0, 1.0, 1.0, 20.0, 1.0]);
    ensure(extract_user_activity(&target, &index, "t") == expected, "single-user f_A differs from A(u)")?;

    let own = log_of("own", &[("w", 1, 9)])?;
    let index = UserIndex::build([(&own, Category::Hos)]).map_err(err)?;
    ensure(extract_user_activity(&own, &index, "own") == vec![0.0; 45], "self region not excluded")?;

    let r1 = log_of("r1", &[("u", 0, 1), ("x", 3, 3)])?;
    let r2 = log_of("r2", &[("v", 4, 22)])?;
    let index = UserIndex::build([(&r1, Category::Sch), (&r2, Category::Sch)]).map_err(err)?;
    let store: HashMap<String, StatFeature> =
        [("r1".to_owned(), extract_statistical(&r1)), ("r2".to_owned(), extract_statistical(&r2))].into();
    let target = log_of("t", &[("u", 6, 6), ("v", 6, 7)])?;
    let graph = extract_region_graph(&target, &index, &store, "t").map_err(err)?;
    let s = Category::Sch.index();
    for c in 0..N_CATEGORIES {
        let block = &graph[c * N_STAT..(c + 1) * N_STAT];
        if c == s {
            let mean: Vec<f64> =
                store["r1"].as_slice().iter().zip(store["r2"].as_slice()).map(|(p, q)| (p + q) / 2.0).collect();
            ensure(block == mean.as_slice(), "Sch block is not the mean of related regions")?;
        } else {
            ensure(block.iter().all(|&v| v == 0.0), format!("category {c} block is non-zero"))?;
        }
    }

    let empty = log_of("e", &[])?;
    let stat = extract_statistical(&empty);
    let activity = extract_user_activity(&empty, &index, "e");
    let graph = extract_region_graph(&empty, &index, &store, "e").map_err(err)?;
    ensure(
        stat.as_slice() == [0.0; 45].as_slice() && activity == vec![0.0; 45] && graph == vec![0.0; 405],
        "empty log does not give zero vectors",
    )?;
    Ok(format!(
        "f_A = A(u), self exclusion, single-category f_G, empty -> zeros of dims {}/{}/{}",
        stat.as_slice().len(),
        activity.len(),
        graph.len()
    ))
}

fn criterion_6_no_leakage() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = SynthConfig { regions_per_category: 12, n_users: 400, ..SynthConfig::default() };
    let out = synth(&config, dir.path()).map_err(err)?;
    let mut corpus =
        Corpus::load(load_dataset(&out.root, &out.manifest, config.window, 5, 1).map_err(err)?).map_err(err)?;
    let trainer = GbdtBranchTrainer::uniform(GbdtParams { n_rounds: 10, max_depth: 3, ..GbdtParams::default() });
    let fusion = FusionConfig::default();
    let folds = corpus.training_folds();
    let before = out_of_fold(&corpus, &trainer, &corpus.training_labels(), &folds, &fusion).map_err(err)?;
    let mut rows_checked = 0;
    let mut other_changed = 0;
    for fold in 0..fusion.k_folds {
        let labels = corpus.training_labels();
        for row in 0..folds.len() {
            if folds[row] == fold {
                corpus.relabel(row, Category::ALL[(labels[row].index() + 1 + fold) % N_CATEGORIES]);
            }
        }
        let after = out_of_fold(&corpus, &trainer, &corpus.training_labels(), &folds, &fusion).map_err(err)?;
        for row in 0..folds.len() {
            let same = before[row].iter().zip(&after[row]).all(|(a, b)| a.to_bits() == b.to_bits());
            if folds[row] == fold {
                ensure(same, format!("fold {fold} row {row} changed after poisoning its own labels"))?;
                rows_checked += 1;
            } else if !same {
                other_changed += 1;
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            corpus.relabel(row, label);
        }
    }
    ensure(other_changed > 0, "poisoning never changed any prediction")?;
    Ok(format!("{rows_checked} held-out rows bit-identical across {} poisonings", fusion.k_folds))
}

fn urfc(args: &[&str]) -> Result<(), String> {
    let output = Command::new(env!("CARGO_BIN_EXE_urfc")).args(args).env("RUST_LOG", "warn").output().map_err(err)?;
    ensure(
        output.status.success(),
        format!("urfc {} failed: {}", args.join(" "), String::from_utf8_lossy(&output.stderr)),
    )
}

fn dir_bytes(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in fs::read_dir(root).map_err(err)? {
        let path = entry.map_err(err)?.path();
        files.push((path.strip_prefix(root).map_err(err)?.to_path_buf(), fs::read(&path).map_err(err)?));
    }
    files.sort();
    Ok(files)
}

fn criterion_7_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    urfc(&["synth", "--out", &p("data"), "--regions-per-category", "20", "--users", "500", "--seed", "7"])?;
    let mut bundles = Vec::new();
    for threads in ["1", "8"] {
        let out = p(&format!("run{threads}"));
        fs::create_dir_all(&out).map_err(err)?;
        let model = format!("{out}/model");
        let pred = format!("{out}/predictions.csv");
        let report = format!("{out}/report.json");
        urfc(&["--threads", threads, "train", "--data", &p("data"), "--out", &model, "--rounds", "30", "--seed", "7"])?;
        urfc(&[
            "--threads",
            threads,
            "predict",
            "--data",
            &p("data"),
            "--model",
            &model,
            "--out",
            &pred,
            "--seed",
            "7",
        ])?;
        urfc(&[
            "--threads",
            threads,
            "eval",
            "--predictions",
            &pred,
            "--truth",
            &p("data/test_labels.csv"),
            "--out",
            &report,
        ])?;
        bundles.push((dir_bytes(Path::new(&model))?, fs::read(&pred).map_err(err)?, fs::read(&report).map_err(err)?));
    }
    ensure(bundles[0].0 == bundles[1].0, "model directories differ")?;
    ensure(bundles[0].1 == bundles[1].1, "predictions differ")?;
    ensure(bundles[0].2 == bundles[1].2, "reports differ")?;
    let model_bytes: usize = bundles[0].0.iter().map(|(_, b)| b.len()).sum();
    Ok(format!(
        "{} model files ({model_bytes} bytes), predictions and report identical for 1 and 8 threads",
        bundles[0].0.len()
    ))
}

/// Generates visit lines on the fly so the input never exists in memory.
struct GeneratedLines {
    next_line: usize,
    total_lines: usize,
    pending: Vec<u8>,
    offset: usize,
    produced: usize,
}

impl GeneratedLines {
    fn new(total_lines: usize) -> Self {
        GeneratedLines { next_line: 0, total_lines, pending: Vec::new(), offset: 0, produced: 0 }
    }

    fn fill(&mut self) {
        let i = self.next_line;
        self.pending.clear();
        self.offset = 0;
        let mut line = format!("U{:03}\t", i % 40);
        for k in 0..10 {
            let day = (i * 7 + k * 13) % 182;
            let date = CalendarWindow::default().date_of(day as u32).format("%Y%m%d");
            if k > 0 {
                line.push(',');
            }
            line.push_str(&format!("{date}&{:02}|{:02}", (i + k) % 24, (i + 3 * k) % 24));
        }
        line.push('\n');
        self.pending.extend_from_slice(line.as_bytes());
        self.next_line += 1;
    }
}

impl Read for GeneratedLines {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.offset == self.pending.len() {
            if self.next_line == self.total_lines {
                return Ok(0);
            }
            self.fill();
        }
        let n = buf.len().min(self.pending.len() - self.offset);
        buf[..n].copy_from_slice(&self.pending[self.offset..self.offset + n]);
        self.offset += n;
        self.produced += n;
        Ok(n)
    }
}

fn criterion_8_parser() -> Outcome {
    let window = CalendarWindow::default();
    let text = "B\t20181002&09|07,20181001&23\nA\t20181001&00\nB\t20181002&07\n";
    let log = parse_visit_str(text, "r", window).map_err(err)?;
    let canonical = serialize_visit_log(&log);
    let again = parse_visit_str(&canonical, "r", window).map_err(err)?;
    ensure(again == log && serialize_visit_log(&again) == canonical, "canonical round-trip failed")?;

    for (bad, line) in [
        ("A\t20181001&01\nB\t20181001&24\n", 2),
        ("A\t20181001&01\nB\t20181001&9\n", 2),
        ("A\t20181001&01\nB\t20181001&01\nC\t20181301&01\n", 3),
        ("A\t20181001&01\nB\t20181001&01\nC\t20181032&01\n", 3),
        ("A\t20181001&01\nB\t20190501&01\n", 2),
        ("A 20181001&01\n", 1),
    ] {
        let e = parse_visit_str(bad, "r", window).err().ok_or_else(|| format!("accepted {bad:?}"))?;
        ensure(e.to_string().starts_with(&format!("line {line}:")), format!("{bad:?} gave {e}"))?;
    }

    let lines = 100_000;
    let mut source = GeneratedLines::new(lines);
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let log = parse_visit_file(BufReader::new(&mut source), "big", window).map_err(err)?;
    let peak = PEAK.load(Ordering::SeqCst) - base;
    let retained = LIVE.load(Ordering::SeqCst).saturating_sub(base);
    let input = source.produced;
    let working = peak - retained;
    let detail = format!(
        "{lines} lines, {:.1} MB input, {} events; peak heap {:.2} MB, of which {:.1} KB transient",
        input as f64 / 1e6,
        log.num_events(),
        peak as f64 / 1e6,
        working as f64 / 1e3
    );
    ensure(peak * 4 < input, format!("peak heap not far below input size: {detail}"))?;
    ensure(working < 256 * 1024, format!("parser buffers grew with input: {detail}"))?;
    Ok(detail)
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("fusion ordering on the noise-0.3 benchmark", criterion_1_fusion_ordering),
        ("separable and pure-noise signal sanity", criterion_2_signal_sanity),
        ("metric oracle equivalence", criterion_3_metric_oracle),
        ("gradient boosting correctness", criterion_4_gbdt),
        ("feature contracts", criterion_5_features),
        ("no label leakage into out-of-fold rows", criterion_6_no_leakage),
        ("thread-count determinism of the CLI pipeline", criterion_7_determinism),
        ("visit parser", criterion_8_parser),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if filter.as_deref().is_some_and(|f| f != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail} [{secs:.1}s]"),
            Err(reason) => {
                failures += 1;
                println!("FAIL criterion {id} ({name}): {reason} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
