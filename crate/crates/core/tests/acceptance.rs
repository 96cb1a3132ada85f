//! Acceptance criteria 1-9, run in order at their stated tolerances.
//!
//! Prints one `criterion N: PASS|FAIL|SKIP` line each, then fails if any
//! criterion failed. Criterion 8 needs CIFAR-100 binaries: set
//! `NOFE_CIFAR100_DIR` to the directory holding `train.bin` and `test.bin`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nofe::cli::{DataSource, ExperimentConfig};
use nofe::dataio::{synth_hierarchy, Dataset, SynthParams};
use nofe::netspec::{count_params, make_generalist, make_nofe, parse_netspec, shipped, BranchSpec, NetSpec};
use nofe::pipeline::{
    build_nofe, class_slots, evaluate_top1, finetune_nofe, generalist_spec, nofe_forward, specialty_accuracy,
    train_flat, train_generalist, CropMode, GeneralistResult, NofENetwork, TrainedNet,
};
use nofe::specialty::{
    brute_force_elasso, elasso_assign, elasso_objective, fully_balanced_assign, ConfusionMatrix, IndicatorMatrix,
    LabelMapping, DEFAULT_MAX_SWEEPS,
};
use nofe::tensor::gradcheck::run_layer_suite;
use nofe::Tensor;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

/// Fails a criterion that passed on substance but overran its time limit.
fn within(v: Verdict, took: Duration, limit: Duration) -> Verdict {
    match v {
        Verdict::Pass(d) if took > limit => Verdict::Fail(format!("{d}; took {took:.1?}, limit {limit:?}")),
        v => v,
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::load(&crate_dir().join("configs/desk-synthetic.conf")).expect("desk config parses")
}

fn shipped_pair(name: &str) -> (NetSpec, BranchSpec) {
    let (base, branch) = shipped(name).expect("bundled");
    (
        parse_netspec(base).unwrap().into_net().unwrap(),
        parse_netspec(branch).unwrap().into_branch().unwrap(),
    )
}

fn within_pct(value: u64, target: f64, pct: f64) -> bool {
    (value as f64 - target).abs() <= target * pct / 100.0
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let (base, branch) = shipped_pair("alexnet-caffe");
    let nofe = |k: usize| {
        let g = make_generalist(&base, k).unwrap();
        count_params(&make_nofe(&g, &branch, &vec![base.output_width() / k; k]).unwrap())
    };
    let (b, k10, k40) = (count_params(&base), nofe(10), nofe(40));
    let ok = within_pct(b, 60.9e6, 2.0) && within_pct(k10, 40.4e6, 2.0) && within_pct(k40, 151.4e6, 2.0);
    within(
        verdict(ok, format!("base {b}, K=10 {k10}, K=40 {k40} (targets 60.9M, 40.4M, 151.4M within 2%)")),
        start.elapsed(),
        Duration::from_secs(1),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let reports = run_layer_suite(50, 1e-3).expect("fragments build");
    let worst = reports
        .iter()
        .map(|r| r.report.max_rel_error)
        .fold(0.0f64, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.report.passed()).map(|r| r.kind.name()).collect();
    let kinds: Vec<&str> = reports.iter().map(|r| r.kind.name()).collect();
    within(
        verdict(
            failed.is_empty() && reports.len() == 7,
            format!("{} over 50 seeds each, worst relative error {worst:.2e}; failed: {failed:?}", kinds.join(", ")),
        ),
        start.elapsed(),
        Duration::from_secs(60),
    )
}

fn summarize(problems: &[String]) -> String {
    match problems.first() {
        None => ", no violations".into(),
        Some(first) => format!(", {} violations, first: {first}", problems.len()),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, c: usize, k: usize) -> ConfusionMatrix {
    let rows: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|v| v / sum).collect()
        })
        .collect();
    ConfusionMatrix::from_rows(&rows).unwrap()
}

fn indicator(assign: &[usize], k: usize) -> IndicatorMatrix {
    let rows: Vec<Vec<u8>> = assign
        .iter()
        .map(|&j| (0..k).map(|c| u8::from(c == j)).collect())
        .collect();
    IndicatorMatrix::from_dense(&rows).unwrap()
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();
    let mut updates = 0;
    for instance in 0..200u64 {
        let c = rng.random_range(2..=8);
        let k = rng.random_range(2..=3);
        let lambda = [0.1, 1.0, 10.0][instance as usize % 3];
        let m = random_matrix(&mut rng, c, k);
        let init = LabelMapping::new((0..c).map(|_| rng.random_range(0..k)).collect(), k).unwrap();
        let r = elasso_assign(&m, lambda, &init, instance, DEFAULT_MAX_SWEEPS).unwrap();
        updates += r.trace.len().saturating_sub(1);
        if r.trace.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            problems.push(format!("instance {instance}: trace increases"));
        }
        if !r.converged {
            problems.push(format!("instance {instance}: no convergence"));
        }
        let assign: Vec<usize> = (0..c).map(|i| r.indicator.column_of(i)).collect();
        for i in 0..c {
            for j in 0..k {
                let mut moved = assign.clone();
                moved[i] = j;
                let v = elasso_objective(&indicator(&moved, k), &m, lambda).unwrap();
                if v < r.objective - 1e-12 {
                    problems.push(format!("instance {instance}: row {i} improves in column {j}"));
                }
            }
        }
        let (_, best) = brute_force_elasso(&m, lambda).unwrap();
        if r.objective < best - 1e-12 {
            problems.push(format!("instance {instance}: objective {} below optimum {best}", r.objective));
        }
    }
    within(
        verdict(
            problems.is_empty(),
            format!("200 instances, {updates} row updates checked{}", summarize(&problems)),
        ),
        start.elapsed(),
        Duration::from_secs(30),
    )
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let shapes = [(4, 2), (6, 2), (6, 3), (8, 2), (8, 4), (9, 3), (10, 5), (12, 3), (12, 4), (16, 4)];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut problems = Vec::new();
    for instance in 0..1000u64 {
        let (c, k) = shapes[instance as usize % shapes.len()];
        let m = random_matrix(&mut rng, c, k);
        let fb = fully_balanced_assign(&m, instance).unwrap();
        if fb.sizes().iter().any(|&s| s != c / k) {
            problems.push(format!("fully-balanced sizes {:?} on instance {instance}", fb.sizes()));
        }
        let init = LabelMapping::new((0..c).map(|_| rng.random_range(0..k)).collect(), k).unwrap();
        let heavy = elasso_assign(&m, 1e6, &init, instance, DEFAULT_MAX_SWEEPS).unwrap().mapping();
        if heavy.sizes().iter().any(|&s| s != c / k) {
            problems.push(format!("elasso at 1e6 sizes {:?} on instance {instance}", heavy.sizes()));
        }
        // one dominant column: every class prefers specialty `dom`
        let dom = rng.random_range(0..k);
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let mut row: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 0.1).collect();
                row[dom] = 1.0;
                row
            })
            .collect();
        let dominated = ConfusionMatrix::from_rows(&rows).unwrap();
        let zero = elasso_assign(&dominated, 0.0, &init, instance, DEFAULT_MAX_SWEEPS).unwrap().mapping();
        let mut hist = zero.sizes();
        hist.sort_unstable_by(|a, b| b.cmp(a));
        if hist[0] != c || hist[1..].iter().any(|&s| s != 0) {
            problems.push(format!("elasso at 0 histogram {hist:?} on instance {instance}"));
        }
    }
    within(
        verdict(
            problems.is_empty(),
            format!("1000 instances{}", summarize(&problems)),
        ),
        start.elapsed(),
        Duration::from_secs(30),
    )
}

fn desk_data(cfg: &ExperimentConfig, seed: u64) -> (Dataset, Dataset) {
    let DataSource::Synthetic { params, .. } = &cfg.data else {
        panic!("desk config is synthetic")
    };
    synth_hierarchy(&SynthParams {
        seed,
        ..params.clone()
    })
    .unwrap()
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let cfg = desk_config();
    let (base, _) = shipped_pair("desk-synthetic");
    let mut recovered = 0;
    let mut min_acc = f64::INFINITY;
    for seed in 0..10 {
        let (train, test) = desk_data(&cfg, seed);
        let planted = train.planted_mapping.clone().expect("planted");
        let g = train_generalist(&train, &base, &cfg.generalist_config(), seed, &mut |_| {}).unwrap();
        recovered += usize::from(g.mapping.same_partition(&planted));
        let pre = g.net.preprocessor(g.net.spec.policy()).unwrap();
        min_acc = min_acc.min(specialty_accuracy(&g.net.network, &pre, &test, &g.mapping).unwrap());
    }
    within(
        verdict(
            recovered >= 8 && min_acc > 0.9,
            format!("planted partition recovered in {recovered}/10 seeds; lowest held-out specialty accuracy {min_acc:.4}"),
        ),
        start.elapsed(),
        Duration::from_secs(300),
    )
}

fn trunk_is_bit_exact(gen: &GeneralistResult, tree: &NofENetwork) -> bool {
    let bits = |t: Option<&Tensor<f32>>| t.map(|t| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    tree.trunk.layers().iter().zip(gen.net.network.layers()).all(|(a, b)| {
        bits(a.weights.as_ref()) == bits(b.weights.as_ref()) && bits(a.bias.as_ref()) == bits(b.bias.as_ref())
    })
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let cfg = desk_config();
    let (base, branch) = shipped_pair("desk-synthetic");
    let seed = cfg.seed;
    let (train, test) = desk_data(&cfg, seed);
    let det = cfg.deterministic;
    let gen = train_generalist(&train, &base, &cfg.generalist_config(), seed, &mut |_| {}).unwrap();
    let mut tree = build_nofe(&gen, &branch, seed).unwrap();
    let exact = trunk_is_bit_exact(&gen, &tree);
    let policy = tree.spec.policy().clone();
    finetune_nofe(&mut tree, &train, &policy, seed, det, &mut |_| {}).unwrap();
    let pre = tree.preprocessor(&policy).unwrap();
    let nofe_top1 = evaluate_top1(&tree, &pre, &test, CropMode::Center).unwrap();

    // the baseline gets the generalist's epochs followed by the fine-tuning epochs
    let mut flat_policy = base.policy().clone();
    flat_policy.schedule.extend(policy.schedule.iter().copied());
    let epochs = flat_policy.total_epochs();
    let flat_spec = base.clone().with_policy(flat_policy);
    let flat = train_flat(&train, &flat_spec, seed, det, &mut |_| {}).unwrap();
    let fpre = flat.preprocessor(flat_spec.policy()).unwrap();
    let flat_top1 = evaluate_top1(&flat.network, &fpre, &test, CropMode::Center).unwrap();
    within(
        verdict(
            exact && nofe_top1 >= 0.90 && nofe_top1 >= flat_top1 - 0.01,
            format!("NofE top-1 {nofe_top1:.4}, flat top-1 {flat_top1:.4} ({epochs} epochs each), trunk copy bit-exact: {exact}"),
        ),
        start.elapsed(),
        Duration::from_secs(600),
    )
}

fn criterion_7() -> Verdict {
    let (base, branch) = shipped_pair("desk-synthetic");
    let gen_spec = generalist_spec(&base, 4).unwrap();
    let shape = [1, 12, 12];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_sum = 0.0f64;
    let mut bijective = true;
    let mut exact = true;
    for setting in 0..100u64 {
        // arbitrary mappings, including ones that leave specialties empty
        let k = rng.random_range(2..=4);
        let mapping = LabelMapping::new((0..16).map(|_| rng.random_range(0..k)).collect(), k).unwrap();
        let slots = class_slots(&mapping.compact());
        let mut seen = std::collections::HashSet::new();
        let sizes = mapping.compact().sizes();
        bijective &= slots.iter().all(|&(b, s)| b < sizes.len() && s < sizes[b] && seen.insert((b, s)));
        bijective &= seen.len() == 16;

        let net = TrainedNet::init(&gen_spec, vec![0.0; 144], shape, setting).unwrap();
        let gen = GeneralistResult {
            net,
            mapping,
            history: Vec::new(),
            snapshots: Vec::new(),
            step_losses: Vec::new(),
        };
        let tree = build_nofe(&gen, &branch, setting).unwrap();
        exact &= trunk_is_bit_exact(&gen, &tree);
        let batch: Vec<f32> = (0..4 * 144).map(|_| rng.random_range(-2.0..2.0)).collect();
        let probs = nofe_forward(&tree, &Tensor::new(vec![4, 1, 12, 12], batch).unwrap()).unwrap();
        for s in 0..4 {
            let sum: f64 = probs.sample(s).iter().map(|&p| f64::from(p)).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
        }
    }
    verdict(
        worst_sum <= 1e-6 && bijective && exact,
        format!("100 settings: max |sum - 1| {worst_sum:.2e}, class_slots bijective: {bijective}, trunk bit-exact: {exact}"),
    )
}

fn run_cli(cmd: &str, extra: &[&str], conf: &Path, out: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_nofe"))
        .arg(cmd)
        .args(extra)
        .arg("--config")
        .arg(conf)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_default()).unwrap_or(serde_json::Value::Null)
}

fn criterion_8() -> Verdict {
    let Some(dir) = std::env::var_os("NOFE_CIFAR100_DIR") else {
        return Verdict::Skip("NOFE_CIFAR100_DIR not set".into());
    };
    let start = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let configs = crate_dir().join("configs");
    // the shipped config with its relative paths pinned
    let text = std::fs::read_to_string(configs.join("cifar20-quick.conf"))
        .unwrap()
        .lines()
        .map(|l| match l.split_once('=').map(|(k, _)| k.trim()) {
            Some("data.path") => format!("data.path = {}", PathBuf::from(&dir).display()),
            Some("netspec.base") => format!("netspec.base = {}", configs.join("alexnet-quick-c20.netspec").display()),
            _ => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n");
    let conf = work.path().join("cifar20.conf");
    std::fs::write(&conf, text).unwrap();
    let out = work.path().join("out");
    for cmd in ["train-generalist", "build-nofe", "finetune", "eval"] {
        if let Err(e) = run_cli(cmd, &[], &conf, &out) {
            return Verdict::Fail(e);
        }
    }
    let spec_acc = read_json(&out.join("generalist.json"))["test_specialty_accuracy"].as_f64().unwrap_or(f64::NAN);
    let top1 = read_json(&out.join("eval.json"))["top1"].as_f64().unwrap_or(f64::NAN);
    within(
        verdict(
            spec_acc >= 0.625 && top1 >= 0.25,
            format!("generalist specialty accuracy {spec_acc:.4} (need 0.625), NofE top-1 {top1:.4} (need 0.25)"),
        ),
        start.elapsed(),
        Duration::from_secs(30 * 60),
    )
}

fn criterion_9() -> Verdict {
    let work = tempfile::tempdir().unwrap();
    let conf = crate_dir().join("configs/desk-synthetic.conf");
    let run = |out: &Path| -> Result<(), String> {
        for cmd in ["train-generalist", "build-nofe", "finetune", "eval"] {
            run_cli(cmd, &["--deterministic", "--seed", "11"], &conf, out)?;
        }
        Ok(())
    };
    let (a, b) = (work.path().join("a"), work.path().join("b"));
    if let Err(e) = run(&a).and_then(|_| run(&b)) {
        return Verdict::Fail(e);
    }
    let files = ["mapping.csv", "specialty-sizes.csv", "generalist-history.csv", "metrics.jsonl"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .collect();
    let lines = std::fs::read_to_string(a.join("metrics.jsonl")).map_or(0, |s| s.lines().count());
    verdict(
        differing.is_empty() && lines > 0,
        format!("two runs, {lines} metric lines; differing files: {differing:?}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(u32, fn() -> Verdict); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut failed = Vec::new();
    for (n, check) in criteria {
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let (tag, detail) = match &v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => ("FAIL", d),
            Verdict::Skip(d) => ("SKIP", d),
        };
        // straight to stdout, so the lines show without --nocapture
        let line = format!("criterion {n}: {tag}  {detail}  [{:.1}s]\n", took.as_secs_f64());
        let _ = std::io::stdout().lock().write_all(line.as_bytes());
        if matches!(v, Verdict::Fail(_)) {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
