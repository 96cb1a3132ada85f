use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{DataSource, ExperimentConfig, SpecSource};
use super::manifest::ManifestWriter;
use super::{Cli, CliError, Command};
use crate::dataio::{
    load_cifar100, load_dataset, restrict_classes, save_checkpoint, save_dataset, synth_hierarchy, Dataset,
    SynthParams, Split,
};
use crate::netspec::{count_params, make_generalist, make_nofe, parse_netspec, shipped, BranchSpec, NetSpec};
use crate::pipeline::{
    build_nofe, evaluate_top1, extract_features, finetune_nofe, generalist_spec, load_nofe, load_trained_net,
    nn_retrieve, specialty_accuracy, train_flat, train_generalist, GeneralistResult, MetricRecord, Method,
    NofENetwork, PipelineError,
};
use crate::specialty::{
    elasso_assign, fully_balanced_assign, greedy_assign, random_balanced, read_confusion_csv, read_mapping_csv,
    size_histogram_csv, spectral_assign, ConfusionMatrix, LabelMapping, SpecialtyError, DEFAULT_LAMBDA,
    DEFAULT_MAX_SWEEPS,
};
use crate::tensor::gradcheck::run_layer_suite;

const FEATURE_BATCH: usize = 256;

pub(super) fn dispatch(cli: &Cli, w: &mut ManifestWriter) -> Result<(), CliError> {
    match &cli.command {
        Command::Partition { matrix } => partition(cli, w, matrix),
        Command::CountParams { netspec, branch } => count_params_cmd(cli, w, netspec, branch.as_deref()),
        Command::Gradcheck { seeds, tolerance } => gradcheck(cli, w, *seeds, *tolerance),
        command => {
            let cfg = load_config(cli, w)?;
            let mut ctx = Ctx { out: &cli.out, w, cfg: &cfg };
            match command {
                Command::Synth => synth(&mut ctx),
                Command::TrainGeneralist => train_generalist_cmd(&mut ctx),
                Command::TrainFlat => train_flat_cmd(&mut ctx),
                Command::BuildNofe => build_nofe_cmd(&mut ctx),
                Command::Finetune => finetune(&mut ctx),
                Command::Eval => eval(&mut ctx),
                Command::Retrieve => retrieve(&mut ctx),
                Command::Partition { .. } | Command::CountParams { .. } | Command::Gradcheck { .. } => {
                    unreachable!("handled above")
                }
            }
        }
    }
}

fn parse_method(cli: &Cli) -> Result<Option<Method>, CliError> {
    cli.method
        .as_deref()
        .map(|m| m.parse().map_err(|e| CliError::Usage(format!("--method: {e}"))))
        .transpose()
}

fn load_config(cli: &Cli, w: &mut ManifestWriter) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{} requires --config", cli.command.name())))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Ok(bytes) = std::fs::read(path) {
        w.record_input(path, &bytes);
    }
    cfg.override_with(cli.seed, cli.deterministic, cli.k, cli.lambda, parse_method(cli)?)?;
    w.manifest.config = cfg.snapshot();
    w.manifest.seed = Some(cfg.seed);
    w.manifest.deterministic = cfg.deterministic;
    w.flush()?;
    Ok(cfg)
}

/// Appends metric records to a JSONL file, holding on to the first write error.
struct MetricsLog {
    path: PathBuf,
    writer: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl MetricsLog {
    fn open(path: PathBuf) -> Result<Self, CliError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        Ok(Self {
            path,
            writer: BufWriter::new(file),
            error: None,
        })
    }

    fn write(&mut self, record: &MetricRecord) {
        if self.error.is_none() {
            let line = serde_json::to_string(record).expect("metric records serialize");
            // flushed per record so long runs can be followed
            if let Err(e) = writeln!(self.writer, "{line}").and_then(|_| self.writer.flush()) {
                self.error = Some(e);
            }
        }
    }

    fn close(mut self) -> Result<(), CliError> {
        let flushed = self.writer.flush();
        match self.error.take().map_or(flushed, Err) {
            Ok(()) => Ok(()),
            Err(e) => Err(CliError::io(&self.path, e)),
        }
    }
}

struct Ctx<'a> {
    out: &'a Path,
    w: &'a mut ManifestWriter,
    cfg: &'a ExperimentConfig,
}

impl Ctx<'_> {
    fn out_path(&self, p: &Path) -> PathBuf {
        self.out.join(p)
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.w.record_input(path, &bytes);
        Ok(bytes)
    }

    fn write_output(&mut self, path: &Path, contents: &[u8]) -> Result<(), CliError> {
        std::fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
        self.w.record_output(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(value).expect("summaries serialize") + "\n";
        self.write_output(&self.out.join(name), json.as_bytes())
    }

    fn metrics(&mut self) -> Result<MetricsLog, CliError> {
        let path = self.out_path(&self.cfg.metrics);
        self.w.record_output(&path);
        MetricsLog::open(path)
    }

    /// Saves the last finite parameters of a diverged run before passing the error on.
    fn guard<T>(&mut self, result: Result<T, PipelineError>) -> Result<T, CliError> {
        if let Err(PipelineError::NonFinite {
            stage,
            last_finite: Some(records),
            ..
        }) = &result
        {
            let path = self.out.join(format!("{stage}-last-finite.ckpt"));
            match save_checkpoint(&path, records) {
                Ok(()) => {
                    log::error!("training diverged; last finite state saved to {}", path.display());
                    self.w.record_output(&path);
                }
                Err(e) => log::error!("could not save last finite state: {e}"),
            }
        }
        Ok(result?)
    }

    fn spec_text(&mut self, source: &SpecSource, role: &str) -> Result<String, CliError> {
        let text = match source {
            SpecSource::Shipped(name) => shipped(name)
                .map(|(base, branch)| if role == "branch" { branch } else { base }.to_string())
                .ok_or_else(|| CliError::Usage(format!("no shipped netspec named '{name}'")))?,
            SpecSource::File(path) => {
                let bytes = self.read_input(path)?;
                String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{}: not UTF-8", path.display())))?
            }
        };
        self.w
            .manifest
            .netspec_hashes
            .insert(role.to_string(), super::content_hash(text.as_bytes()));
        Ok(text)
    }

    fn base_spec(&mut self) -> Result<NetSpec, CliError> {
        let source = self.cfg.base.clone();
        let text = self.spec_text(&source, "base")?;
        parse_netspec(&text)
            .and_then(|p| p.into_net())
            .map_err(|e| CliError::NetSpec {
                path: source.to_string(),
                source: e,
            })
    }

    fn branch_spec(&mut self) -> Result<BranchSpec, CliError> {
        let source = match (&self.cfg.branch, &self.cfg.base) {
            (Some(b), _) => b.clone(),
            (None, SpecSource::Shipped(name)) => SpecSource::Shipped(name.clone()),
            (None, SpecSource::File(_)) => {
                return Err(super::ConfigError::Missing {
                    key: "netspec.branch".into(),
                    reason: "when netspec.base is a file".into(),
                }
                .into())
            }
        };
        let text = self.spec_text(&source, "branch")?;
        parse_netspec(&text)
            .and_then(|p| p.into_branch())
            .map_err(|e| CliError::NetSpec {
                path: source.to_string(),
                source: e,
            })
    }

    fn data(&mut self) -> Result<(Dataset, Dataset), CliError> {
        let (train, test) = match &self.cfg.data {
            DataSource::Synthetic { params, seed } => {
                let p = SynthParams {
                    seed: seed.unwrap_or(self.cfg.seed),
                    ..params.clone()
                };
                synth_hierarchy(&p).map_err(PipelineError::from)?
            }
            DataSource::Cifar100 { dir, classes } => {
                let train_path = dir.join("train.bin");
                let test_path = dir.join("test.bin");
                self.read_input(&train_path)?;
                self.read_input(&test_path)?;
                let train = load_cifar100(&train_path, Split::Train).map_err(PipelineError::from)?;
                let test = load_cifar100(&test_path, Split::Test).map_err(PipelineError::from)?;
                match classes {
                    Some(c) => (restrict_classes(&train, *c), restrict_classes(&test, *c)),
                    None => (train, test),
                }
            }
            DataSource::Files { train, test } => {
                self.read_input(train)?;
                self.read_input(test)?;
                (
                    load_dataset(train).map_err(PipelineError::from)?,
                    load_dataset(test).map_err(PipelineError::from)?,
                )
            }
        };
        log::info!(
            "data: {} train / {} test images of {:?}, {} classes",
            train.len(),
            test.len(),
            train.image_shape,
            train.classes
        );
        Ok((train, test))
    }

    fn mapping(&mut self) -> Result<LabelMapping, CliError> {
        let path = self.out_path(&self.cfg.mapping);
        let bytes = self.read_input(&path)?;
        let text = String::from_utf8_lossy(&bytes);
        read_mapping_csv(&text).map_err(|e| CliError::Input {
            path: path.display().to_string(),
            source: e,
        })
    }

    fn load_tree(&mut self, checkpoint: &Path, image_shape: [usize; 3]) -> Result<NofENetwork, CliError> {
        let base = self.base_spec()?;
        let branch = self.branch_spec()?;
        let path = self.out_path(checkpoint);
        self.read_input(&path)?;
        let gen = generalist_spec(&base, self.cfg.k)?;
        Ok(load_nofe(&path, &gen, &branch, image_shape)?)
    }
}

fn read_matrix(w: &mut ManifestWriter, path: &Path) -> Result<ConfusionMatrix, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    w.record_input(path, &bytes);
    let input_err = |source| CliError::Input {
        path: path.display().to_string(),
        source,
    };
    let text = String::from_utf8(bytes).map_err(|_| {
        input_err(SpecialtyError::Csv {
            line: 1,
            reason: "not UTF-8".into(),
        })
    })?;
    read_confusion_csv(&text).map_err(input_err)
}

fn write_file(w: &mut ManifestWriter, path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
    w.record_output(path);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PartitionMethod {
    Greedy,
    FullyBalanced,
    Elasso,
    Spectral,
    Random,
}

impl std::str::FromStr for PartitionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "fully-balanced" => Ok(Self::FullyBalanced),
            "elasso" => Ok(Self::Elasso),
            "spectral" => Ok(Self::Spectral),
            "random" => Ok(Self::Random),
            other => Err(format!(
                "unknown partition method '{other}' (greedy, fully-balanced, elasso, spectral, random)"
            )),
        }
    }
}

fn specialty(e: SpecialtyError) -> CliError {
    PipelineError::from(e).into()
}

fn partition(cli: &Cli, w: &mut ManifestWriter, matrix: &Path) -> Result<(), CliError> {
    let method: PartitionMethod = cli
        .method
        .as_deref()
        .unwrap_or("fully-balanced")
        .parse()
        .map_err(|e| CliError::Usage(format!("--method: {e}")))?;
    let seed = cli.seed.unwrap_or(0);
    let lambda = cli.lambda.unwrap_or(DEFAULT_LAMBDA);
    let m = read_matrix(w, matrix)?;
    let k = match method {
        PartitionMethod::Spectral | PartitionMethod::Random => cli
            .k
            .ok_or_else(|| CliError::Usage("--k is required for spectral and random partitions".into()))?,
        _ => match cli.k {
            Some(k) if k != m.cols() && !(m.rows() == m.cols() && k < m.cols()) => {
                return Err(CliError::Usage(format!(
                    "--k {k} does not match the matrix's {} specialty columns",
                    m.cols()
                )))
            }
            Some(k) => k,
            None => m.cols(),
        },
    };
    let m = if !matches!(method, PartitionMethod::Spectral | PartitionMethod::Random) && k < m.cols() {
        fold_columns(&m, k).map_err(specialty)?
    } else {
        m
    };
    let config = &mut w.manifest.config;
    config.insert("matrix".into(), matrix.display().to_string());
    config.insert("method".into(), cli.method.clone().unwrap_or("fully-balanced".into()));
    config.insert("k".into(), k.to_string());
    config.insert("lambda".into(), lambda.to_string());
    w.manifest.seed = Some(seed);
    w.flush()?;

    let mapping = match method {
        PartitionMethod::Greedy => greedy_assign(&m),
        PartitionMethod::FullyBalanced => fully_balanced_assign(&m, seed).map_err(specialty)?,
        PartitionMethod::Spectral => spectral_assign(&m, k, seed).map_err(specialty)?,
        PartitionMethod::Random => random_balanced(m.rows(), k, seed).map_err(specialty)?,
        PartitionMethod::Elasso => {
            let result = elasso_assign(&m, lambda, &greedy_assign(&m), seed, DEFAULT_MAX_SWEEPS).map_err(specialty)?;
            let mut trace = String::from("update,objective\n");
            for (i, v) in result.trace.iter().enumerate() {
                trace.push_str(&format!("{i},{v}\n"));
            }
            write_file(w, &cli.out.join("elasso-trace.csv"), &trace)?;
            if !result.converged {
                log::warn!("elasso stopped after {} sweeps without converging", result.sweeps);
            }
            result.mapping()
        }
    };
    let histogram = size_histogram_csv(&mapping);
    write_file(w, &cli.out.join("mapping.csv"), &mapping.to_csv())?;
    write_file(w, &cli.out.join("specialty-sizes.csv"), &histogram)?;
    print!("{histogram}");
    Ok(())
}

/// Sums the columns of a C x C class confusion into `k` contiguous blocks of
/// classes, giving a C x K specialty confusion.
fn fold_columns(m: &ConfusionMatrix, k: usize) -> Result<ConfusionMatrix, SpecialtyError> {
    let c = m.cols();
    let rows: Vec<Vec<f64>> = (0..m.rows())
        .map(|i| {
            let mut row = vec![0.0; k];
            for (col, v) in m.row(i).iter().enumerate() {
                row[col * k / c] += v;
            }
            row
        })
        .collect();
    ConfusionMatrix::from_rows(&rows)
}

/// `c` classes split into `k` sizes differing by at most one, largest first.
fn balanced_sizes(c: usize, k: usize) -> Vec<usize> {
    (0..k).map(|j| c / k + usize::from(j < c % k)).collect()
}

fn count_params_cmd(cli: &Cli, w: &mut ManifestWriter, netspec: &str, branch: Option<&str>) -> Result<(), CliError> {
    let cwd = Path::new(".");
    let base_source = SpecSource::parse(netspec, cwd);
    let load = |w: &mut ManifestWriter, source: &SpecSource, role: &str| -> Result<String, CliError> {
        let text = match source {
            SpecSource::Shipped(name) => shipped(name)
                .map(|(b, br)| if role == "branch" { br } else { b }.to_string())
                .ok_or_else(|| CliError::Usage(format!("no shipped netspec named '{name}'")))?,
            SpecSource::File(p) => {
                let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
                w.record_input(p, &bytes);
                String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{}: not UTF-8", p.display())))?
            }
        };
        w.manifest
            .netspec_hashes
            .insert(role.to_string(), super::content_hash(text.as_bytes()));
        Ok(text)
    };
    let spec_err = |source: &SpecSource| {
        let path = source.to_string();
        move |e| CliError::NetSpec { path, source: e }
    };
    let text = load(w, &base_source, "base")?;
    let base = parse_netspec(&text)
        .and_then(|p| p.into_net())
        .map_err(spec_err(&base_source))?;
    w.manifest.config.insert("netspec".into(), base_source.to_string());
    let mut rows = vec![(base.name().to_string(), count_params(&base))];
    if let Some(k) = cli.k {
        let branch_source = match (branch, &base_source) {
            (Some(b), _) => SpecSource::parse(b, cwd),
            (None, SpecSource::Shipped(name)) => SpecSource::Shipped(name.clone()),
            (None, SpecSource::File(_)) => {
                return Err(CliError::Usage("--branch is required with --k for a netspec file".into()))
            }
        };
        let text = load(w, &branch_source, "branch")?;
        let branch = parse_netspec(&text)
            .and_then(|p| p.into_branch())
            .map_err(spec_err(&branch_source))?;
        w.manifest.config.insert("branch".into(), branch_source.to_string());
        w.manifest.config.insert("k".into(), k.to_string());
        let generalist = make_generalist(&base, k).map_err(spec_err(&base_source))?;
        let sizes = balanced_sizes(base.output_width(), k);
        let tree = make_nofe(&generalist, &branch, &sizes).map_err(spec_err(&branch_source))?;
        rows.push((generalist.name().to_string(), count_params(&generalist)));
        rows.push((format!("{} (K={k})", tree.name()), count_params(&tree)));
    }
    let mut table = String::from("network,params\n");
    for (name, n) in &rows {
        table.push_str(&format!("{name},{n}\n"));
        println!("{name:<32} {n:>12}  ({:.2}M)", *n as f64 / 1e6);
    }
    write_file(w, &cli.out.join("params.csv"), &table)
}

fn gradcheck(cli: &Cli, w: &mut ManifestWriter, seeds: u64, tolerance: f64) -> Result<(), CliError> {
    w.manifest.config.insert("seeds".into(), seeds.to_string());
    w.manifest.config.insert("tolerance".into(), tolerance.to_string());
    w.flush()?;
    let reports = run_layer_suite(seeds, tolerance).map_err(PipelineError::from)?;
    let mut csv = String::from("kind,seeds,checked,excluded_kinks,max_rel_error,passed\n");
    let mut failed = Vec::new();
    for r in &reports {
        let g = &r.report;
        csv.push_str(&format!(
            "{},{},{},{},{:e},{}\n",
            r.kind.name(),
            r.seeds,
            g.checked,
            g.excluded_kinks,
            g.max_rel_error,
            g.passed()
        ));
        println!(
            "{:<24} {:>8} coords  max rel err {:.2e}  {}",
            r.kind.name(),
            g.checked,
            g.max_rel_error,
            if g.passed() { "ok" } else { "FAILED" }
        );
        if !g.passed() {
            failed.push(format!(
                "{} ({:.2e} at {})",
                r.kind.name(),
                g.max_rel_error,
                g.worst_coordinate.as_deref().unwrap_or("?")
            ));
        }
    }
    write_file(w, &cli.out.join("gradcheck.csv"), &csv)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

fn synth(ctx: &mut Ctx) -> Result<(), CliError> {
    let (train, test) = ctx.data()?;
    for (ds, name) in [(&train, "train.nofd"), (&test, "test.nofd")] {
        let path = ctx.out.join(name);
        save_dataset(&path, ds).map_err(PipelineError::from)?;
        ctx.w.record_output(&path);
    }
    Ok(())
}

#[derive(Serialize)]
struct GeneralistSummary {
    k: usize,
    method: String,
    specialty_sizes: Vec<usize>,
    mapping_hash: String,
    test_specialty_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted_recovered: Option<bool>,
}

fn train_generalist_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    let (train, test) = ctx.data()?;
    let base = ctx.base_spec()?;
    let mut gcfg = ctx.cfg.generalist_config();
    if let Some(path) = &ctx.cfg.confusion {
        gcfg.class_confusion = Some(read_matrix(ctx.w, path)?);
    }
    let mut log = ctx.metrics()?;
    let result = train_generalist(&train, &base, &gcfg, ctx.cfg.seed, &mut |r| log.write(r));
    let g = ctx.guard(result);
    let g = match g {
        Ok(g) => g,
        Err(e) => {
            log.close()?;
            return Err(e);
        }
    };
    let pre = g.net.preprocessor(g.net.spec.policy())?;
    let accuracy = specialty_accuracy(&g.net.network, &pre, &test, &g.mapping)?;
    let last = g.history.last();
    log.write(&MetricRecord {
        stage: "generalist-test".into(),
        epoch: last.map_or(0, |h| h.epoch),
        step: g.step_losses.len(),
        loss: last.map_or(f64::NAN, |h| h.loss),
        specialty_accuracy: Some(accuracy),
        top1: None,
        mapping_hash: g.mapping.hash_hex(),
    });
    log.close()?;

    let ckpt = ctx.out_path(&ctx.cfg.generalist_checkpoint);
    g.net.save(&ckpt)?;
    ctx.w.record_output(&ckpt);
    let mapping_path = ctx.out_path(&ctx.cfg.mapping);
    ctx.write_output(&mapping_path, g.mapping.to_csv().as_bytes())?;
    ctx.write_output(&ctx.out.join("specialty-sizes.csv"), size_histogram_csv(&g.mapping).as_bytes())?;
    let mut history = String::from("epoch,step,loss,specialty_accuracy,mapping_hash\n");
    for h in &g.history {
        history.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.step, h.loss, h.specialty_accuracy, h.mapping_hash
        ));
    }
    ctx.write_output(&ctx.out.join("generalist-history.csv"), history.as_bytes())?;
    let planted_recovered = train.planted_mapping.as_ref().map(|p| p.same_partition(&g.mapping));
    println!("held-out specialty accuracy {accuracy:.4}");
    if let Some(r) = planted_recovered {
        println!("planted partition recovered: {r}");
    }
    ctx.write_json(
        "generalist.json",
        &GeneralistSummary {
            k: g.mapping.specialties(),
            method: ctx.cfg.method.to_string(),
            specialty_sizes: g.mapping.sizes(),
            mapping_hash: g.mapping.hash_hex(),
            test_specialty_accuracy: accuracy,
            planted_recovered,
        },
    )
}

fn train_flat_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    let (train, test) = ctx.data()?;
    let base = ctx.base_spec()?;
    let mut log = ctx.metrics()?;
    let result = train_flat(&train, &base, ctx.cfg.seed, ctx.cfg.deterministic, &mut |r| log.write(r));
    let net = match ctx.guard(result) {
        Ok(n) => n,
        Err(e) => {
            log.close()?;
            return Err(e);
        }
    };
    let pre = net.preprocessor(base.policy())?;
    let top1 = evaluate_top1(&net.network, &pre, &test, ctx.cfg.crop)?;
    log.write(&MetricRecord {
        stage: "flat-test".into(),
        epoch: base.policy().total_epochs(),
        step: 0,
        loss: f64::NAN,
        specialty_accuracy: None,
        top1: Some(top1),
        mapping_hash: String::new(),
    });
    log.close()?;
    let ckpt = ctx.out_path(&ctx.cfg.flat_checkpoint);
    net.save(&ckpt)?;
    ctx.w.record_output(&ckpt);
    println!("flat top-1 {top1:.4}");
    ctx.write_json("flat.json", &serde_json::json!({ "top1": top1, "crop": ctx.cfg.crop.to_string() }))
}

fn build_nofe_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    let (train, _) = ctx.data()?;
    let base = ctx.base_spec()?;
    let branch = ctx.branch_spec()?;
    let mapping = ctx.mapping()?;
    let gen_spec = generalist_spec(&base, mapping.specialties())?;
    let ckpt = ctx.out_path(&ctx.cfg.generalist_checkpoint);
    ctx.read_input(&ckpt)?;
    let net = load_trained_net(&ckpt, &gen_spec, train.image_shape)?;
    let gen = GeneralistResult {
        net,
        mapping,
        history: Vec::new(),
        snapshots: Vec::new(),
        step_losses: Vec::new(),
    };
    let tree = build_nofe(&gen, &branch, ctx.cfg.seed)?;
    let out = ctx.out_path(&ctx.cfg.nofe_init_checkpoint);
    tree.save(&out)?;
    ctx.w.record_output(&out);
    println!(
        "tree {} with {} branches, {} parameters",
        tree.spec.name(),
        tree.branches.len(),
        count_params(&tree.spec)
    );
    Ok(())
}

fn finetune(ctx: &mut Ctx) -> Result<(), CliError> {
    let (train, _) = ctx.data()?;
    let init = ctx.cfg.nofe_init_checkpoint.clone();
    let mut tree = ctx.load_tree(&init, train.image_shape)?;
    let policy = tree.spec.policy().clone();
    let mut log = ctx.metrics()?;
    let result = finetune_nofe(&mut tree, &train, &policy, ctx.cfg.seed, ctx.cfg.deterministic, &mut |r| {
        log.write(r)
    });
    log.close()?;
    let result = ctx.guard(result)?;
    let ckpt = ctx.out_path(&ctx.cfg.nofe_checkpoint);
    tree.save(&ckpt)?;
    ctx.w.record_output(&ckpt);
    let mut losses = String::from("step,loss\n");
    for (i, l) in result.step_losses.iter().enumerate() {
        losses.push_str(&format!("{},{l}\n", i + 1));
    }
    ctx.write_output(&ctx.out.join("finetune-loss.csv"), losses.as_bytes())
}

#[derive(Serialize)]
struct EvalSummary {
    crop: String,
    test_images: usize,
    top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    flat_top1: Option<f64>,
}

fn eval(ctx: &mut Ctx) -> Result<(), CliError> {
    let (_, test) = ctx.data()?;
    let ckpt = ctx.cfg.nofe_checkpoint.clone();
    let tree = ctx.load_tree(&ckpt, test.image_shape)?;
    let pre = tree.preprocessor(tree.spec.policy())?;
    let top1 = evaluate_top1(&tree, &pre, &test, ctx.cfg.crop)?;
    let flat_path = ctx.out_path(&ctx.cfg.flat_checkpoint);
    let flat_top1 = if flat_path.exists() {
        let base = ctx.base_spec()?;
        ctx.read_input(&flat_path)?;
        let flat = load_trained_net(&flat_path, &base, test.image_shape)?;
        let fpre = flat.preprocessor(base.policy())?;
        Some(evaluate_top1(&flat.network, &fpre, &test, ctx.cfg.crop)?)
    } else {
        None
    };
    let mut log = ctx.metrics()?;
    log.write(&MetricRecord {
        stage: "eval".into(),
        epoch: tree.spec.policy().total_epochs(),
        step: 0,
        loss: f64::NAN,
        specialty_accuracy: None,
        top1: Some(top1),
        mapping_hash: tree.mapping.hash_hex(),
    });
    log.close()?;
    println!("top-1 {top1:.4}");
    if let Some(f) = flat_top1 {
        println!("flat top-1 {f:.4}");
    }
    ctx.write_json(
        "eval.json",
        &EvalSummary {
            crop: ctx.cfg.crop.to_string(),
            test_images: test.len(),
            top1,
            flat_top1,
        },
    )
}

fn features(tree: &NofENetwork, ctx: &Ctx, ds: &Dataset, count: usize) -> Result<Vec<Vec<f32>>, CliError> {
    let pre = tree.preprocessor(tree.spec.policy())?;
    let mut out = Vec::with_capacity(count);
    let indices: Vec<usize> = (0..count).collect();
    for chunk in indices.chunks(FEATURE_BATCH) {
        let batch = pre.eval_batch(ds, chunk);
        out.extend(extract_features(tree, ctx.cfg.retrieve_tag, &batch)?);
    }
    Ok(out)
}

fn retrieve(ctx: &mut Ctx) -> Result<(), CliError> {
    let (train, test) = ctx.data()?;
    let ckpt = ctx.cfg.nofe_checkpoint.clone();
    let tree = ctx.load_tree(&ckpt, train.image_shape)?;
    let queries = ctx.cfg.retrieve_queries.min(test.len());
    let query = features(&tree, ctx, &test, queries)?;
    let gallery = features(&tree, ctx, &train, train.len())?;
    let ranked = nn_retrieve(&query, &gallery, ctx.cfg.retrieve_k)?;
    let mut table = String::from("query,query_label,rank,gallery_index,gallery_label\n");
    let mut same = 0;
    for (q, hits) in ranked.iter().enumerate() {
        for (rank, &g) in hits.iter().enumerate() {
            table.push_str(&format!("{q},{},{rank},{g},{}\n", test.labels[q], train.labels[g]));
            same += usize::from(test.labels[q] == train.labels[g]);
        }
    }
    ctx.write_output(&ctx.out.join("retrieval.csv"), table.as_bytes())?;
    let total = ranked.len() * ctx.cfg.retrieve_k;
    if total > 0 {
        println!(
            "{} of {total} retrieved images share the query's class ({})",
            same,
            ctx.cfg.retrieve_tag
        );
    }
    Ok(())
}
