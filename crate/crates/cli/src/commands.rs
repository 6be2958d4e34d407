use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use log::info;

use ssoc_core::attention::read_model;
use ssoc_core::audit::{pseudo_label_snapshot, threshold_profile, PseudoLabelAudit};
use ssoc_core::classifier::{infer_with_confidence, write_predictions};
use ssoc_core::config::TrainConfig;
use ssoc_core::dataio::{
    generate_mixture, labeled_sidecar_path, read_dataset, read_embeddings, read_ground_truth, read_labels,
    split_open_world, write_dataset, write_embeddings, write_ground_truth, write_labels, EmbeddingDataset,
    GroundTruth, MixtureSpec, SplitSpec,
};
use ssoc_core::eval::{evaluate_with, EvalReport, NovelAlignment};
use ssoc_core::trainer::{self, read_checkpoint, write_checkpoint, EpochReport, TrainObserver, TrainState, METRICS_HEADER};
use ssoc_core::{gradcheck, Error};

use crate::{Alignment, DataArgs, EvalArgs, GenSynthArgs, GradCheckArgs, SplitArgs, SweepArgs, SweepKind, TrainArgs};

/// Gradient check exceeded its tolerance.
#[derive(Debug)]
struct GradCheckFailed;

impl std::fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("gradient check failed")
    }
}

impl std::error::Error for GradCheckFailed {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.is::<GradCheckFailed>() || matches!(c.downcast_ref::<Error>(), Some(Error::Numerical(_)))
    });
    if numerical {
        1
    } else {
        2
    }
}

pub fn threads() -> Result<usize> {
    match std::env::var("SSOC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("SSOC_THREADS must be a positive integer, got {v:?}"),
        },
    }
}

fn require_file(flag: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{flag}: no such file {}", path.display());
    }
    Ok(())
}

fn create_dir(flag: &str, path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("{flag}: cannot create {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn gen_synth(a: GenSynthArgs) -> Result<ExitCode> {
    let spec = MixtureSpec {
        class_count: a.classes,
        dim: a.dim,
        samples_per_class: a.per_class,
        center_separation: a.separation,
        within_class_std: a.std,
        seed: a.seed,
    };
    let m = generate_mixture(&spec)?;
    create_dir("--out", &a.out)?;
    let emb = a.out.join("points.emb");
    write_embeddings(&emb, &m.points, None)?;
    let labels: Vec<i64> = m.labels.iter().map(|&y| y as i64).collect();
    write_labels(&labeled_sidecar_path(&emb), &labels)?;
    println!("{}: {} rows, d={}, {} classes", emb.display(), m.points.rows(), a.dim, a.classes);
    Ok(ExitCode::SUCCESS)
}

pub fn split(a: SplitArgs) -> Result<ExitCode> {
    require_file("--input", &a.input)?;
    let sidecar = labeled_sidecar_path(&a.input);
    require_file("--input label sidecar", &sidecar)?;
    let (points, _) = read_embeddings(&a.input)?;
    let labels = read_labels(&sidecar)?
        .into_iter()
        .map(|y| usize::try_from(y).map_err(|_| anyhow!("{}: every row needs a label", sidecar.display())))
        .collect::<Result<Vec<_>>>()?;
    let spec = SplitSpec {
        shuffle_classes: a.shuffle_classes,
        ..SplitSpec::new(a.label_ratio, a.novel_ratio, a.seed)
    };
    let s = split_open_world(&points, &labels, &spec)?;
    create_dir("--out", &a.out)?;
    write_dataset(&s.dataset, &a.out.join("labeled.emb"), &a.out.join("unlabeled.emb"))?;
    write_ground_truth(&a.out.join("truth.lab"), &s.ground_truth)?;
    write_text(&a.out.join("split.cfg"), &format!("novel_classes = {}\n", s.dataset.novel_classes))?;
    println!(
        "{} labeled, {} unlabeled, {} known + {} novel classes",
        s.dataset.labeled.rows(),
        s.dataset.unlabeled.rows(),
        s.dataset.known_classes,
        s.dataset.novel_classes
    );
    Ok(ExitCode::SUCCESS)
}

fn load_config(d: &DataArgs) -> Result<TrainConfig> {
    let mut cfg = match &d.config {
        Some(p) => {
            require_file("--config", p)?;
            TrainConfig::from_file(p).with_context(|| format!("--config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    for o in &d.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set: expected KEY=VALUE, got {o:?}"))?;
        cfg.set(k, v).with_context(|| format!("--set {o}"))?;
    }
    if let Some(s) = d.seed {
        cfg.seed = s;
    }
    if let Some(e) = d.epochs {
        cfg.epochs = e;
    }
    if let Some(n) = d.novel_classes {
        cfg.novel_classes = Some(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(d: &DataArgs, cfg: &TrainConfig) -> Result<EmbeddingDataset> {
    require_file("--labeled", &d.labeled)?;
    require_file("--unlabeled", &d.unlabeled)?;
    let novel = cfg
        .novel_classes
        .ok_or_else(|| anyhow!("--novel-classes: the novel class count is required (flag or config key novel_classes)"))?;
    let ds = read_dataset(&d.labeled, &d.unlabeled)?.with_novel_classes(novel);
    ds.validate()?;
    Ok(ds)
}

/// Keeps `metrics.csv` and `model.ckpt` current after every epoch.
struct RunFiles {
    dir: PathBuf,
    rows: Vec<String>,
}

impl RunFiles {
    fn metrics(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{r}").unwrap();
        }
        s
    }
}

impl TrainObserver for RunFiles {
    fn on_epoch(&mut self, report: &EpochReport, state: &TrainState) -> ssoc_core::Result<()> {
        self.rows.push(report.csv_row());
        let metrics = self.dir.join("metrics.csv");
        fs::write(&metrics, self.metrics()).map_err(|e| Error::Io { path: metrics, source: e })?;
        write_checkpoint(&self.dir.join("model.ckpt"), state)
    }
}

/// Metrics rows of epochs before `epoch` from an earlier run in `dir`.
fn earlier_rows(dir: &Path, epoch: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(dir.join("metrics.csv")) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < epoch))
        .map(str::to_owned)
        .collect()
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.data)?;
    let ds = load_dataset(&a.data, &cfg)?;
    create_dir("--out", &a.out)?;
    write_text(&a.out.join("config.used"), &cfg.to_config_string())?;
    let mut files = RunFiles { dir: a.out.clone(), rows: Vec::new() };
    let outcome = match &a.resume {
        Some(p) => {
            require_file("--resume", p)?;
            let (_, state) = read_checkpoint(p).with_context(|| format!("--resume {}", p.display()))?;
            let state = state.ok_or_else(|| anyhow!("--resume: {} holds no optimizer state", p.display()))?;
            files.rows = earlier_rows(&a.out, state.epoch);
            trainer::resume(&ds, &cfg, state, &mut files)?
        }
        None => trainer::train(&ds, &cfg, &mut files)?,
    };
    if outcome.reports.is_empty() {
        write_text(&a.out.join("metrics.csv"), &files.metrics())?;
        write_checkpoint(&a.out.join("model.ckpt"), &outcome.state)?;
    }
    ssoc_core::attention::write_model(&a.out.join("final.mdl"), outcome.model())?;
    println!(
        "trained {} epochs{}; best epoch {}; checkpoint {}",
        outcome.state.epoch,
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.state.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        a.out.join("model.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn alignment(a: Alignment) -> NovelAlignment {
    match a {
        Alignment::Any => NovelAlignment::AnyPredicted,
        Alignment::NovelOnly => NovelAlignment::NovelPredictedOnly,
    }
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    require_file("--checkpoint", &a.checkpoint)?;
    require_file("--unlabeled", &a.unlabeled)?;
    require_file("--sidecar", &a.sidecar)?;
    let model = read_model(&a.checkpoint).with_context(|| format!("--checkpoint {}", a.checkpoint.display()))?;
    let (z, _) = read_embeddings(&a.unlabeled)?;
    if z.cols() != model.params.dim() {
        bail!("--unlabeled: embeddings have d={}, checkpoint d={}", z.cols(), model.params.dim());
    }
    let truth = read_ground_truth(&a.sidecar).with_context(|| format!("--sidecar {}", a.sidecar.display()))?;
    if truth.0.len() != z.rows() {
        bail!("--sidecar: {} labels for {} rows", truth.0.len(), z.rows());
    }
    let predictions = infer_with_confidence(&z, &model.centers.centers)?;
    let pred: Vec<usize> = predictions.iter().map(|p| p.0).collect();
    let report = evaluate_with(&pred, &truth.0, model.known_classes, alignment(a.novel_alignment))?;
    let csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
    print!("{csv}");
    if let Some(dir) = &a.out {
        create_dir("--out", dir)?;
        write_text(&dir.join("eval.csv"), &csv)?;
        write_predictions(&dir.join("predictions.csv"), &predictions)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(a: GradCheckArgs) -> Result<ExitCode> {
    if a.instances == 0 {
        bail!("--instances must be positive");
    }
    let report = gradcheck::run(a.instances, a.seed)?;
    for (seed, err) in &report.instances {
        println!("instance {seed}: max relative error {err:.3e}");
    }
    let max = report.max_error();
    println!("max relative error {max:.3e} over {} instances", report.instances.len());
    if !(max < a.tolerance) {
        return Err(GradCheckFailed).with_context(|| format!("{max:.3e} exceeds tolerance {:.1e}", a.tolerance));
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_list(flag: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| anyhow!("{flag}: cannot parse {t:?}")))
        .collect()
}

/// Cartesian product of a `name=v1,v2;name=...` weight grid.
fn weight_grid(base: &TrainConfig, grid: &str) -> Result<Vec<(String, TrainConfig)>> {
    let mut cells = vec![(String::new(), base.clone())];
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, values) = part.split_once('=').ok_or_else(|| anyhow!("--grid: expected name=values in {part:?}"))?;
        let name = name.trim();
        if !["alpha", "beta", "gamma", "delta"].contains(&name) {
            bail!("--grid: unknown weight {name:?}");
        }
        let values = parse_list("--grid", values)?;
        let mut next = Vec::new();
        for (label, cfg) in &cells {
            for v in &values {
                let mut c = cfg.clone();
                c.set(name, &v.to_string())?;
                let sep = if label.is_empty() { "" } else { "_" };
                next.push((format!("{label}{sep}{name}{v}"), c));
            }
        }
        cells = next;
    }
    Ok(cells)
}

pub fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let base = load_config(&a.data)?;
    let ds = load_dataset(&a.data, &base)?;
    require_file("--sidecar", &a.sidecar)?;
    let truth: GroundTruth =
        read_ground_truth(&a.sidecar).with_context(|| format!("--sidecar {}", a.sidecar.display()))?;
    if truth.0.len() != ds.unlabeled.rows() {
        bail!("--sidecar: {} labels for {} unlabeled rows", truth.0.len(), ds.unlabeled.rows());
    }
    let taus = parse_list("--taus", &a.taus)?;
    let cells: Vec<(String, TrainConfig)> = match a.kind {
        SweepKind::Tau1 => taus
            .iter()
            .map(|&t| {
                let mut c = base.clone();
                c.weights.tau1 = t;
                (format!("tau1_{t}"), c)
            })
            .collect(),
        SweepKind::Weights => weight_grid(&base, &a.grid)?,
    };
    create_dir("--out", &a.out)?;
    let mut summary = String::from("cell,tau1,alpha,beta,gamma,delta,");
    summary.push_str(EvalReport::CSV_HEADER);
    summary.push('\n');
    let mut profile_source = None;
    for (name, cfg) in &cells {
        info!("sweep cell {name}");
        cfg.validate()?;
        let mut audit = PseudoLabelAudit { truth: &truth, known_classes: ds.known_classes, inner: None };
        let out = trainer::train(&ds, cfg, &mut audit)?;
        write_text(&a.out.join(format!("{name}.csv")), &trainer::metrics_csv(&out.reports))?;
        let pred = ssoc_core::classifier::infer(&ds.unlabeled, &out.state.best.centers.centers)?;
        let report = evaluate_with(&pred, &truth.0, ds.known_classes, NovelAlignment::AnyPredicted)?;
        let w = &cfg.weights;
        writeln!(
            summary,
            "{name},{},{},{},{},{},{}",
            w.tau1,
            w.alpha,
            w.beta,
            w.gamma,
            w.delta,
            report.csv_row()
        )
        .unwrap();
        if profile_source.is_none() || cfg.weights.tau1 == base.weights.tau1 {
            profile_source = Some((cfg.clone(), out.state));
        }
    }
    write_text(&a.out.join("summary.csv"), &summary)?;
    if let (SweepKind::Tau1, Some((cfg, state))) = (a.kind, profile_source) {
        let last = state.epoch.saturating_sub(1);
        let labels = pseudo_label_snapshot(&state, &ds, &cfg, last)?;
        let mut profile = String::from("tau1,selected,novel_accuracy\n");
        for p in threshold_profile(&labels, &taus, &truth, ds.known_classes)? {
            let acc = p.novel_accuracy.map(|v| v.to_string()).unwrap_or_default();
            writeln!(profile, "{},{},{acc}", p.tau, p.selected).unwrap();
        }
        write_text(&a.out.join("profile.csv"), &profile)?;
    }
    println!("{} cells written to {}", cells.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
