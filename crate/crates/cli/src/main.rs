use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use patchground::eval::{decode_click, predictions_csv, size_stratified_report, DecodeMode};
use patchground::head::{attention_forward, load_checkpoint, save_checkpoint, HeadConfig};
use patchground::heatmap::render_ppm;
use patchground::ingest::{iou_filter, parse_annotations, write_jsonl, DEFAULT_IOU_THRESHOLD};
use patchground::labels::{label_map, GridFormat, LabelKind, ValueGrid, DEFAULT_EPSILON, DEFAULT_SIGMA_FACTOR};
use patchground::synth::{generate_corpus, read_corpus, write_corpus, SynthConfig};
use patchground::trainer::{eval_items, run_ablation_matrix, split_point, train, TrainConfig};
use patchground::{Error, PatchGrid};

mod output;

use output::StagedDir;

#[derive(Parser)]
#[command(name = "patchground", version, about = "Patch-attention grounding toolkit")]
struct Cli {
    /// Print a human-readable table instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build one patch label file per annotation record.
    GenLabels(GenLabelsArgs),
    /// Drop annotations whose parser boxes disagree with the ground truth.
    Filter(FilterArgs),
    /// Generate a synthetic grounding corpus.
    Synth(SynthArgs),
    /// Train the attention head on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Run the label/suppression ablation matrix.
    Ablate(AblateArgs),
    /// Render a label or attention grid as a PPM image.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory (defaults to $PATCHGROUND_OUT).
    #[arg(long, env = "PATCHGROUND_OUT")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gaussian,
    Uniform,
}

impl From<Kind> for LabelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Gaussian => LabelKind::Gaussian,
            Kind::Uniform => LabelKind::Uniform,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Bin,
    Csv,
}

impl From<Format> for GridFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Bin => GridFormat::Bin,
            Format::Csv => GridFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Argmax,
    Threshold,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Heldout,
    All,
}

#[derive(Args)]
struct GenLabelsArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 28)]
    patch_size: u32,
    #[arg(long, default_value_t = DEFAULT_SIGMA_FACTOR)]
    sigma_factor: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    kind: Kind,
    #[arg(long, value_enum, default_value = "bin")]
    format: Format,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    threshold: f64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    elements: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    image_size: Option<u32>,
    #[arg(long)]
    patch_size: Option<u32>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    sigma_factor: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    /// Disable the suppression term.
    #[arg(long)]
    no_suppression: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_split: Option<f64>,
}

impl TrainFlags {
    fn config(&self, head: HeadConfig) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            lambda1: self.lambda1.unwrap_or(d.lambda1),
            lambda2: self.lambda2.unwrap_or(d.lambda2),
            sigma_factor: self.sigma_factor.unwrap_or(d.sigma_factor),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            labels: self.kind.map(Into::into).unwrap_or(d.labels),
            suppression: !self.no_suppression,
            seed: self.seed.unwrap_or(d.seed),
            eval_split: self.eval_split.unwrap_or(d.eval_split),
            head,
            ..d
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "argmax")]
    mode: Mode,
    #[arg(long, default_value_t = patchground::eval::GAMMA_V2)]
    gamma: f64,
    #[arg(long, value_enum, default_value = "heldout")]
    split: Split,
    /// Also write each attention map under `attention/`.
    #[arg(long)]
    save_attention: bool,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Label or attention grid (`.bin` or `.csv`).
    #[arg(long)]
    label_file: PathBuf,
    /// Pixels per patch side.
    #[arg(long, default_value_t = 16)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

struct Summary {
    json: Value,
    table: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenLabels(a) => gen_labels(a),
        Command::Filter(a) => filter(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Heatmap(a) => heatmap(a),
    };
    match result {
        Ok(s) => {
            if cli.pretty {
                print!("{}", s.table);
            } else {
                println!("{}", s.json);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::InvalidArgument(_)) {
        1
    } else {
        2
    }
}

fn bad_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn gen_labels(a: &GenLabelsArgs) -> patchground::Result<Summary> {
    if a.sigma_factor.is_nan() || a.sigma_factor <= 0.0 {
        return Err(bad_arg("--sigma-factor must be positive"));
    }
    if a.epsilon.is_nan() || a.epsilon < 0.0 {
        return Err(bad_arg("--epsilon must be non-negative"));
    }
    if a.patch_size == 0 {
        return Err(bad_arg("--patch-size must be positive"));
    }
    let parsed = parse_annotations(&a.annotations)?;
    let format: GridFormat = a.format.into();
    let kind: LabelKind = a.kind.into();
    let stage = StagedDir::new(&a.out.out)?;
    std::fs::create_dir_all(stage.path().join("labels"))?;
    let mut entries = Vec::with_capacity(parsed.records.len());
    for (i, r) in parsed.records.iter().enumerate() {
        let grid = PatchGrid::new(r.image_width, r.image_height, a.patch_size)?;
        let map = label_map(kind, &grid, &r.bbox, a.sigma_factor, a.epsilon)?;
        let file = format!("labels/{i:06}.{}", format.extension());
        ValueGrid::from_map(&grid, &map.values).write(&stage.path().join(&file), format)?;
        entries.push(json!({
            "index": i,
            "image_id": r.image_id,
            "file": file,
            "rows": grid.rows(),
            "cols": grid.cols(),
            "sum": map.sum(),
            "peak": map.peak_index(),
        }));
    }
    let manifest = json!({
        "kind": kind,
        "patch_size": a.patch_size,
        "sigma_factor": a.sigma_factor,
        "epsilon": a.epsilon,
        "format": format,
        "records": entries,
        "issues": parsed.issues,
    });
    std::fs::write(stage.path().join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let out = stage.commit()?;
    let table = format!(
        "labels written: {}\nmalformed lines: {}\nout: {}\n",
        parsed.records.len(),
        parsed.issues.len(),
        out.display()
    );
    Ok(Summary {
        json: json!({"command": "gen-labels", "labels": parsed.records.len(),
                     "malformed_lines": parsed.issues.len(), "out": out}),
        table,
    })
}

fn filter(a: &FilterArgs) -> patchground::Result<Summary> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(bad_arg("--threshold must lie in [0, 1]"));
    }
    let parsed = parse_annotations(&a.annotations)?;
    let outcome = iou_filter(&parsed.records, a.threshold)?;
    let summary = outcome.summary(a.threshold, &parsed.issues);
    let stage = StagedDir::new(&a.out.out)?;
    write_jsonl(&stage.path().join("kept.jsonl"), &outcome.kept)?;
    write_jsonl(&stage.path().join("dropped.jsonl"), &outcome.dropped)?;
    std::fs::write(stage.path().join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    let out = stage.commit()?;
    let table = format!(
        "threshold {}\ntotal {}\nkept {}\ndropped (low IoU) {}\ndropped (no parser boxes) {}\nmalformed lines {}\n",
        summary.threshold,
        summary.total,
        summary.kept,
        summary.dropped_low_iou,
        summary.dropped_no_parser_boxes,
        summary.malformed_lines
    );
    let mut json = serde_json::to_value(&summary)?;
    json["command"] = "filter".into();
    json["out"] = json!(out);
    Ok(Summary { json, table })
}

fn synth(a: &SynthArgs) -> patchground::Result<Summary> {
    let d = SynthConfig::default();
    let config = SynthConfig {
        seed: a.seed,
        elements: a.elements.unwrap_or(d.elements),
        noise: a.noise.unwrap_or(d.noise),
        image_width: a.image_size.unwrap_or(d.image_width),
        image_height: a.image_size.unwrap_or(d.image_height),
        patch_size: a.patch_size.unwrap_or(d.patch_size),
        ..d
    };
    config.validate()?;
    if a.scenes == 0 {
        return Err(bad_arg("--scenes must be at least 1"));
    }
    let corpus = generate_corpus(&config, a.scenes)?;
    let stage = StagedDir::new(&a.out.out)?;
    write_corpus(stage.path(), &corpus)?;
    let out = stage.commit()?;
    let mut counts = std::collections::BTreeMap::new();
    for s in &corpus.samples {
        *counts.entry(s.size_class).or_insert(0usize) += 1;
    }
    let table = format!(
        "scenes {}\nseed {}\nsize classes {:?}\nout {}\n",
        corpus.len(),
        a.seed,
        counts,
        out.display()
    );
    Ok(Summary {
        json: json!({"command": "synth", "scenes": corpus.len(), "seed": a.seed,
                     "size_classes": counts, "out": out}),
        table,
    })
}

fn head_for(config: &SynthConfig) -> HeadConfig {
    HeadConfig {
        d_v: config.d_v,
        d_q: config.d_q,
        ..HeadConfig::default()
    }
}

fn train_cmd(a: &TrainArgs) -> patchground::Result<Summary> {
    let corpus = read_corpus(&a.flags.corpus)?;
    let config = a.flags.config(head_for(&corpus.manifest.config));
    config.validate()?;
    let (params, mut log) = train(&config, &corpus.samples)?;
    let stage = StagedDir::new(&a.out.out)?;
    save_checkpoint(&stage.path().join("checkpoint"), &params, config.seed, serde_json::to_value(&config)?)?;
    log.checkpoint = Some("checkpoint".into());
    std::fs::write(stage.path().join("train_log.jsonl"), log.to_jsonl()?)?;
    std::fs::write(stage.path().join("train_summary.json"), serde_json::to_vec_pretty(&log)?)?;
    let out = stage.commit()?;
    let fin = log.final_eval();
    let mut table = String::from("epoch  loss      l_sup     l_attn    eval_acc\n");
    for e in &log.epochs {
        table.push_str(&format!(
            "{:<6} {:<9.5} {:<9.5} {:<9.5} {:.4}\n",
            e.epoch, e.loss.total, e.loss.l_sup, e.loss.l_attn, e.eval.accuracy
        ));
    }
    table.push_str(&format!("checkpoint {}\n", out.join("checkpoint").display()));
    Ok(Summary {
        json: json!({
            "command": "train",
            "epochs": log.epochs.len(),
            "final_loss": log.epochs.last().map(|e| e.loss.total),
            "eval_accuracy": fin.accuracy,
            "eval_suppression_mass": fin.suppression_mass,
            "initial_eval_accuracy": log.initial.accuracy,
            "checkpoint": out.join("checkpoint"),
            "out": out,
        }),
        table,
    })
}

fn eval_cmd(a: &EvalArgs) -> patchground::Result<Summary> {
    if !(a.gamma > 0.0 && a.gamma <= 1.0) {
        return Err(bad_arg("--gamma must lie in (0, 1]"));
    }
    let corpus = read_corpus(&a.corpus)?;
    let (params, meta) = load_checkpoint::<f64>(&a.checkpoint)?;
    let samples = match a.split {
        Split::All => &corpus.samples[..],
        Split::Heldout => {
            let frac = meta.hyperparameters["eval_split"].as_f64().unwrap_or(0.2);
            let cut = split_point(corpus.len(), frac);
            if cut < corpus.len() {
                &corpus.samples[cut..]
            } else {
                &corpus.samples[..]
            }
        }
    };
    let (mode, gamma) = match a.mode {
        Mode::Argmax => (DecodeMode::Argmax, None),
        Mode::Threshold => (DecodeMode::ThresholdCentroid, Some(a.gamma)),
    };
    let mut maps = Vec::with_capacity(samples.len());
    for s in samples {
        maps.push(attention_forward(&params, &s.feats, &s.query, &s.grid)?);
    }
    let preds: Vec<_> = maps.iter().map(|m| decode_click(m, mode, a.gamma)).collect();
    let items = eval_items(samples);
    let report = size_stratified_report(&items, &preds, mode, gamma)?;
    let stage = StagedDir::new(&a.out.out)?;
    std::fs::write(stage.path().join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(stage.path().join("report.txt"), report.to_table())?;
    std::fs::write(stage.path().join("predictions.csv"), predictions_csv(&items, &preds))?;
    if a.save_attention {
        std::fs::create_dir_all(stage.path().join("attention"))?;
        for (it, m) in items.iter().zip(&maps) {
            ValueGrid::from_map(&m.grid, &m.probs)
                .write(&stage.path().join(format!("attention/{}.bin", it.id)), GridFormat::Bin)?;
        }
    }
    let out = stage.commit()?;
    let mut json = serde_json::to_value(&report)?;
    json["command"] = "eval".into();
    json["out"] = json!(out);
    Ok(Summary {
        json,
        table: report.to_table(),
    })
}

fn ablate(a: &AblateArgs) -> patchground::Result<Summary> {
    let corpus = read_corpus(&a.flags.corpus)?;
    let config = a.flags.config(head_for(&corpus.manifest.config));
    config.validate()?;
    if a.seeds == 0 {
        return Err(bad_arg("--seeds must be at least 1"));
    }
    let art = run_ablation_matrix(&config, &corpus.samples, a.seeds)?;
    let stage = StagedDir::new(&a.out.out)?;
    for (cell, params) in art.report.cells.iter().zip(&art.params) {
        for (run, p) in cell.runs.iter().zip(params) {
            let dir = checkpoint_dir(stage.path(), &cell.variant.name, run.seed);
            let cfg = cell.variant.apply(&config, run.seed);
            save_checkpoint(&dir, p, run.seed, serde_json::to_value(&cfg)?)?;
        }
    }
    std::fs::write(stage.path().join("report.json"), serde_json::to_vec_pretty(&art.report)?)?;
    std::fs::write(stage.path().join("report.txt"), art.report.to_table())?;
    let out = stage.commit()?;
    let mut json = serde_json::to_value(&art.report)?;
    json["command"] = "ablate".into();
    json["out"] = json!(out);
    Ok(Summary {
        json,
        table: art.report.to_table(),
    })
}

fn checkpoint_dir(root: &Path, cell: &str, seed: u64) -> PathBuf {
    let safe: String = cell
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' })
        .collect();
    root.join("checkpoints").join(safe).join(format!("seed-{seed}"))
}

fn heatmap(a: &HeatmapArgs) -> patchground::Result<Summary> {
    if a.scale == 0 {
        return Err(bad_arg("--scale must be at least 1"));
    }
    let grid = ValueGrid::read(&a.label_file)?;
    let ppm = render_ppm(&grid, a.scale)?;
    output::write_file_atomic(&a.out, &ppm)?;
    let peak = grid.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Summary {
        json: json!({"command": "heatmap", "rows": grid.rows, "cols": grid.cols,
                     "max": peak, "bytes": ppm.len(), "out": a.out}),
        table: format!("{}x{} grid, max {peak}\nwrote {}\n", grid.rows, grid.cols, a.out.display()),
    })
}
