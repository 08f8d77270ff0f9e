//! Command-line front end: `gen-data`, `train`, `eval`, `sweep`.
//!
//! Exit codes: 0 on success, 2 for usage or environment errors. Every output
//! file is written atomically.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::dataio::{generate_dataset, write_atomic, DataBundle, SceneConfig};
use crate::embeddings::{generate_synthetic_embeddings, make_split, ClassVocabulary};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, PredictMode};
use crate::transduce::{evaluate, run, write_history, Mode, TrainConfig};

/// Objects in the generated vocabulary (plus background).
pub const REFERENCE_OBJECTS: usize = 15;
/// Embedding dimension of the generated vocabulary.
pub const REFERENCE_DIM: usize = 8;
pub const DEFAULT_LAMBDAS: [f64; 7] = [0.0, 0.1, 0.3, 0.6, 1.0, 1.5, 3.0];

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SVG: &str = "sweep.svg";

#[derive(Debug, Parser)]
#[command(
    name = "zsseg",
    version,
    about = "Transductive zero-shot segmentation on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate embeddings, a split, and source/target datasets.
    GenData(GenDataArgs),
    /// Train a model, then write its checkpoint, loss history and target metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the target images of a dataset.
    Eval(EvalArgs),
    /// Train one model per lambda and plot seen/unseen mIoU and H.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Embeddings use this seed; the color mixing and scenes use seed+1 and seed+2.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n_source: usize,
    #[arg(long, default_value_t = 100)]
    pub n_target: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "obj01,obj02,obj03,obj04,obj05"
    )]
    pub unseen: Vec<String>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub allow_seen_in_target: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// inductive | ours | ours+st | st | cbst
    #[arg(long, default_value = "ours")]
    pub mode: Mode,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub st_epochs: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            mode: self.mode,
            lambda: self.lambda.unwrap_or(d.lambda),
            base_lr: self.lr.unwrap_or(d.base_lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            batch_size: self.batch.unwrap_or(d.batch_size),
            main_epochs: self.epochs.unwrap_or(d.main_epochs),
            self_train_epochs: self.st_epochs.unwrap_or(d.self_train_epochs),
            confidence_threshold: self.tau.unwrap_or(d.confidence_threshold),
            run_seed: self.seed,
            ..d
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// generalized | conventional
    #[arg(long, default_value = "generalized")]
    pub mode: PredictMode,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS)]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep(a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let vocab = ClassVocabulary::synthetic(REFERENCE_OBJECTS);
    let split = make_split(&vocab, &a.unseen)?;
    let table = generate_synthetic_embeddings(&vocab, REFERENCE_DIM, a.seed)?;
    let config = SceneConfig {
        height: a.height,
        width: a.width,
        noise_sigma: a.noise,
        mixing_seed: a.seed.wrapping_add(1),
        scene_seed: a.seed.wrapping_add(2),
        allow_seen_in_target: a.allow_seen_in_target,
        ..SceneConfig::reference()
    };
    let (source, target) =
        generate_dataset(&vocab, &table, &split, a.n_source, a.n_target, &config)?;
    DataBundle {
        vocab,
        table,
        split,
        source,
        target,
    }
    .save(&a.out)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let config = a.config()?;
    let data = DataBundle::load(&a.data)?;
    create_dir(&a.out)?;
    let state = run(
        &config,
        &data.source,
        &data.target,
        &data.table,
        &data.split,
    )?;
    save_checkpoint(
        &config.net_config(data.table.dim()),
        &state.params,
        &a.out.join(CHECKPOINT_DIR),
    )?;
    write_history(&state.history, &a.out.join(HISTORY_FILE))?;
    let e = evaluate(
        &state.params,
        &data.target,
        &data.table,
        &data.split,
        PredictMode::Generalized,
    )?;
    write_atomic(
        &a.out.join(METRICS_FILE),
        e.report.to_csv_generalized().as_bytes(),
    )
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let data = DataBundle::load(&a.data)?;
    let (net, params) = load_checkpoint(&a.ckpt)?;
    if net.output_dim != data.table.dim() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint projects to {} dimensions but the embeddings have {}",
            net.output_dim,
            data.table.dim()
        )));
    }
    let e = evaluate(&params, &data.target, &data.table, &data.split, a.mode)?;
    let csv = match a.mode {
        PredictMode::Generalized => e.report.to_csv_generalized(),
        PredictMode::Conventional => e.report.to_csv_conventional(&data.split),
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic(&a.out, csv.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub seen_miou: f64,
    pub unseen_miou: f64,
    pub harmonic_mean: f64,
}

pub fn validate_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::invalid("the lambda list is empty"));
    }
    for (i, &l) in lambdas.iter().enumerate() {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda {l} must be finite and >= 0"
            )));
        }
        if lambdas[..i].contains(&l) {
            return Err(Error::invalid(format!("lambda {l} is listed twice")));
        }
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    validate_lambdas(&a.lambdas)?;
    let data = DataBundle::load(&a.data)?;
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    for &lambda in &a.lambdas {
        let config = TrainConfig {
            lambda,
            mode: Mode::Ours,
            run_seed: a.seed,
            ..TrainConfig::default()
        };
        let fail = |e: Error| Error::invalid(format!("run with lambda {lambda} failed: {e}"));
        let state = run(
            &config,
            &data.source,
            &data.target,
            &data.table,
            &data.split,
        )
        .map_err(fail)?;
        let r = evaluate(
            &state.params,
            &data.target,
            &data.table,
            &data.split,
            PredictMode::Generalized,
        )
        .map_err(fail)?
        .report;
        rows.push(SweepRow {
            lambda,
            seen_miou: r.seen_miou.unwrap_or(0.0),
            unseen_miou: r.unseen_miou.unwrap_or(0.0),
            harmonic_mean: r.harmonic_mean.unwrap_or(0.0),
        });
    }
    write_atomic(&a.out.join(SWEEP_CSV), sweep_csv(&rows).as_bytes())?;
    write_atomic(&a.out.join(SWEEP_SVG), sweep_svg(&rows).as_bytes())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,seen_miou,unseen_miou,harmonic_mean\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.lambda, r.seen_miou, r.unseen_miou, r.harmonic_mean
        )
        .unwrap();
    }
    out
}

/// Three polylines (seen, unseen, H) over lambda, with the y axis fixed to [0, 1].
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 40.0;
    let max_l = rows.iter().map(|r| r.lambda).fold(0.0, f64::max);
    let x = |l: f64| {
        if max_l > 0.0 {
            M + l / max_l * (W - 2.0 * M)
        } else {
            W / 2.0
        }
    };
    let y = |v: f64| H - M - v.clamp(0.0, 1.0) * (H - 2.0 * M);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<path d="M{M} {M} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    )
    .unwrap();
    for r in rows {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            x(r.lambda),
            H - M + 14.0,
            r.lambda
        )
        .unwrap();
    }
    type Series = (&'static str, &'static str, fn(&SweepRow) -> f64);
    let series: [Series; 3] = [
        ("seen mIoU", "#1f77b4", |r| r.seen_miou),
        ("unseen mIoU", "#d62728", |r| r.unseen_miou),
        ("H", "#2ca02c", |r| r.harmonic_mean),
    ];
    for (i, (name, color, get)) in series.iter().enumerate() {
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.1},{:.1}", x(r.lambda), y(get(r))))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#,
            W - M - 80.0,
            M + 14.0 * i as f64
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">lambda</text>"#,
        W / 2.0,
        H - 6.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_list_rules() {
        assert!(validate_lambdas(&DEFAULT_LAMBDAS).is_ok());
        assert!(validate_lambdas(&[0.0]).is_ok());
        assert!(validate_lambdas(&[]).is_err());
        assert!(validate_lambdas(&[0.1, 0.1]).is_err());
        assert!(validate_lambdas(&[-1.0]).is_err());
    }

    #[test]
    fn sweep_outputs_have_one_entry_per_lambda() {
        let rows: Vec<SweepRow> = [0.0, 0.6, 3.0]
            .iter()
            .map(|&lambda| SweepRow {
                lambda,
                seen_miou: 0.5,
                unseen_miou: 0.25,
                harmonic_mean: 1.0 / 3.0,
            })
            .collect();
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(2), Some("0.6,0.500000,0.250000,0.333333"));
        let svg = sweep_svg(&rows);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(sweep_svg(&rows[..1]).matches("<polyline").count(), 3);
    }

    #[test]
    fn train_flags_override_defaults() {
        let cli = Cli::try_parse_from([
            "zsseg", "train", "--data", "d", "--out", "o", "--mode", "ours+st", "--tau", "0.7",
            "--epochs", "3",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else {
            panic!("expected train")
        };
        let c = a.config().unwrap();
        assert_eq!(c.mode, Mode::OursSt);
        assert_eq!(c.confidence_threshold, 0.7);
        assert_eq!(c.main_epochs, 3);
        assert_eq!(c.lambda, 0.6);
        assert!(Cli::try_parse_from([
            "zsseg", "train", "--data", "d", "--out", "o", "--mode", "x"
        ])
        .is_err());
    }

    #[test]
    fn gen_data_defaults() {
        let cli = Cli::try_parse_from(["zsseg", "gen-data", "--out", "x"]).unwrap();
        let Command::GenData(a) = cli.command else {
            panic!("expected gen-data")
        };
        assert_eq!(
            (a.seed, a.n_source, a.n_target, a.height, a.width),
            (7, 200, 100, 96, 96)
        );
        assert_eq!(a.unseen.len(), 5);
        assert!(a.allow_seen_in_target);
        let cli = Cli::try_parse_from([
            "zsseg",
            "gen-data",
            "--out",
            "x",
            "--allow-seen-in-target",
            "false",
        ])
        .unwrap();
        let Command::GenData(a) = cli.command else {
            panic!("expected gen-data")
        };
        assert!(!a.allow_seen_in_target);
    }
}
