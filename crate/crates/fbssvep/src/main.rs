use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fbssvep::checkpoint::{Checkpoint, EXTENSION};
use fbssvep::dataio::{load_dataset, save_dataset};
use fbssvep::desk::{fbcca_sweep, run_desk, DeskConfig};
use fbssvep::error::Error;
use fbssvep::experiment::{evaluate_checkpoint, method_report, run_loso, Method, RunConfig, TrainOverrides};
use fbssvep::report::{load_report, merge, render_report, save_report};
use fbssvep_core::eval::{EvalReport, MethodReport};
use fbssvep_core::pipeline::{Granularity, Reference};
use fbssvep_core::synth::{generate_dataset, SynthConfig};
use fbssvep_core::types::StimulusTable;
use serde::Serialize;

const HISTORY_SCHEMA: &str = "fbssvep-history/1";
const RECORD_SCHEMA: &str = "fbssvep-eval-record/1";

#[derive(Parser)]
#[command(name = "fbssvep", version, about = "Filter-bank SSVEP classification: synthesis, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, or with --sweep print FBCCA accuracy against noise level.
    Synth(SynthArgs),
    /// Train one classifier per held-out subject.
    Train(TrainArgs),
    /// Score saved checkpoints on their held-out subjects.
    Eval(EvalArgs),
    /// Merge reports into one table with pairwise Wilcoxon p-values.
    Compare(CompareArgs),
    /// Run the desk-scale synthetic study.
    Desk(DeskArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    /// "2" (12/15 Hz), "12" (9.25-14.75 Hz), or a list such as "8,10@1.57,12".
    #[arg(long, default_value = "2")]
    classes: String,
    /// White noise standard deviation.
    #[arg(long, default_value_t = 2.5)]
    snr: f64,
    #[arg(long, default_value_t = 0.5)]
    pink: f64,
    #[arg(long, default_value_t = 3)]
    trials_per_class: usize,
    #[arg(long, default_value_t = 2.0)]
    trial_seconds: f64,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated white-noise levels; prints a table instead of writing data.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefArg {
    BandPass,
    Car,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Trial,
    Window,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// FBCCA, RF, FBCNN-2D, FBCNN-3D, FBRNN, A-CNN, A-RNN or SVM.
    #[arg(long)]
    model: String,
    /// A subject id, or "all".
    #[arg(long, default_value = "all")]
    test_subject: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = RefArg::BandPass)]
    reference: RefArg,
    #[arg(long)]
    no_notch: bool,
    /// Analysed channel; defaults to the first.
    #[arg(long)]
    channel: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Trial)]
    split: SplitArg,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoints: PathBuf,
    /// Subjects that must have a checkpoint; defaults to every subject.
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    /// Report path; defaults to eval.json in the checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DeskArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    snr: Option<f64>,
}

fn parse_classes(spec: &str) -> Result<StimulusTable> {
    let table = match spec {
        "2" => StimulusTable::new(&[(12.0, 0.0), (15.0, PI / 2.0)])?,
        "12" => StimulusTable::evenly_spaced(9.25, 0.5, 12, PI / 2.0)?,
        _ => {
            let mut pairs = Vec::new();
            for item in spec.split(',') {
                let (f, p) = item.split_once('@').unwrap_or((item, "0"));
                let f: f64 = f.trim().parse().with_context(|| format!("bad frequency {f:?}"))?;
                let p: f64 = p.trim().parse().with_context(|| format!("bad phase {p:?}"))?;
                pairs.push((f, p));
            }
            StimulusTable::new(&pairs)?
        }
    };
    Ok(table)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let table = parse_classes(&a.classes)?;
    let cfg = SynthConfig {
        white_sigma: a.snr,
        pink_sigma: a.pink,
        trial_seconds: a.trial_seconds,
        n_channels: a.channels,
        ..SynthConfig::new(table.clone(), a.seed)
    };
    if let Some(sigmas) = a.sweep {
        let rows = fbcca_sweep(&cfg, a.subjects, a.trials_per_class, &sigmas)?;
        println!("{:>8}  {:>14}", "sigma", "FBCCA acc (%)");
        for (s, acc) in &rows {
            println!("{s:>8.3}  {acc:>14.2}");
        }
        if let Some(out) = a.out {
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let rows: Vec<BTreeMap<&str, f64>> =
                rows.iter().map(|&(s, acc)| BTreeMap::from([("sigma", s), ("fbcca_accuracy", acc)])).collect();
            write_json(&out.join("sweep.json"), &rows)?;
        }
        return Ok(());
    }
    let Some(out) = a.out else { bail!("--out is required unless --sweep is given") };
    let recs = generate_dataset(a.subjects, a.trials_per_class, &cfg)?;
    let path = save_dataset(&out, &format!("synthetic-{}class-seed{}", table.len(), a.seed), &table, &recs)?;
    let trials: usize = recs.iter().map(|r| r.trials.len()).sum();
    println!(
        "wrote {} subjects, {} trials, {} classes, {} samples per subject to {}",
        recs.len(),
        trials,
        table.len(),
        recs[0].n_samples(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct HistoryFile<'a> {
    schema: &'static str,
    method: &'a str,
    test_subject: &'a str,
    seed: u64,
    history: &'a fbssvep_core::nn::History,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    schema: &'static str,
    method: &'a str,
    result: &'a fbssvep_core::eval::SubjectResult,
}

fn train(a: TrainArgs) -> Result<()> {
    let method: Method = a.model.parse()?;
    let data = load_dataset(&a.data)?;
    let subjects = if a.test_subject == "all" { data.subject_ids() } else { vec![a.test_subject.clone()] };
    let mut cfg = RunConfig::new(method, a.seed);
    cfg.preprocess.notch = !a.no_notch;
    cfg.preprocess.channel = a.channel;
    cfg.preprocess.reference = match a.reference {
        RefArg::BandPass => Reference::BandPass,
        RefArg::Car => Reference::Car,
        RefArg::None => Reference::None,
    };
    cfg.granularity = match a.split {
        SplitArg::Trial => Granularity::Trial,
        SplitArg::Window => Granularity::Window,
    };
    cfg.overrides =
        TrainOverrides { max_epochs: a.max_epochs, patience: a.patience, batch_size: a.batch_size, lr: a.lr };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    eprintln!("{}: {} fold(s) on {}", method, subjects.len(), data.name);
    let folds = run_loso(&data.recordings, &data.table, &subjects, &cfg)?;
    for f in &folds {
        let id = &f.result.subject;
        match &f.checkpoint {
            Some(c) => c.save(&a.out.join(format!("{id}.{EXTENSION}")))?,
            None => write_json(
                &a.out.join(format!("{id}.eval.json")),
                &EvalRecord { schema: RECORD_SCHEMA, method: method.name(), result: &f.result },
            )?,
        }
        if let Some(h) = &f.history {
            let seed = f.checkpoint.as_ref().map_or(a.seed, |c| c.seed);
            write_json(
                &a.out.join(format!("{id}.history.json")),
                &HistoryFile { schema: HISTORY_SCHEMA, method: method.name(), test_subject: id, seed, history: h },
            )?;
        }
    }
    let report = EvalReport::new(vec![method_report(method.name(), &folds)])?;
    save_report(&a.out.join("report.json"), &report)?;
    print!("{}", render_report(&report));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let mut by_method: BTreeMap<String, Vec<Checkpoint>> = BTreeMap::new();
    let entries = fs::read_dir(&a.checkpoints).with_context(|| format!("reading {}", a.checkpoints.display()))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths.iter().filter(|p| p.extension().is_some_and(|e| e == EXTENSION)) {
        let c = Checkpoint::load(p)?;
        by_method.entry(c.method.clone()).or_default().push(c);
    }
    let expected = a.subjects.unwrap_or_else(|| data.subject_ids());
    if by_method.is_empty() {
        return Err(Error::MissingCheckpoints(expected).into());
    }
    let mut methods = Vec::new();
    for (name, ckpts) in &by_method {
        let missing: Vec<String> =
            expected.iter().filter(|s| !ckpts.iter().any(|c| &c.test_subject == *s)).cloned().collect();
        if !missing.is_empty() {
            return Err(anyhow::Error::from(Error::MissingCheckpoints(missing)).context(format!("method {name}")));
        }
        let results = expected
            .iter()
            .map(|s| {
                evaluate_checkpoint(ckpts.iter().find(|c| &c.test_subject == s).expect("checked"), &data.recordings)
            })
            .collect::<Result<Vec<_>, _>>()?;
        methods.push(MethodReport::new(name, results));
    }
    let report = EvalReport::new(methods)?;
    save_report(&a.out.unwrap_or_else(|| a.checkpoints.join("eval.json")), &report)?;
    print!("{}", render_report(&report));
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let reports = a.reports.iter().map(|p| load_report(p)).collect::<Result<Vec<_>, _>>()?;
    let merged = merge(&reports)?;
    if let Some(out) = &a.out {
        save_report(out, &merged)?;
    }
    print!("{}", render_report(&merged));
    Ok(())
}

fn desk(a: DeskArgs) -> Result<()> {
    let mut cfg = DeskConfig { seeds: (0..a.seeds).collect(), ..DeskConfig::default() };
    if let Some(s) = a.snr {
        cfg.white_sigma = s;
    }
    let r = run_desk(&cfg)?;
    println!("FBCCA mean accuracy over {} subjects: {:.2}%", r.fbcca.subjects.len(), r.fbcca.mean_accuracy);
    println!("{:>5}  {:<9} {:<7} {:>8} {:>6} {:>6}", "seed", "model", "subject", "acc (%)", "F1", "epochs");
    for run in &r.runs {
        println!(
            "{:>5}  {:<9} {:<7} {:>8.2} {:>6.3} {:>6}",
            run.seed, run.model, run.test_subject, run.accuracy, run.f1, run.epochs
        );
    }
    for (k, _) in &cfg.models {
        println!("mean {:<9} {:.2}", k.name(), r.mean_accuracy(*k).unwrap_or(f64::NAN));
    }
    if let Some(out) = a.out {
        write_json(&out, &r)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Desk(a) => desk(a),
    }
}
