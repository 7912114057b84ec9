//! Subcommands. Every output is a pure function of the inputs, the config
//! and the seed.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nrtk_core::har::{pretrain, Objective};
use nrtk_core::importance::score_grid;
use nrtk_core::metrics::{codebook_stats, corpus_recon, mask_gap, rvq_depth_sweep, usage_histograms, CodebookStats};
use nrtk_core::preprocess::run_pipeline;
use nrtk_core::rng::{stream, Stream};
use nrtk_core::synth::generate;
use nrtk_core::tokenizer::train_tokenizer;
use nrtk_core::PatchGrid;

use crate::checkpoint::{load_tokenizer, save_har, save_tokenizer};
use crate::config::DeskConfig;
use crate::corpus::{grids, load_segments, write_segments};
use crate::error::{CliError, Result};
use crate::signal_io::{load_recording, save_recording, Format};

#[derive(Debug, Parser)]
#[command(name = "nrtk", version, about = "Dual-domain RVQ tokenizer and masked pre-training for neural recordings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, resample, window and reject a recording into normalized segments.
    Preprocess(PreprocessArgs),
    /// Write a synthetic recording and its ground-truth sidecar.
    GenSynth(GenSynthArgs),
    /// Train a tokenizer; writes a checkpoint and `history.jsonl`.
    TrainTokenizer(TrainArgs),
    /// Masked pre-training against a frozen tokenizer.
    Pretrain(PretrainArgs),
    /// Per-patch importance scores as CSV.
    Score(ScoreArgs),
    /// Reconstruction fidelity of a tokenizer as JSON.
    Reconstruct(ModelArgs),
    /// Codebook usage statistics as JSON.
    AnalyzeCodebook(ModelArgs),
    /// Score gap between masked and visible patches as JSON.
    MaskReport(MaskArgs),
    /// Train one tokenizer per RVQ depth; JSON lines of reconstruction metrics.
    DepthSweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Desk config JSON; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample rate assumed for CSV inputs.
    #[arg(long, default_value_t = 200.0)]
    pub csv_rate: f64,
}

impl Common {
    fn desk(&self) -> Result<DeskConfig> {
        let cfg = DeskConfig::load(self.config.as_deref())?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory for segment files and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Band-pass edges as `low:high` in Hz.
    #[arg(long)]
    pub band: Option<String>,
    /// Notch centre in Hz, or `none`.
    #[arg(long)]
    pub notch: Option<String>,
    #[arg(long)]
    pub resample: Option<f64>,
    /// Window length in seconds.
    #[arg(long)]
    pub window: Option<f64>,
    #[arg(long)]
    pub amp_thresh: Option<f64>,
    /// Seconds trimmed from each end.
    #[arg(long)]
    pub trim: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub minutes: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Spikes per channel per minute.
    #[arg(long)]
    pub spike_density: Option<f64>,
    /// Recording path; the sidecar goes next to it as `<stem>.sidecar.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// A `preprocess` output directory or a raw recording.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    Hierarchical,
    Independent,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Tokenizer checkpoint directory.
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Hierarchical)]
    pub objective: ObjectiveArg,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Curriculum weight `w`.
    #[arg(long, default_value_t = 0.7)]
    pub weight: f64,
    /// Sampler temperature; the pretrain section's value when absent.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated depths.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    pub depths: Vec<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            fs::write(p, text).map_err(|e| CliError::io(p, e))
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes") + "\n"
}

fn json_lines<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("output serializes") + "\n").collect()
}

fn parse_band(s: &str) -> Result<(f64, f64)> {
    let bad = || CliError::MalformedConfig(format!("band `{s}` is not `low:high`"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn corpus(data: &Path, cfg: &DeskConfig, common: &Common) -> Result<Vec<PatchGrid>> {
    grids(&load_segments(data, cfg, common.csv_rate)?, cfg.model.patch_len)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::TrainTokenizer(a) => train(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Score(a) => score(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::AnalyzeCodebook(a) => analyze(a),
        Command::MaskReport(a) => mask_report(a),
        Command::DepthSweep(a) => sweep(a),
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut cfg = a.common.desk()?.preprocess;
    if let Some(b) = &a.band {
        cfg.band_hz = parse_band(b)?;
    }
    if let Some(n) = &a.notch {
        cfg.notch_hz = if n.eq_ignore_ascii_case("none") {
            None
        } else {
            Some(n.parse().map_err(|_| CliError::MalformedConfig(format!("notch `{n}` is not a frequency")))?)
        };
    }
    cfg.resample_hz = a.resample.unwrap_or(cfg.resample_hz);
    cfg.window_s = a.window.unwrap_or(cfg.window_s);
    cfg.amp_thresh_uv = a.amp_thresh.unwrap_or(cfg.amp_thresh_uv);
    cfg.trim_s = a.trim.unwrap_or(cfg.trim_s);
    let rec = load_recording(&a.input, Format::from_path(&a.input, a.common.csv_rate))?;
    let out = run_pipeline(&rec, &cfg)?;
    let source = a.input.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    write_segments(&a.out, &source, &cfg, &out)?;
    Ok(())
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "recording".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.sidecar.json"))
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut cfg = DeskConfig::load(a.config.as_deref())?.synth;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.minutes = a.minutes.unwrap_or(cfg.minutes);
    cfg.channels = a.channels.unwrap_or(cfg.channels);
    cfg.spike_density = a.spike_density.unwrap_or(cfg.spike_density);
    let out = generate(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_recording(&out.recording, &a.out)?;
    emit(Some(&sidecar_path(&a.out)), &json(&out.sidecar))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.desk()?;
    cfg.tokenizer.epochs = a.epochs.unwrap_or(cfg.tokenizer.epochs);
    cfg.tokenizer.warmup_epochs = cfg.tokenizer.warmup_epochs.min(cfg.tokenizer.epochs);
    cfg.model.rvq_layers = a.layers.unwrap_or(cfg.model.rvq_layers);
    cfg.validate()?;
    let corpus = corpus(&a.data, &cfg, &a.common)?;
    let run = train_tokenizer(&corpus, &cfg.model, &cfg.tokenizer)?;
    save_tokenizer(&a.out, &run.model)?;
    emit(Some(&a.out.join("history.jsonl")), &json_lines(&run.history))?;
    emit(Some(&a.out.join("config.json")), &cfg.to_json())
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut cfg = a.common.desk()?;
    cfg.pretrain.epochs = a.epochs.unwrap_or(cfg.pretrain.epochs);
    cfg.pretrain.warmup_epochs = cfg.pretrain.warmup_epochs.min(cfg.pretrain.epochs);
    cfg.validate()?;
    let mut tokenizer = load_tokenizer(&a.tokenizer)?;
    if let Some(s) = a.common.seed {
        tokenizer.cfg.seed = s;
    }
    cfg.model = tokenizer.cfg.clone();
    let corpus = corpus(&a.data, &cfg, &a.common)?;
    let objective = match a.objective {
        ObjectiveArg::Hierarchical => Objective::Hierarchical,
        ObjectiveArg::Independent => Objective::Independent,
    };
    let run = pretrain(&corpus, &tokenizer, &cfg.pretrain, objective)?;
    save_har(&a.out, &run.model)?;
    emit(Some(&a.out.join("history.jsonl")), &json_lines(&run.history))?;
    emit(Some(&a.out.join("config.json")), &cfg.to_json())
}

pub const SCORE_HEADER: &str = "segment,channel,index,neural,clean,complexity,irregularity,mobility,\
norm_neural,norm_clean,norm_complexity,norm_irregularity,norm_mobility,aggregate,activity";

fn score(a: ScoreArgs) -> Result<()> {
    let cfg = a.common.desk()?;
    let segments = load_segments(&a.data, &cfg, a.common.csv_rate)?;
    let grids = grids(&segments, cfg.model.patch_len)?;
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for (seg, grid) in segments.iter().zip(&grids) {
        let map = score_grid(grid)?;
        for i in 0..grid.len() {
            let (c, p) = grid.coords(i);
            let r = &map.raw[i];
            let w = r.weighted();
            let n = map.normalized[i];
            writeln!(
                out,
                "{},{c},{p},{},{},{},{},{},{},{},{},{},{},{},{}",
                seg.window_index, w[0], w[1], w[2], w[3], w[4], n[0], n[1], n[2], n[3], n[4], map.aggregate[i], r.activity
            )
            .expect("string write");
        }
    }
    emit(a.out.as_deref(), &out)
}

fn reconstruct(a: ModelArgs) -> Result<()> {
    let mut cfg = a.common.desk()?;
    let tok = load_tokenizer(&a.tokenizer)?;
    cfg.model = tok.cfg.clone();
    let corpus = corpus(&a.data, &cfg, &a.common)?;
    emit(a.out.as_deref(), &json(&corpus_recon(&tok, &corpus)?))
}

#[derive(Serialize)]
struct CodebookReport {
    domain: &'static str,
    layer: usize,
    #[serde(flatten)]
    stats: CodebookStats,
}

fn analyze(a: ModelArgs) -> Result<()> {
    let mut cfg = a.common.desk()?;
    let tok = load_tokenizer(&a.tokenizer)?;
    cfg.model = tok.cfg.clone();
    let corpus = corpus(&a.data, &cfg, &a.common)?;
    let hist = usage_histograms(&tok, &corpus)?;
    let mut rows = Vec::new();
    for d in nrtk_core::rvq::Domain::BOTH {
        for (layer, h) in hist[d.index()].iter().enumerate() {
            rows.push(CodebookReport { domain: d.name(), layer, stats: codebook_stats(h)? });
        }
    }
    emit(a.out.as_deref(), &json(&rows))
}

#[derive(Serialize)]
struct MaskOutput {
    weight: f64,
    temperature: f64,
    mask_ratio: f64,
    draws: usize,
    samples: usize,
    #[serde(flatten)]
    report: nrtk_core::metrics::MaskReport,
}

fn mask_report(a: MaskArgs) -> Result<()> {
    let cfg = a.common.desk()?;
    let corpus = corpus(&a.data, &cfg, &a.common)?;
    let scores = corpus.iter().map(|g| score_grid(g).map(|m| m.aggregate)).collect::<Result<Vec<_>, _>>()?;
    let temperature = a.temperature.unwrap_or(cfg.pretrain.mask_temperature);
    let draws = a.draws.unwrap_or(cfg.mask_draws);
    let mut rng = stream(cfg.pretrain.seed, Stream::Masking);
    let report = mask_gap(&scores, cfg.model.mask_ratio, a.weight, temperature, draws, &mut rng)?;
    let out = MaskOutput { weight: a.weight, temperature, mask_ratio: cfg.model.mask_ratio, draws, samples: scores.len(), report };
    emit(a.out.as_deref(), &json(&out))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = a.common.desk()?;
    cfg.tokenizer.epochs = a.epochs.unwrap_or(cfg.tokenizer.epochs);
    cfg.tokenizer.warmup_epochs = cfg.tokenizer.warmup_epochs.min(cfg.tokenizer.epochs);
    cfg.validate()?;
    let corpus = corpus(&a.data, &cfg, &a.common)?;
    let rows = rvq_depth_sweep(&corpus, &cfg.model, &cfg.tokenizer, &a.depths)?;
    emit(a.out.as_deref(), &json_lines(&rows))
}
