//! Command-line front end. Every command writes a `key = value` echo of its
//! fully resolved settings next to its output.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{make_dataset, Dataset, DatasetConfig, Split};
use crate::eval;
use crate::infer::{self, AttractorCodebook, SeparateOptions, Strategy};
use crate::net::{load_checkpoint, save_checkpoint};
use crate::signal::{read_wav, write_wav};
use crate::tensor_file::TensorFile;
use crate::train::{self, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "danet", version, about = "Deep attractor network source separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic mixture dataset
    Synth(SynthArgs),
    /// Train a model on a dataset
    Train(TrainArgs),
    /// Separate one mixture WAV
    Separate(SeparateArgs),
    /// Separate a dataset split and report metrics
    Eval(EvalArgs),
    /// Export per-mixture attractors projected on principal components
    InspectAttractors(InspectArgs),
    /// Build a fixed attractor codebook from training mixtures
    Codebook(CodebookArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training mixtures; validation and test get a fifth and two fifths
    #[arg(long, default_value_t = 125)]
    pub mixtures: usize,
    #[arg(long, default_value_t = 2)]
    pub speakers: usize,
    #[arg(long, default_value_t = 100)]
    pub chunk_len: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub snr_lo: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub snr_hi: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seconds per mixture
    #[arg(long, default_value_t = 4.0)]
    pub duration: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// key = value training settings; omitted keys keep their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue on 400-frame chunks from the best checkpoint
    #[arg(long)]
    pub curriculum: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub speakers: usize,
    #[arg(long, default_value = "kmeans")]
    pub strategy: String,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub refs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "kmeans")]
    pub strategy: String,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// oracle (ground-truth membership) or kmeans
    #[arg(long, default_value = "oracle")]
    pub strategy: String,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also export every bin embedding of the split's first mixture
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CodebookArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

/// Mistakes in how the command was invoked rather than in what it ran on.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn parse_strategy(s: &str) -> CliResult<Strategy> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn parse_split(s: &str) -> CliResult<Split> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn refuse_existing(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return usage(format!("{} exists; pass --force to overwrite", path.display()));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo(lines: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in lines {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    if a.out.exists() {
        let non_empty = std::fs::read_dir(&a.out)
            .map_err(|e| Error::io(&a.out, e))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return usage(format!("{} is not empty; pass --force to overwrite", a.out.display()));
        }
    }
    if !(a.snr_lo <= a.snr_hi) {
        return usage("--snr-lo must not exceed --snr-hi");
    }
    let cfg = DatasetConfig {
        duration_s: a.duration,
        ..DatasetConfig::with_mixtures(a.mixtures, a.speakers, a.chunk_len, a.seed, (a.snr_lo, a.snr_hi))
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let m = make_dataset(&cfg, &a.out)?;
    write_text(
        &a.out.join("synth_config.txt"),
        &echo(&[
            ("out", a.out.display().to_string()),
            ("n_train", cfg.n_train.to_string()),
            ("n_valid", cfg.n_valid.to_string()),
            ("n_test", cfg.n_test.to_string()),
            ("speakers", cfg.n_sources.to_string()),
            ("chunk_len", cfg.chunk_len.to_string()),
            ("snr_lo", cfg.snr_range.0.to_string()),
            ("snr_hi", cfg.snr_range.1.to_string()),
            ("seed", cfg.seed.to_string()),
            ("duration_s", cfg.duration_s.to_string()),
        ]),
    )?;
    eprintln!("wrote {} mixtures to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if a.curriculum && cfg.curriculum.is_none() {
        cfg.curriculum = Some(train::Curriculum { chunk_len: 400, epochs: 10 });
    }
    refuse_existing(&a.out, a.force)?;
    let ds = Dataset::open(&a.data)?;
    let outcome = train::train_dataset(&ds, &cfg)?;
    ensure_parent(&a.out)?;
    save_checkpoint(&outcome.model, &a.out)?;
    train::write_history(&outcome, sidecar(&a.out, ".history.csv"))?;
    let mut resolved = format!("data = {}\n", a.data.display());
    resolved.push_str(&cfg.to_text());
    write_text(&sidecar(&a.out, ".config.txt"), &resolved)?;
    eprintln!(
        "trained {} epochs, best validation loss {:.6} (initial {:.6})",
        outcome.history.len(),
        outcome.best_val_loss,
        outcome.initial_val_loss
    );
    if let Some(msg) = outcome.diverged {
        return Err(Failure::Runtime(Error::Divergence(format!(
            "{msg}; best checkpoint and history were written"
        ))));
    }
    Ok(())
}

fn separate_cmd(a: &SeparateArgs) -> CliResult<()> {
    let strategy = parse_strategy(&a.strategy)?;
    match strategy {
        Strategy::Fixed if a.codebook.is_none() => return usage("--strategy fixed needs --codebook"),
        Strategy::Oracle if a.refs.len() != a.speakers => {
            return usage(format!("--strategy oracle needs {} --refs files", a.speakers))
        }
        Strategy::KMeans | Strategy::Oracle if a.codebook.is_some() => {
            return usage("--codebook only applies to --strategy fixed")
        }
        Strategy::KMeans | Strategy::Fixed if !a.refs.is_empty() => return usage("--refs only applies to --strategy oracle"),
        _ => {}
    }
    let existing: Vec<PathBuf> = (0..a.speakers).map(|c| a.out.join(format!("source_{c}.wav"))).collect();
    if !a.force && existing.iter().any(|p| p.exists()) {
        return usage(format!("{} already holds separated sources; pass --force", a.out.display()));
    }
    let model = load_checkpoint(&a.model)?;
    let mixture = read_wav(&a.input)?;
    let codebook = a.codebook.as_ref().map(AttractorCodebook::load).transpose()?;
    let refs = a.refs.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
    let opts = SeparateOptions {
        n_sources: a.speakers,
        strategy,
        codebook: codebook.as_ref(),
        references: (!refs.is_empty()).then_some(refs.as_slice()),
        seed: a.seed,
    };
    let r = infer::separate(&model, &mixture, &opts)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (w, p) in r.sources.iter().zip(&existing) {
        write_wav(p, w)?;
    }
    let mut dump = TensorFile::new();
    dump.set_meta("kind", "separation")
        .set_meta("strategy", strategy)
        .set_meta("n_freq", r.masks.n_freq)
        .set_meta("n_frames", r.masks.n_frames);
    dump.push("masks", r.masks.m.shape(), r.masks.m.as_slice().expect("standard layout"));
    let att: Vec<f64> = r.attractors.a.iter().copied().collect();
    dump.push("attractors", r.attractors.a.shape(), &att);
    dump.write(a.out.join("separation.bin"))?;
    write_text(
        &a.out.join("separate_config.txt"),
        &echo(&[
            ("model", a.model.display().to_string()),
            ("in", a.input.display().to_string()),
            ("speakers", a.speakers.to_string()),
            ("strategy", strategy.to_string()),
            ("codebook", a.codebook.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("refs", a.refs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" ")),
            ("seed", a.seed.to_string()),
        ]),
    )?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let strategy = parse_strategy(&a.strategy)?;
    let split = parse_split(&a.split)?;
    if strategy == Strategy::Fixed && a.codebook.is_none() {
        return usage("--strategy fixed needs --codebook");
    }
    refuse_existing(&a.report, a.force)?;
    let model = load_checkpoint(&a.model)?;
    let ds = Dataset::open(&a.data)?;
    let codebook = a.codebook.as_ref().map(AttractorCodebook::load).transpose()?;
    let report = eval::evaluate_model(&model, &ds, split, strategy, codebook.as_ref(), a.seed)?;
    ensure_parent(&a.report)?;
    report.write_csv(&a.report)?;
    write_text(
        &sidecar(&a.report, ".config.txt"),
        &echo(&[
            ("model", a.model.display().to_string()),
            ("data", a.data.display().to_string()),
            ("strategy", strategy.to_string()),
            ("codebook", a.codebook.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("split", split.to_string()),
            ("seed", a.seed.to_string()),
        ]),
    )?;
    let g = report.aggregate;
    println!(
        "GNSDR {:.2} dB  GSIR {:.2} dB  GSAR {:.2} dB  mean SI-SNR {:.2} dB over {} mixtures",
        g.gnsdr, g.gsir, g.gsar, g.mean_si_snr, g.n_mixtures
    );
    Ok(())
}

fn inspect_cmd(a: &InspectArgs) -> CliResult<()> {
    let strategy = parse_strategy(&a.strategy)?;
    if strategy == Strategy::Fixed {
        return usage("inspect-attractors takes --strategy oracle or kmeans");
    }
    let split = parse_split(&a.split)?;
    refuse_existing(&a.out, a.force)?;
    let model = load_checkpoint(&a.model)?;
    let ds = Dataset::open(&a.data)?;
    let pop = eval::attractor_population(&model, &ds, split, strategy, a.seed)?;
    let (csv, pca) = eval::attractor_population_csv(&pop)?;
    ensure_parent(&a.out)?;
    write_text(&a.out, &csv)?;
    if let Some(path) = &a.embedding {
        let entry = ds
            .manifest
            .split(split)
            .next()
            .ok_or_else(|| Error::invalid(format!("{split} split is empty")))?;
        let rec = ds.record(entry)?;
        let emb = infer::embed(&model, &rec.mixture)?;
        let spec = crate::data::record_spectra(&rec)?;
        let mags = ndarray::Array3::from_shape_fn(
            (spec.mixture.n_freq(), spec.mixture.n_frames(), rec.n_sources()),
            |(f, t, c)| spec.sources[c].bins[[f, t]].norm(),
        );
        let y = crate::data::membership(&mags);
        let bins_pca = eval::pca_project(emb.v.v.view())?;
        let att = &pop.iter().find(|(id, _)| *id == entry.id).expect("population covers split").1;
        ensure_parent(path)?;
        eval::export_embedding_csv(emb.v.v.view(), &y, att, &bins_pca, path)?;
    }
    write_text(
        &sidecar(&a.out, ".config.txt"),
        &echo(&[
            ("model", a.model.display().to_string()),
            ("data", a.data.display().to_string()),
            ("strategy", strategy.to_string()),
            ("split", split.to_string()),
            ("seed", a.seed.to_string()),
            (
                "explained_variance",
                pca.explained_variance.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
            ),
        ]),
    )?;
    Ok(())
}

fn codebook_cmd(a: &CodebookArgs) -> CliResult<()> {
    if a.clusters == 0 {
        return usage("--clusters must be at least 1");
    }
    refuse_existing(&a.out, a.force)?;
    let model = load_checkpoint(&a.model)?;
    let ds = Dataset::open(&a.data)?;
    let cb = infer::build_codebook(&model, &ds, a.clusters, a.seed)?;
    ensure_parent(&a.out)?;
    cb.save(&a.out)?;
    write_text(
        &sidecar(&a.out, ".config.txt"),
        &echo(&[
            ("model", a.model.display().to_string()),
            ("data", a.data.display().to_string()),
            ("clusters", a.clusters.to_string()),
            ("seed", a.seed.to_string()),
        ]),
    )?;
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Separate(a) => separate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::InspectAttractors(a) => inspect_cmd(a),
        Command::Codebook(a) => codebook_cmd(a),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_and_unknown_rejected() {
        let cli = Cli::try_parse_from([
            "danet", "synth", "--out", "d", "--speakers", "3", "--snr-lo", "-5", "--snr-hi", "5",
        ])
        .unwrap();
        match cli.command {
            Command::Synth(a) => {
                assert_eq!(a.speakers, 3);
                assert_eq!(a.snr_lo, -5.0);
                assert_eq!(a.chunk_len, 100);
            }
            _ => panic!("wrong command"),
        }
        assert!(Cli::try_parse_from(["danet", "synth", "--out", "d", "--bogus"]).is_err());
        let cli = Cli::try_parse_from([
            "danet", "separate", "--model", "m", "--in", "x.wav", "--out", "o", "--strategy", "oracle", "--refs", "a.wav",
            "b.wav",
        ])
        .unwrap();
        match cli.command {
            Command::Separate(a) => assert_eq!(a.refs.len(), 2),
            _ => panic!("wrong command"),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["danet", "nonsense"]), EXIT_USAGE);
        assert_eq!(run(["danet", "--help"]), EXIT_OK);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing");
        let out = dir.path().join("m.ckpt");
        let code = run([
            "danet".as_ref(),
            "train".as_ref(),
            "--data".as_ref(),
            missing.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, EXIT_RUNTIME);
        let bad = dir.path().join("bad.cfg");
        std::fs::write(&bad, "nope = 1\n").unwrap();
        let code = run([
            "danet".as_ref(),
            "train".as_ref(),
            "--data".as_ref(),
            missing.as_os_str(),
            "--config".as_ref(),
            bad.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, EXIT_USAGE);
    }
}
