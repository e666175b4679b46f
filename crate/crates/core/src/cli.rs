//! The `sctse` command line. Each subcommand runs one pipeline stage.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::corpus::{build_corpus, Corpus, Split, MANIFEST_FILE};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::losses::{build_centroid_bank, CentroidBank};
use crate::model::{Architecture, SpeakerEncoderParams};
use crate::train::{
    average_checkpoints, checkpoint_file_name, gradient_battery, pretrain_encoder, speaker_groups,
    train_run, write_outcome, Checkpoint, ConsistencyMode, EncoderMode, TrainSetup, BATTERY_SEEDS,
    BATTERY_TOLERANCE,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const COMPARISON_FILE: &str = "comparison.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(
    name = "sctse",
    version,
    about = "Target speaker extraction with speaker-consistency losses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise the corpus and write its manifest.
    GenData(ConfigArgs),
    /// Pretrain the reference speaker encoder on the training speakers.
    PretrainEncoder(ConfigArgs),
    /// Average each training speaker's embeddings into a centroid bank.
    BuildCentroids {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Train the separator. The flags select the ablation cell.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "frozen")]
        encoder_mode: EncoderMode,
        #[arg(long, default_value = "none")]
        consistency: ConsistencyMode,
        #[arg(long, value_enum, default_value = "off")]
        cls: Toggle,
        /// Pretrained encoder checkpoint (frozen mode).
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Centroid bank file (frozen centroid mode). Built on the fly when omitted.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Run directory; defaults to `<out>/runs/<cell>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Average the last checkpoints of a run and score the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory holding `epochNNN.ckpt` files.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Explicit checkpoints to average instead of the run's last K.
        checkpoints: Vec<PathBuf>,
        /// How many trailing checkpoints to average; defaults to `train.checkpoint_avg_k`.
        #[arg(long)]
        k: Option<usize>,
        /// Scorer for the similarity column; defaults to the pretrained encoder.
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Report directory; defaults to the run directory.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and of the composite objective.
    Gradcheck(ConfigArgs),
    /// Merge evaluated runs into a comparison table and an ablation delta table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Name of an ablation cell, e.g. `frozen-centroid-cls-on`.
pub fn cell_label(encoder: EncoderMode, consistency: ConsistencyMode, cls: bool) -> String {
    format!(
        "{encoder}-{consistency}-cls-{}",
        if cls { "on" } else { "off" }
    )
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let corpus = Corpus::load(cfg.corpus_dir())?;
    if corpus.hash() != cfg.corpus_hash() {
        return Err(Error::Invalid(format!(
            "corpus at {} has hash {} but the configuration expects {}; rerun gen-data",
            cfg.corpus_dir().display(),
            corpus.hash(),
            cfg.corpus_hash()
        )));
    }
    Ok(corpus)
}

fn load_encoder(path: &Path, cfg: &ExperimentConfig) -> Result<SpeakerEncoderParams> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.snapshot.model != cfg.model {
        return Err(Error::Config(format!(
            "encoder {} was built for a different model configuration",
            path.display()
        )));
    }
    let enc = ckpt.encoder();
    enc.validate(&cfg.model)?;
    Ok(enc)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn gen_data(args: &ConfigArgs, out: &mut String) -> Result<()> {
    let cfg = args.load()?;
    let dir = cfg.corpus_dir();
    let manifest = build_corpus(&cfg.corpus, cfg.seed, &dir)?;
    writeln!(out, "manifest={}", dir.join(MANIFEST_FILE).display()).ok();
    writeln!(out, "seed={}", manifest.master_seed).ok();
    writeln!(out, "corpus_hash={}", manifest.config_hash).ok();
    Ok(())
}

fn pretrain(args: &ConfigArgs, out: &mut String) -> Result<()> {
    let cfg = args.load()?;
    let corpus = load_corpus(&cfg)?;
    let arch = Architecture::new(cfg.model.clone())?;
    let outcome = pretrain_encoder(&corpus, &arch, &cfg.pretrain, |e| {
        eprintln!(
            "pretrain epoch {} loss {:.4} accuracy {:.4}",
            e.epoch, e.mean_loss, e.accuracy
        );
    })?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.encoder_path();
    outcome
        .to_checkpoint(&arch, &cfg.pretrain, &cfg.config_hash())
        .save(&path)?;
    let mut log = String::from("epoch,mean_loss,accuracy\n");
    for h in &outcome.history {
        writeln!(log, "{},{},{}", h.epoch, h.mean_loss, h.accuracy).ok();
    }
    write_file(&cfg.output_dir.join("pretrain_log.csv"), &log)?;
    writeln!(out, "encoder={}", path.display()).ok();
    writeln!(out, "epochs={}", outcome.history.len()).ok();
    writeln!(out, "accuracy={}", outcome.accuracy()).ok();
    Ok(())
}

fn build_centroids(args: &ConfigArgs, encoder: Option<&Path>, out: &mut String) -> Result<()> {
    let cfg = args.load()?;
    let corpus = load_corpus(&cfg)?;
    let arch = Architecture::new(cfg.model.clone())?;
    let enc_path = encoder.map_or_else(|| cfg.encoder_path(), Path::to_path_buf);
    let enc = load_encoder(&enc_path, &cfg)?;
    let bank = build_centroid_bank(&enc, &arch, &speaker_groups(&corpus, Split::Train))?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.bank_path();
    bank.write(&path, &cfg.config_hash())?;
    writeln!(out, "bank={}", path.display()).ok();
    writeln!(out, "speakers={}", bank.len()).ok();
    Ok(())
}

struct TrainArgs<'a> {
    encoder_mode: EncoderMode,
    consistency: ConsistencyMode,
    cls: bool,
    encoder: Option<&'a Path>,
    bank: Option<&'a Path>,
    run_dir: Option<&'a Path>,
}

fn train(args: &ConfigArgs, t: TrainArgs<'_>, out: &mut String) -> Result<()> {
    let mut cfg = args.load()?;
    cfg.train = cfg
        .train
        .clone()
        .with_modes(t.encoder_mode, t.consistency, t.cls);
    cfg.validate()?;
    let corpus = load_corpus(&cfg)?;
    let arch = Architecture::new(cfg.model.clone())?;
    let pretrained = match (t.encoder_mode, t.encoder) {
        (EncoderMode::Frozen, path) => Some(load_encoder(
            &path.map_or_else(|| cfg.encoder_path(), Path::to_path_buf),
            &cfg,
        )?),
        (EncoderMode::Joint, Some(_)) => {
            return Err(Error::Config(
                "joint mode trains its own encoder; drop --encoder".into(),
            ));
        }
        (EncoderMode::Joint, None) => None,
    };
    let bank = match t.bank {
        Some(p) => Some(CentroidBank::read(p)?.0),
        None => None,
    };
    let label = cell_label(t.encoder_mode, t.consistency, t.cls);
    let run_dir = t
        .run_dir
        .map_or_else(|| cfg.runs_dir().join(&label), Path::to_path_buf);
    let hash = cfg.config_hash();
    let setup = TrainSetup {
        arch: &arch,
        cfg: &cfg.train,
        pretrained: pretrained.as_ref(),
        bank: bank.as_ref(),
        config_hash: &hash,
    };
    let outcome = train_run(&corpus, &setup, |ckpt, rows| {
        let n = rows.len().max(1) as f64;
        eprintln!(
            "{label} epoch {} mean total {:.4} mean secs {:.4}",
            ckpt.epoch,
            rows.iter().map(|r| r.total).sum::<f64>() / n,
            rows.iter().map(|r| r.secs_mean).sum::<f64>() / n
        );
    })?;
    write_outcome(&outcome, &run_dir)?;
    writeln!(out, "run={}", run_dir.display()).ok();
    writeln!(out, "label={label}").ok();
    writeln!(out, "checkpoints={}", outcome.checkpoints.len()).ok();
    writeln!(out, "config_hash={hash}").ok();
    Ok(())
}

/// The last `k` epoch checkpoints in `run`, oldest first.
pub fn last_checkpoints(run: &Path, k: usize) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut epoch = 0;
    while run.join(checkpoint_file_name(epoch)).exists() {
        found.push(run.join(checkpoint_file_name(epoch)));
        epoch += 1;
    }
    if found.is_empty() {
        return Err(Error::Io {
            path: run.join(checkpoint_file_name(0)),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no checkpoints in run directory",
            ),
        });
    }
    let skip = found.len().saturating_sub(k);
    Ok(found.split_off(skip))
}

struct EvalArgs<'a> {
    run: Option<&'a Path>,
    checkpoints: &'a [PathBuf],
    k: Option<usize>,
    scorer: Option<&'a Path>,
    split: &'a str,
    threads: usize,
    report_dir: Option<&'a Path>,
}

fn eval(args: &ConfigArgs, e: EvalArgs<'_>, out: &mut String) -> Result<()> {
    let cfg = args.load()?;
    let split = match e.split {
        "test" => Split::Test,
        "valid" => Split::Valid,
        "train" => Split::Train,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let paths = match (e.run, e.checkpoints.is_empty()) {
        (Some(run), true) => last_checkpoints(run, e.k.unwrap_or(cfg.train.checkpoint_avg_k))?,
        (None, false) => e.checkpoints.to_vec(),
        _ => {
            return Err(Error::Config(
                "give either --run or explicit checkpoint paths".into(),
            ))
        }
    };
    let report_dir = match (e.report_dir, e.run) {
        (Some(d), _) | (None, Some(d)) => d.to_path_buf(),
        (None, None) => paths[0].parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let ckpts = paths
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    let averaged = average_checkpoints(&ckpts)?;
    let corpus = load_corpus(&cfg)?;
    let scorer = load_encoder(
        &e.scorer
            .map_or_else(|| cfg.encoder_path(), Path::to_path_buf),
        &cfg,
    )?;
    let opts = EvalOptions {
        threads: e.threads,
        ..EvalOptions::default()
    };
    let mut report = evaluate(&averaged, &corpus, split, &scorer, opts)?;
    report.provenance.label = match &averaged.snapshot.train {
        Some(t) => cell_label(t.encoder_mode, t.consistency_mode, t.cls.enabled),
        None => "untrained".into(),
    };
    report.write(&report_dir)?;
    writeln!(out, "report={}", report_dir.display()).ok();
    writeln!(out, "averaged={}", ckpts.len()).ok();
    out.push_str(&report.summary_text());
    Ok(())
}

fn gradcheck(args: &ConfigArgs, out: &mut String) -> Result<bool> {
    let cfg = args.load()?;
    let seeds: Vec<u64> = BATTERY_SEEDS
        .iter()
        .map(|s| cfg.seed.wrapping_add(*s))
        .collect();
    let checks = gradient_battery(&seeds)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed();
        writeln!(
            out,
            "{} seed={} tensor_error={:.3e} coordinate_error={:.3e} worst={}[{}] {}",
            c.name,
            c.seed,
            c.report.max_tensor_error(),
            c.report.max_rel_error,
            c.report.worst_param,
            c.report.worst_index,
            if c.passed() { "ok" } else { "FAIL" }
        )
        .ok();
    }
    writeln!(
        out,
        "tolerance={BATTERY_TOLERANCE:e} result={}",
        if ok { "pass" } else { "fail" }
    )
    .ok();
    Ok(ok)
}

/// Table of aggregates, one row per run, plus deltas against the first run.
pub fn merge_reports(reports: &[EvalReport]) -> Result<(String, String)> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Invalid("no reports to merge".into()))?;
    if let Some(r) = reports
        .iter()
        .find(|r| r.provenance.corpus_hash != first.provenance.corpus_hash)
    {
        return Err(Error::Invalid(format!(
            "run {} was evaluated on corpus {} but {} on {}",
            r.provenance.label,
            r.provenance.corpus_hash,
            first.provenance.label,
            first.provenance.corpus_hash
        )));
    }
    let mut table = String::from("run,SI_SDR,SI_SDRi,SDR,Acc,Sim,rows,config_hash\n");
    let mut deltas = String::from("run,baseline,dSI_SDR,dSI_SDRi,dSDR,dAcc,dSim\n");
    let b = first.aggregates;
    for r in reports {
        let a = r.aggregates;
        writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            r.provenance.label,
            a.si_sdr_db,
            a.si_sdri_db,
            a.sdr_db,
            a.accuracy_pct,
            a.similarity_pct,
            r.rows.len(),
            r.provenance.config_hash
        )
        .ok();
        writeln!(
            deltas,
            "{},{},{},{},{},{},{}",
            r.provenance.label,
            first.provenance.label,
            a.si_sdr_db - b.si_sdr_db,
            a.si_sdri_db - b.si_sdri_db,
            a.sdr_db - b.sdr_db,
            a.accuracy_pct - b.accuracy_pct,
            a.similarity_pct - b.similarity_pct
        )
        .ok();
    }
    Ok((table, deltas))
}

fn report(runs: &[PathBuf], dir: &Path, out: &mut String) -> Result<()> {
    let reports = runs
        .iter()
        .map(EvalReport::read)
        .collect::<Result<Vec<_>>>()?;
    let (table, deltas) = merge_reports(&reports)?;
    create_dir(dir)?;
    write_file(&dir.join(COMPARISON_FILE), &table)?;
    write_file(&dir.join(ABLATION_FILE), &deltas)?;
    out.push_str(&table);
    Ok(())
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_io() {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

/// What a command printed and how it exited.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub stdout: String,
    pub stderr: String,
    pub code: i32,
}

/// Runs one command. Progress goes straight to stderr; results are returned.
pub fn run_command(cli: &Cli) -> Outcome {
    let mut out = String::new();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, &mut out).map(|_| true),
        Command::PretrainEncoder(a) => pretrain(a, &mut out).map(|_| true),
        Command::BuildCentroids { cfg, encoder } => {
            build_centroids(cfg, encoder.as_deref(), &mut out).map(|_| true)
        }
        Command::Train {
            cfg,
            encoder_mode,
            consistency,
            cls,
            encoder,
            bank,
            run_dir,
        } => train(
            cfg,
            TrainArgs {
                encoder_mode: *encoder_mode,
                consistency: *consistency,
                cls: *cls == Toggle::On,
                encoder: encoder.as_deref(),
                bank: bank.as_deref(),
                run_dir: run_dir.as_deref(),
            },
            &mut out,
        )
        .map(|_| true),
        Command::Eval {
            cfg,
            run,
            checkpoints,
            k,
            scorer,
            split,
            threads,
            report_dir,
        } => eval(
            cfg,
            EvalArgs {
                run: run.as_deref(),
                checkpoints,
                k: *k,
                scorer: scorer.as_deref(),
                split,
                threads: *threads,
                report_dir: report_dir.as_deref(),
            },
            &mut out,
        )
        .map(|_| true),
        Command::Gradcheck(a) => gradcheck(a, &mut out),
        Command::Report { runs, out: dir } => report(runs, dir, &mut out).map(|_| true),
    };
    let (stderr, code) = match result {
        Ok(true) => (String::new(), EXIT_OK),
        Ok(false) => (
            "error: gradient check above tolerance\n".to_string(),
            EXIT_INVALID,
        ),
        Err(e) => (format!("error: {e}\n"), exit_code(&e)),
    };
    Outcome {
        stdout: out,
        stderr,
        code,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run_command(&cli),
        Err(e) if e.use_stderr() => Outcome {
            stdout: String::new(),
            stderr: e.render().to_string(),
            code: EXIT_USAGE,
        },
        Err(e) => Outcome {
            stdout: e.render().to_string(),
            stderr: String::new(),
            code: EXIT_OK,
        },
    }
}
