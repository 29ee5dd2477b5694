use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cmp_core::checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint};
use cmp_core::config::RunConfig;
use cmp_core::corpus::{generate_corpus, read_corpus, write_corpus, Corpus, CorpusRecord, Split, TrainPool};
use cmp_core::eval::{retrieve_two_stage, write_rankings_csv, Evaluation, GalleryIndex, Setting};
use cmp_core::model::CmpModel;
use cmp_core::objectives::{train, EpochLoss};
use cmp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cmp", version, about = "Pose-aware text-to-image person anomaly retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for the checkpoint, loss curve and config snapshot.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        ihnm: Option<Switch>,
        #[arg(long)]
        pose: Option<Switch>,
        /// Continue from the checkpoint in the output directory, if any.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in total, keeping the checkpoint resumable.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on a corpus split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        setting: Option<Setting>,
        /// Report path; defaults to `metrics-<setting>.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every query's ranking as CSV.
        #[arg(long)]
        ranks: Option<PathBuf>,
    },
    /// Rank a split's images for one free-text query.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for corpus generation, initialization and training.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Target {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    shortlist_k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        Error::HashMismatch { .. } => 4,
        Error::UnknownTokens(_) => 5,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn check_hash(what: &'static str, expected: String, found: String) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::HashMismatch { what, expected, found })
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn gen_corpus(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    create_dir(out)?;
    write_corpus(out, &corpus)?;
    let r = &corpus.report;
    println!(
        "wrote {} records to {}: train {} normal / {} anomaly, test {} / {}, ratio deviation {:.4}",
        corpus.records.len(),
        out.display(),
        r.train_normal,
        r.train_anomaly,
        r.test_normal,
        r.test_anomaly,
        r.ratio_deviation
    );
    Ok(())
}

struct TrainArgs<'a> {
    common: &'a Common,
    corpus: &'a Path,
    out: &'a Path,
    epochs: Option<usize>,
    ihnm: Option<Switch>,
    pose: Option<Switch>,
    resume: bool,
    stop_after: Option<usize>,
}

fn train_cmd(a: TrainArgs<'_>) -> Result<()> {
    let mut cfg = load_config(a.common)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.ihnm {
        cfg.train.ihnm = s.on();
    }
    if let Some(s) = a.pose {
        cfg.model.pose_enabled = s.on();
    }
    cfg.validate()?;
    let corpus = read_corpus(a.corpus)?;
    check_hash("corpus", cfg.corpus_hash(), corpus.config_hash())?;

    let ckpt_dir = a.out.join("checkpoint");
    let (mut model, resume) = if a.resume && ckpt_dir.join("checkpoint.json").exists() {
        let c = load_checkpoint::<f32>(&ckpt_dir)?;
        check_hash("checkpoint config", cfg.config_hash(), c.config.config_hash())?;
        eprintln!("resuming after epoch {}", c.state.epoch);
        (c.model, Some(c.state))
    } else {
        (CmpModel::<f32>::new(cfg.model_config())?, None)
    };
    create_dir(a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;

    let pool = TrainPool::new(&corpus, cfg.train.data_fraction)?;
    let loss_path = a.out.join("loss.csv");
    let state = train(&mut model, &pool, &cfg.train, resume, |m, s| {
        let e = s.curve.last().expect("one entry per finished epoch");
        eprintln!(
            "epoch {}/{}: l_cl {:.4} l_itm {:.4} l_mlm {:.4} total {:.4} lr {:.2e}",
            e.epoch, cfg.train.epochs, e.l_cl, e.l_itm, e.l_mlm, e.l_total, e.lr
        );
        save_checkpoint(&ckpt_dir, &cfg, m, s)?;
        EpochLoss::write_csv(&loss_path, &s.curve)?;
        Ok(match a.stop_after {
            Some(n) if s.epoch >= n => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        })
    })?;
    save_checkpoint(&ckpt_dir, &cfg, &model, &state)?;
    EpochLoss::write_csv(&loss_path, &state.curve)?;
    println!("checkpoint {} after {} epochs", ckpt_dir.display(), state.epoch);
    Ok(())
}

struct Loaded {
    model: CmpModel<f32>,
    config: RunConfig,
    corpus: Corpus,
}

fn load_target(common: &Common, t: &Target) -> Result<Loaded> {
    let ckpt = load_checkpoint::<f32>(&t.checkpoint)?;
    if common.config.is_some() || common.seed.is_some() {
        let cfg = load_config(common)?;
        check_hash("checkpoint config", cfg.config_hash(), ckpt.config.config_hash())?;
    }
    let corpus = read_corpus(&t.corpus)?;
    check_hash("corpus", ckpt.config.corpus_hash(), corpus.config_hash())?;
    Ok(Loaded { model: ckpt.model, config: ckpt.config, corpus })
}

fn split_records(corpus: &Corpus, split: SplitArg) -> Result<Vec<&CorpusRecord>> {
    let recs: Vec<&CorpusRecord> = corpus.split(split.into()).collect();
    if recs.is_empty() {
        return Err(Error::InvalidArgument { op: "split", msg: "the requested split has no records".into() });
    }
    Ok(recs)
}

fn eval_cmd(common: &Common, t: &Target, setting: Option<Setting>, out: Option<&Path>, ranks: Option<&Path>) -> Result<()> {
    let l = load_target(common, t)?;
    let setting = setting.unwrap_or(l.config.eval.setting);
    let k = t.shortlist_k.unwrap_or(l.config.eval.shortlist_k);
    let recs = split_records(&l.corpus, t.split)?;
    let ev = Evaluation::run(&l.model, &recs, k)?;
    let mut report = ev.report(&recs, setting)?;
    report.checkpoint_hash = Some(checkpoint_digest(&t.checkpoint)?);
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    print!("{text}");
    let default_out;
    let out = match out {
        Some(p) => p,
        None => {
            let name = serde_json::to_value(setting)?;
            let parent = t.checkpoint.parent().unwrap_or(Path::new("."));
            default_out = parent.join(format!("metrics-{}.json", name.as_str().unwrap_or("report")));
            &default_out
        }
    };
    write_text(out, &text)?;
    if let Some(path) = ranks {
        write_rankings_csv(path, &ev.rankings)?;
    }
    Ok(())
}

fn search_cmd(common: &Common, t: &Target, query: &str, top_k: usize) -> Result<()> {
    let l = load_target(common, t)?;
    let text = l.corpus.vocabulary()?.tokenize(query)?;
    let k = t.shortlist_k.unwrap_or(l.config.eval.shortlist_k);
    let recs = split_records(&l.corpus, t.split)?;
    let gallery = GalleryIndex::build(&l.model, &recs)?;
    let ranked = retrieve_two_stage(&l.model, &gallery, &text, k)?;
    println!("rank\trecord_id\tsim\titm_prob");
    for (i, item) in ranked.iter().take(top_k).enumerate() {
        let p = item.itm_prob.map(|p| format!("{p:.6}")).unwrap_or_else(|| "-".into());
        println!("{}\t{}\t{:.6}\t{}", i + 1, item.record_id, item.similarity, p);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus { common, out } => gen_corpus(common, out),
        Command::Train { common, corpus, out, epochs, ihnm, pose, resume, stop_after } => train_cmd(TrainArgs {
            common,
            corpus,
            out,
            epochs: *epochs,
            ihnm: *ihnm,
            pose: *pose,
            resume: *resume,
            stop_after: *stop_after,
        }),
        Command::Eval { common, target, setting, out, ranks } => {
            eval_cmd(common, target, *setting, out.as_deref(), ranks.as_deref())
        }
        Command::Search { common, target, query, top_k } => search_cmd(common, target, query, *top_k),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
