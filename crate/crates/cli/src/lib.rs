//! `redimnet` command line: model inspection, embedding extraction, trial
//! scoring, evaluation and training.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use redimnet_core::audio::read_wav;
use redimnet_core::io::TrainState;
use redimnet_core::metrics::{self, asnorm, cosine_score, eer, min_dcf, DcfParams, ScoreLine};
use redimnet_core::model::frames_for_two_seconds;
use redimnet_core::train::{self, embed_waves, make_toy_corpus, pair_report, LogRecord};
use redimnet_core::{
    Checkpoint, ClassifierHead, Config, EmbeddingStore, Error, FeatureExtractor, Float, Model, Module, Result, ScoreSet,
    Stage,
};

#[derive(Debug, Parser)]
#[command(name = "redimnet", version, about = "ReDimNet speaker embeddings")]
pub struct Cli {
    /// Seed for anything random; overrides `train.seed` when training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Element type used for model computation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Worker threads. Computation is single-threaded, so only 1 changes nothing.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the stage shape table, parameter count and MACs for 2 s of audio.
    Info {
        #[arg(long)]
        config: PathBuf,
    },
    /// Embed every utterance of a list of WAV files.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One utterance per line: `<path>` or `<id> <path>`. Relative paths
        /// resolve against the list's directory.
        #[arg(long)]
        wav_list: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-score trials, with adaptive s-normalization when a cohort is given.
    Score {
        #[arg(long)]
        enroll_store: PathBuf,
        #[arg(long)]
        test_store: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cohort_store: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        topk: usize,
    },
    /// Print EER and minDCF(0.01) of a score file against its trial list.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Pretrain)]
        stage: StageArg,
        /// `toy` for the synthetic corpus, otherwise a directory with one
        /// subdirectory of WAV files per speaker.
        #[arg(long, default_value = "toy")]
        data: String,
        /// Final checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from; required for the lm stage.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Line-delimited JSON metrics log; defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Pretrain,
    Lm,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "redimnet: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match (&cli.command, cli.precision) {
        (Command::Info { config }, _) => info(config, out),
        (Command::Extract { checkpoint, wav_list, out: dest }, Precision::F32) => extract::<f32>(checkpoint, wav_list, dest, out),
        (Command::Extract { checkpoint, wav_list, out: dest }, Precision::F64) => extract::<f64>(checkpoint, wav_list, dest, out),
        (Command::Score { enroll_store, test_store, trials, out: dest, cohort_store, topk }, _) => {
            score(enroll_store, test_store, trials, dest, cohort_store.as_deref(), *topk, out)
        }
        (Command::Eval { scores, trials }, _) => evaluate(scores, trials, out),
        (Command::Train { .. }, Precision::F32) => train_cmd::<f32>(cli, out),
        (Command::Train { .. }, Precision::F64) => train_cmd::<f64>(cli, out),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

fn info(path: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = Config::load(path)?;
    let m = &cfg.model;
    let t = frames_for_two_seconds();
    let rows = m.stage_shapes()?;
    writeln!(out, "stage  in (C x F)   S_f  out (C x F)  C*F     volume (T={t})")?;
    writeln!(out, "{:<6} {:<12} {:<4} {:<12} {:<7} {}", "stem", format!("1 x {}", m.f), 1, format!("{} x {}", m.c, m.f), m.c * m.f, m.c * m.f * t)?;
    for r in &rows {
        writeln!(
            out,
            "{:<6} {:<12} {:<4} {:<12} {:<7} {}",
            r.stage,
            format!("{} x {}", r.in_channels, r.in_freq),
            r.sf,
            format!("{} x {}", r.out_channels, r.out_freq),
            r.out_channels * r.out_freq,
            r.volume(t)
        )?;
    }
    let model = Model::<f32>::build(m, cfg.train.seed)?;
    let params = model.count_params();
    let macs = model.count_macs(2.0)?;
    writeln!(out, "params {params} ({:.3} M)", params as f64 / 1e6)?;
    writeln!(out, "MACs (2 s) {macs} ({:.3} G)", macs as f64 / 1e9)?;
    Ok(())
}

fn read_wav_list(list: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = std::fs::read_to_string(list).map_err(|e| io_err(list, e))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (id, p) = match fields.as_slice() {
            [] => continue,
            [p] => (Path::new(p).file_stem().unwrap_or_default().to_string_lossy().into_owned(), *p),
            [id, p] => (id.to_string(), *p),
            _ => return Err(Error::Input(format!("{}:{}: expected `<path>` or `<id> <path>`", list.display(), no + 1))),
        };
        let p = Path::new(p);
        entries.push((id, if p.is_absolute() { p.to_path_buf() } else { base.join(p) }));
    }
    Ok(entries)
}

fn extract<T: Float>(checkpoint: &Path, list: &Path, dest: &Path, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model: Model<T> = ck.model()?;
    let fx = FeatureExtractor::new(ck.meta.features.clone())?;
    let mut store = EmbeddingStore::new(ck.meta.model.embedding_dim);
    for (id, path) in read_wav_list(list)? {
        let wave = read_wav(&path)?;
        let emb = embed_waves(&model, &fx, std::slice::from_ref(&wave.samples))
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        store.insert(id, emb.into_iter().next().expect("one wave"))?;
    }
    store.save(dest)?;
    writeln!(out, "wrote {} embeddings of dim {} to {}", store.len(), store.dim(), dest.display())?;
    Ok(())
}

fn score(
    enroll: &Path,
    test: &Path,
    trials: &Path,
    dest: &Path,
    cohort: Option<&Path>,
    topk: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let cohort = cohort.map(EmbeddingStore::load).transpose()?;
    if let Some(c) = &cohort {
        if topk > c.len() || topk < 2 {
            return Err(Error::Config(format!("--topk {topk} must lie in [2, {}] (the cohort size)", c.len())));
        }
    }
    let (enroll, test) = (EmbeddingStore::load(enroll)?, EmbeddingStore::load(test)?);
    let trials = metrics::read_trials(trials)?;
    let mut pairs = Vec::with_capacity(trials.len());
    for t in &trials {
        pairs.push((enroll.require(&t.enroll)?, test.require(&t.test)?));
    }
    let raw = pairs.iter().map(|(e, t)| cosine_score(e, t)).collect::<Result<Vec<_>>>()?;
    let scores = match &cohort {
        Some(c) => asnorm(&raw, &pairs, c.vectors(), topk)?,
        None => raw,
    };
    let lines: Vec<ScoreLine> = trials
        .iter()
        .zip(&scores)
        .map(|(t, &score)| ScoreLine { enroll: t.enroll.clone(), test: t.test.clone(), score })
        .collect();
    metrics::write_scores(dest, &lines)?;
    let how = if cohort.is_some() { format!("AS-Norm top-{topk}") } else { "raw cosine".to_string() };
    writeln!(out, "wrote {} {how} scores to {}", lines.len(), dest.display())?;
    Ok(())
}

fn evaluate(scores: &Path, trials: &Path, out: &mut dyn Write) -> Result<()> {
    let scores = metrics::read_scores(scores)?;
    let trials = metrics::read_trials(trials)?;
    if scores.len() != trials.len() {
        return Err(Error::Input(format!("{} scores for {} trials", scores.len(), trials.len())));
    }
    for (i, (s, t)) in scores.iter().zip(&trials).enumerate() {
        if s.enroll != t.enroll || s.test != t.test {
            return Err(Error::Input(format!(
                "line {}: score is for {} {} but the trial is {} {}",
                i + 1,
                s.enroll,
                s.test,
                t.enroll,
                t.test
            )));
        }
    }
    let set = ScoreSet::new(trials.iter().map(|t| t.target).collect(), scores.iter().map(|s| s.score).collect())?;
    writeln!(out, "EER {:.4}% minDCF {:.4}", 100.0 * eer(&set)?, min_dcf(&set, DcfParams::default())?)?;
    Ok(())
}

fn train_cmd<T: Float>(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let Command::Train { config, stage, data, out: dest, init, log, epochs } = &cli.command else {
        unreachable!("dispatched on the train command")
    };
    let mut cfg = Config::load(config)?;
    cfg.train.stage = match stage {
        StageArg::Pretrain => Stage::Pretrain,
        StageArg::Lm => Stage::Lm,
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = *e;
    }
    cfg.validate()?;
    if cfg.train.stage == Stage::Lm && init.is_none() {
        return Err(Error::Usage("the lm stage needs --init <checkpoint> from pretraining".into()));
    }
    let tc = &cfg.train;

    let mut held_out = None;
    let dataset = if data == "toy" {
        let corpus = make_toy_corpus(tc.toy.speakers, tc.toy.utterances, tc.toy.seconds, tc.seed)?;
        let (train_idx, held_idx) = corpus.split(tc.toy.held_out)?;
        held_out = Some(train::Dataset::from_toy(&corpus, &held_idx));
        train::Dataset::from_toy(&corpus, &train_idx)
    } else {
        train::Dataset::from_dir(Path::new(data))?
    };
    let classes = dataset.classes(tc);

    let (model, head): (Model<T>, ClassifierHead<T>) = match init {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.meta.model != cfg.model {
                return Err(Error::Config(format!("{}: checkpoint model differs from [model] in the config", p.display())));
            }
            let model = ck.model()?;
            let reuse = ck.classifier::<T>()?.filter(|h| {
                h.cfg.kind == cfg.loss.kind && h.cfg.subcenters == cfg.loss.subcenters && h.n_classes >= classes
            });
            let head = match reuse {
                Some(mut h) => {
                    h.cfg = cfg.loss.clone();
                    h
                }
                None => ClassifierHead::new(&cfg.loss, classes, cfg.model.embedding_dim, tc.seed.wrapping_add(1))?,
            };
            (model, head)
        }
        None => (
            Model::build(&cfg.model, tc.seed)?,
            ClassifierHead::new(&cfg.loss, classes, cfg.model.embedding_dim, tc.seed.wrapping_add(1))?,
        ),
    };
    let fx = FeatureExtractor::new(cfg.features.clone())?;
    let log_path = log.clone().unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", dest.display())));
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    writeln!(
        out,
        "training {} stage: {} utterances, {} speakers, {} classes, {} params",
        match tc.stage {
            Stage::Pretrain => "pretrain",
            Stage::Lm => "lm",
        },
        dataset.len(),
        dataset.n_speakers,
        head.n_classes,
        model.param_count()
    )?;
    let state = |epochs| Some(TrainState { stage: tc.stage, epochs, seed: tc.seed });
    train::train(&model, &head, &dataset, tc, &fx, &mut |r| {
        writeln!(log_file, "{}", r.to_json_line())?;
        if let LogRecord::Epoch { epoch, loss, lr, margin, .. } = *r {
            writeln!(out, "epoch {epoch}/{} loss {loss:.4} lr {lr:.4e} margin {margin:.4}", tc.epochs)?;
            if tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0 && epoch < tc.epochs {
                let p = PathBuf::from(format!("{}.epoch{epoch:03}", dest.display()));
                Checkpoint::new(&model, &cfg.features, Some(&head), state(epoch)).save(&p)?;
            }
        }
        Ok(())
    })?;
    log_file.flush()?;
    Checkpoint::new(&model, &cfg.features, Some(&head), state(tc.epochs)).save(dest)?;
    writeln!(out, "wrote {} and {}", dest.display(), log_path.display())?;
    // target trials need at least two held-out utterances per speaker
    if let Some(h) = held_out.filter(|_| tc.toy.held_out >= 2) {
        let emb = embed_waves(&model, &fx, &h.waves)?;
        let r = pair_report(&emb, &h.labels)?;
        writeln!(
            out,
            "held-out: {} trials, EER {:.4}%, mean cosine same speaker {:.4}, different speakers {:.4}",
            r.trials,
            100.0 * r.eer,
            r.mean_intra,
            r.mean_inter
        )?;
    }
    Ok(())
}
