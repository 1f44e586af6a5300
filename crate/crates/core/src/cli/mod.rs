//! The `tsa` command line: corpus synthesis, feature extraction, noise
//! mixing, training, evaluation, the γ sweep and the gradient check.
//!
//! Every command is deterministic under `--seed`. `TSA_NUM_THREADS` bounds
//! the worker pool.

pub mod experiment;
pub mod table;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use experiment::{
    evaluate, run_experiment, run_seed, sweep_gamma, train_on, Corpus, ExperimentSpec, Labelled, NoiseBank, Task,
    GAMMA_GRID,
};
pub use table::{
    gamma_to_tsv, parse_gamma, parse_results, results_to_tsv, GammaRow, ResultRow, CLEAN, GAMMA_HEADER, RESULT_HEADER,
};

use crate::attention::{AttentionConfig, Scenario};
use crate::backbones::{Checkpoint, ModelConfig, SpeakerModel};
use crate::config::KeyValues;
use crate::dataset::{
    extract_all, generate_noise_bundle, generate_synthetic_corpus, Entry, Manifest, NoisePolicy, SyntheticSpeakerSpec,
};
use crate::error::{Error, Result};
use crate::features::{read_wav, write_cache, write_wav, FeatureKind};
use crate::gradcheck::{run_suite, DEFAULT_SEEDS};
use crate::metrics::TrialList;
use crate::noise::{mix, MixSpec, NoiseKind, NoiseManifest, SNR_GRID};
use crate::trainer::{Head, TrainConfig, Trainer};

pub const THREADS_ENV: &str = "TSA_NUM_THREADS";
pub const CHECKPOINT_FILE: &str = "checkpoint.tsam";
pub const METRICS_FILE: &str = "metrics.log";

#[derive(Parser, Debug)]
#[command(name = "tsa", version, about = "Two-stage attention speaker recognition at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `<path> <speaker> <train|test>` per line.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Clip lists under `[noise]`, `[music]`, `[speech]`.
    #[arg(long, global = true)]
    pub noise_manifest: Option<PathBuf>,
    /// One SNR or a comma-separated list, in dB.
    #[arg(long, global = true)]
    pub snr: Option<String>,
    /// none, time, freq, ft, tf or parallel.
    #[arg(long, global = true)]
    pub scenario: Option<Scenario>,
    /// Frequency-branch weight of the parallel scenario.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic speaker corpus and a noise bundle.
    Synth {
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        #[arg(long, default_value_t = 50)]
        utts: usize,
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
    },
    /// Extract features of every manifest entry into cache files.
    Features {
        #[arg(long, default_value = "logmel40")]
        kind: FeatureKind,
    },
    /// Mix every manifest entry with noise, writing new WAVs and a manifest.
    Mix {
        #[arg(long)]
        noise: NoiseKind,
    },
    /// Train a model from a config file.
    Train,
    /// Score the test split; one TSV row per (noise, SNR).
    Eval {
        #[arg(long, default_value = "identify")]
        task: Task,
        /// Noise kind; omitted means clean audio.
        #[arg(long)]
        noise: Option<NoiseKind>,
        /// Defaults to `trials.txt` beside the manifest.
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Train and score the parallel scenario for γ in {0, 0.2, ..., 1}.
    SweepGamma {
        #[arg(long, default_value = "verify")]
        task: Task,
        #[arg(long, default_value = "babble")]
        noise: NoiseKind,
        #[arg(long, default_value = "trials.txt")]
        trials: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
    },
}

/// Sizes the global worker pool from `TSA_NUM_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("this command needs --{flag}")))
}

pub fn parse_snrs(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("bad SNR {s:?}")))
        })
        .collect()
}

fn noise_bank(c: &Common, seed: u64) -> Result<NoiseBank> {
    Ok(match &c.noise_manifest {
        Some(p) => NoiseBank::Files(NoiseManifest::load(p)?),
        None => NoiseBank::Synthetic(seed),
    })
}

/// Writes to `--out` when given, otherwise to `stdout`.
fn emit(c: &Common, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match &c.out {
        Some(p) => std::fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Path of `p` relative to `base`, or its file name.
fn relative(p: &Path, base: &Path) -> PathBuf {
    p.strip_prefix(base)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| PathBuf::from(p.file_name().unwrap_or_default()))
}

fn manifest_dir(p: &Path) -> &Path {
    p.parent().unwrap_or(Path::new(""))
}

/// Config from `--config` with command-line overrides applied.
fn load_config(c: &Common) -> Result<KeyValues> {
    let mut kv = match &c.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    if let Some(s) = c.seed {
        kv.set("train.seed", s);
    }
    if let Some(s) = c.scenario {
        kv.set("model.attention.scenario", s);
    }
    if let Some(g) = c.gamma {
        kv.set("model.attention.gamma", g);
    }
    Ok(kv)
}

fn augment_kind(kv: &KeyValues) -> Result<Option<NoiseKind>> {
    match kv.raw("data.augment") {
        None | Some("none") => Ok(None),
        Some(k) => Ok(Some(k.parse()?)),
    }
}

/// Scoring head for a checkpoint written by the trainer.
pub fn head_of(meta: &KeyValues) -> Result<Head> {
    let done: Option<usize> = meta.get("state.epochs_done")?;
    let ce: Option<usize> = meta.get("train.epochs")?;
    Ok(match (done, ce) {
        (Some(d), Some(e)) if d > e => Head::Cosine,
        _ => Head::Softmax,
    })
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let c = &cli.common;
    let seed = c.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth {
            speakers,
            utts,
            duration,
        } => {
            let out = need(&c.out, "out")?;
            let spec = SyntheticSpeakerSpec::new(*speakers, *utts, *duration, seed)?;
            let m = generate_synthetic_corpus(&spec, out)?;
            generate_noise_bundle(out, seed)?;
            writeln!(
                stdout,
                "wrote {} utterances of {} speakers to {}",
                m.entries.len(),
                speakers,
                out.display()
            )?;
        }
        Command::Features { kind } => {
            let (mpath, out) = (need(&c.manifest, "manifest")?, need(&c.out, "out")?);
            let manifest = Manifest::load(mpath)?;
            let base = manifest_dir(mpath);
            let entries = manifest
                .entries
                .par_iter()
                .map(|e| -> Result<Entry> {
                    let feat = kind.extract(&read_wav(&e.path)?)?;
                    let rel = relative(&e.path, base).with_extension("feat");
                    let path = out.join(&rel);
                    if let Some(d) = path.parent() {
                        std::fs::create_dir_all(d)?;
                    }
                    write_cache(&path, &feat)?;
                    Ok(Entry { path, ..e.clone() })
                })
                .collect::<Result<Vec<_>>>()?;
            std::fs::create_dir_all(out)?;
            Manifest { entries }.save(&out.join("features.txt"))?;
            writeln!(stdout, "wrote {} {kind} caches to {}", manifest.entries.len(), out.display())?;
        }
        Command::Mix { noise } => {
            let (mpath, out) = (need(&c.manifest, "manifest")?, need(&c.out, "out")?);
            let manifest = Manifest::load(mpath)?;
            let source = noise_bank(c, seed)?.source(*noise)?;
            let fixed = c.snr.as_deref().map(parse_snrs).transpose()?;
            let snr = match fixed.as_deref() {
                None => None,
                Some([s]) => Some(*s),
                Some(_) => return Err(Error::Config("mix takes a single --snr".into())),
            };
            let base = manifest_dir(mpath);
            let entries = manifest
                .entries
                .par_iter()
                .enumerate()
                .map(|(i, e)| -> Result<Entry> {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    let mut spec = MixSpec::training(*noise, &mut rng);
                    if let Some(s) = snr {
                        spec = MixSpec::new(s, *noise, spec.rng_seed)?;
                    }
                    let mixed = mix(&read_wav(&e.path)?, &source, &spec)?;
                    let path = out.join(relative(&e.path, base));
                    if let Some(d) = path.parent() {
                        std::fs::create_dir_all(d)?;
                    }
                    write_wav(&path, &mixed)?;
                    Ok(Entry { path, ..e.clone() })
                })
                .collect::<Result<Vec<_>>>()?;
            std::fs::create_dir_all(out)?;
            Manifest { entries }.save(&out.join("manifest.txt"))?;
            let trials = base.join("trials.txt");
            if trials.exists() {
                std::fs::copy(&trials, out.join("trials.txt"))?;
            }
            writeln!(stdout, "mixed {} utterances with {noise} noise into {}", manifest.entries.len(), out.display())?;
        }
        Command::Train => cmd_train(c, stdout)?,
        Command::Eval { task, noise, trials } => {
            let (mpath, ckpath) = (need(&c.manifest, "manifest")?, need(&c.checkpoint, "checkpoint")?);
            let ck = Checkpoint::load(ckpath)?;
            let head = head_of(&ck.meta)?;
            let model = SpeakerModel::from_checkpoint(&ck)?.0;
            let trials = match task {
                Task::Identify => None,
                Task::Verify => {
                    let p = trials.clone().unwrap_or_else(|| manifest_dir(mpath).join("trials.txt"));
                    Some(TrialList::load(&p)?)
                }
            };
            let corpus = Corpus::load(&Manifest::load(mpath)?, trials)?;
            let rows = match noise {
                None => vec![evaluate(&model, head, &corpus, None, *task, seed)?],
                Some(kind) => {
                    let source = noise_bank(c, seed)?.source(*kind)?;
                    let snrs = c.snr.as_deref().map(parse_snrs).transpose()?.unwrap_or(SNR_GRID.to_vec());
                    snrs.iter()
                        .map(|&s| evaluate(&model, head, &corpus, Some((&source, s)), *task, seed))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            emit(c, &results_to_tsv(&rows), stdout)?;
        }
        Command::SweepGamma { task, noise, trials } => {
            let kv = load_config(c)?;
            let corpus = match &c.manifest {
                Some(p) => {
                    let t = match task {
                        Task::Identify => None,
                        Task::Verify => Some(TrialList::load(&manifest_dir(p).join(trials))?),
                    };
                    Corpus::load(&Manifest::load(p)?, t)?
                }
                None => Corpus::synthetic(&SyntheticSpeakerSpec::new(
                    kv.get_or("synth.speakers", 8)?,
                    kv.get_or("synth.utts", 50)?,
                    kv.get_or("synth.duration", 2.0)?,
                    kv.get_or("synth.seed", seed)?,
                )?)?,
            };
            let mut model_kv = kv.clone();
            if !model_kv.contains("model.n_speakers") {
                model_kv.set("model.n_speakers", corpus.n_speakers());
            }
            let model = ModelConfig::from_kv(&model_kv)?;
            let spec = ExperimentSpec {
                model: ModelConfig {
                    attention: AttentionConfig::parallel(0.5)?.with_bottleneck(model.attention.bottleneck)?,
                    ..model
                },
                train: TrainConfig::from_kv(&kv)?,
                augment: augment_kind(&kv)?,
                noise: Some(*noise),
                snrs: c.snr.as_deref().map(parse_snrs).transpose()?.unwrap_or(vec![0.0]),
                seeds: vec![kv.get_or("train.seed", seed)?],
                task: *task,
            };
            let rows = sweep_gamma(&spec, &corpus, &noise_bank(c, seed)?)?;
            emit(c, &gamma_to_tsv(&rows), stdout)?;
        }
        Command::Gradcheck { seeds } => {
            let reports = run_suite(seed, *seeds)?;
            let mut text = String::from("op\tseeds\telements\tmax_rel_err\tone_sided\tpassed\n");
            for r in &reports {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{:e}\t{}\t{}\n",
                    r.name,
                    r.seeds,
                    r.elements,
                    r.max_rel_err,
                    r.one_sided,
                    r.passed()
                ));
            }
            emit(c, &text, stdout)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
            if !failed.is_empty() {
                return Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn cmd_train(c: &Common, stdout: &mut dyn Write) -> Result<()> {
    let (mpath, out) = (need(&c.manifest, "manifest")?, need(&c.out, "out")?);
    let manifest = Manifest::load(mpath)?;
    let corpus = Corpus::load(&manifest, None)?;
    let (mut trainer, augment) = match &c.checkpoint {
        Some(p) => {
            if c.config.is_some() || c.scenario.is_some() || c.gamma.is_some() || c.seed.is_some() {
                return Err(Error::Config(
                    "--checkpoint resumes with the checkpoint's own settings; drop --config, --seed, --scenario and --gamma".into(),
                ));
            }
            let ck = Checkpoint::load(p)?;
            (Trainer::resume(&ck)?, augment_kind(&ck.meta)?)
        }
        None => {
            let mut kv = load_config(c)?;
            if let Some(s) = c.seed {
                kv.set("model.init_seed", s);
            }
            if !kv.contains("model.n_speakers") {
                kv.set("model.n_speakers", corpus.n_speakers());
            }
            let model = ModelConfig::from_kv(&kv)?;
            if model.n_speakers != corpus.n_speakers() {
                return Err(Error::Config(format!(
                    "model.n_speakers = {} but the manifest has {} speakers",
                    model.n_speakers,
                    corpus.n_speakers()
                )));
            }
            let model = SpeakerModel::new(model)?;
            let cfg = TrainConfig::from_kv(&kv)?;
            if let Some(f) = model.fixed_frames().filter(|&f| f != cfg.crop_frames) {
                return Err(Error::Config(format!(
                    "this model takes exactly {f} frames; set train.crop_frames = {f}"
                )));
            }
            (Trainer::new(model, cfg)?, augment_kind(&kv)?)
        }
    };
    let seed = trainer.config().seed;
    let policy = match augment {
        Some(k) => NoisePolicy::Augment {
            source: noise_bank(c, seed)?.source(k)?,
        },
        None => NoisePolicy::Clean,
    };
    let kind = trainer.model().config().backbone.feature_kind();
    let data = Arc::new(extract_all(&corpus.train, kind, &policy, seed)?);
    std::fs::create_dir_all(out)?;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(METRICS_FILE))?;
    trainer.fit(&data, |t, line| {
        writeln!(log, "{line}")?;
        writeln!(stdout, "{line}")?;
        let mut ck = t.checkpoint();
        ck.meta.set("data.augment", augment.map_or("none".to_string(), |k| k.to_string()));
        ck.save(&out.join(CHECKPOINT_FILE))
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_lists() {
        assert_eq!(parse_snrs("0").unwrap(), vec![0.0]);
        assert_eq!(parse_snrs("0, 5,20").unwrap(), vec![0.0, 5.0, 20.0]);
        assert!(parse_snrs("inf").is_err());
        assert!(parse_snrs("0,,5").is_err());
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "tsa", "eval", "--task", "verify", "--snr", "0", "--noise", "babble", "--manifest", "m.txt",
        ])
        .unwrap();
        assert!(matches!(
            cli.command,
            Command::Eval {
                task: Task::Verify,
                noise: Some(NoiseKind::Babble),
                ..
            }
        ));
        assert_eq!(cli.common.snr.as_deref(), Some("0"));
        let cli = Cli::try_parse_from(["tsa", "--seed", "3", "train", "--scenario", "ft"]).unwrap();
        assert_eq!(cli.common.seed, Some(3));
        assert_eq!(cli.common.scenario, Some(Scenario::FreqTime));
        assert!(Cli::try_parse_from(["tsa", "eval", "--noise", "rain"]).is_err());
    }

    #[test]
    fn checkpoint_head() {
        let mut kv = KeyValues::new();
        assert_eq!(head_of(&kv).unwrap(), Head::Softmax);
        kv.set("train.epochs", 2);
        kv.set("state.epochs_done", 2);
        assert_eq!(head_of(&kv).unwrap(), Head::Softmax);
        kv.set("state.epochs_done", 3);
        assert_eq!(head_of(&kv).unwrap(), Head::Cosine);
    }
}
