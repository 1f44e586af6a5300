//! Train-and-evaluate runs over the scenario × noise × SNR grid.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use super::table::{GammaRow, ResultRow, CLEAN};
use crate::attention::AttentionConfig;
use crate::backbones::{ModelConfig, SpeakerModel};
use crate::dataset::{
    extract_all, make_trials, split_waves, synthetic_noise_source, synthetic_utterances, Entry, Manifest,
    NoisePolicy, Split, SyntheticSpeakerSpec,
};
use crate::error::{Error, Result};
use crate::features::{read_wav, Waveform};
use crate::metrics::TrialList;
use crate::noise::{NoiseKind, NoiseManifest, NoiseSource};
use crate::trainer::{identification_top1, verification_eer, Head, TrainConfig, Trainer};

/// γ values of the parallel-scenario sweep.
pub const GAMMA_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Salt separating evaluation mixing from training augmentation.
const EVAL_SALT: u64 = 0x5EED_E7A1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Identify,
    Verify,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Identify => "identify",
            Task::Verify => "verify",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identify" => Ok(Task::Identify),
            "verify" => Ok(Task::Verify),
            other => Err(Error::Config(format!("task must be identify or verify, got {other:?}"))),
        }
    }
}

pub type Labelled = Vec<(Waveform, usize, PathBuf)>;

/// Waveforms of both splits with labels indexing `speakers`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub speakers: Vec<String>,
    pub train: Labelled,
    pub test: Labelled,
    pub trials: Option<TrialList>,
}

impl Corpus {
    /// The synthetic corpus in memory; paths are the relative paths the
    /// `synth` command would write.
    pub fn synthetic(spec: &SyntheticSpeakerSpec) -> Result<Self> {
        let utts = synthetic_utterances(spec)?;
        let manifest = Manifest {
            entries: utts
                .iter()
                .map(|u| Entry {
                    path: u.rel_path(),
                    speaker: u.speaker_id(),
                    split: u.split,
                })
                .collect(),
        };
        Ok(Corpus {
            speakers: manifest.speakers(),
            train: split_waves(&utts, Split::Train),
            test: split_waves(&utts, Split::Test),
            trials: Some(make_trials(&manifest, spec.seed)),
        })
    }

    /// Reads every WAV of a validated manifest.
    pub fn load(manifest: &Manifest, trials: Option<TrialList>) -> Result<Self> {
        manifest.validate()?;
        let speakers = manifest.speakers();
        let read = |split: Split| -> Result<Labelled> {
            let entries: Vec<&Entry> = manifest.split(split).collect();
            entries
                .par_iter()
                .map(|e| {
                    let label = speakers.binary_search(&e.speaker).expect("speaker table");
                    Ok((read_wav(&e.path)?, label, e.path.clone()))
                })
                .collect()
        };
        Ok(Corpus {
            train: read(Split::Train)?,
            test: read(Split::Test)?,
            speakers: speakers.clone(),
            trials,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }
}

/// Where each noise kind comes from.
#[derive(Clone, Debug)]
pub enum NoiseBank {
    /// Generated clips, drawn from this seed.
    Synthetic(u64),
    /// Clips listed in a noise manifest; generator kinds are synthesised.
    Files(NoiseManifest),
}

impl NoiseBank {
    pub fn source(&self, kind: NoiseKind) -> Result<NoiseSource> {
        match self {
            NoiseBank::Synthetic(seed) => synthetic_noise_source(kind, *seed),
            NoiseBank::Files(m) if kind.is_file_backed() => {
                if m.paths(kind)?.is_empty() {
                    return Err(Error::Config(format!("noise manifest lists no clips for {kind}")));
                }
                NoiseSource::load(m, kind)
            }
            NoiseBank::Files(_) => NoiseSource::synthetic(kind),
        }
    }
}

/// One experiment: a model and training recipe, evaluated on the test split
/// under one noise kind at several SNRs, repeated over seeds.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Adds one noisy copy of every training utterance at a random grid SNR.
    pub augment: Option<NoiseKind>,
    /// Evaluation noise; `None` evaluates clean audio.
    pub noise: Option<NoiseKind>,
    pub snrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub task: Task,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("an experiment needs at least one seed".into()));
        }
        if self.noise.is_some() && self.snrs.is_empty() {
            return Err(Error::Config("noisy evaluation needs at least one SNR".into()));
        }
        if self.snrs.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("SNRs must be finite".into()));
        }
        Ok(())
    }

    /// `(noise, snr)` cells in output order.
    fn cells(&self) -> Vec<Option<f64>> {
        match self.noise {
            None => vec![None],
            Some(_) => self.snrs.iter().copied().map(Some).collect(),
        }
    }
}

/// Trains `model` on the corpus' training split; the model's init seed and
/// the shuffling seed are both `seed`.
pub fn train_on(
    corpus: &Corpus,
    model: &ModelConfig,
    train: &TrainConfig,
    augment: Option<NoiseSource>,
    seed: u64,
) -> Result<Trainer> {
    if model.n_speakers != corpus.n_speakers() {
        return Err(Error::Config(format!(
            "model has {} classes but the corpus has {} speakers",
            model.n_speakers,
            corpus.n_speakers()
        )));
    }
    let model = SpeakerModel::new(model.clone().with_seed(seed))?;
    if let Some(f) = model.fixed_frames() {
        if train.crop_frames != f {
            return Err(Error::Config(format!(
                "this model takes exactly {f} frames; set train.crop_frames = {f}"
            )));
        }
    }
    let policy = match augment {
        Some(source) => NoisePolicy::Augment { source },
        None => NoisePolicy::Clean,
    };
    let kind = model.config().backbone.feature_kind();
    let data = Arc::new(extract_all(&corpus.train, kind, &policy, seed)?);
    let cfg = TrainConfig {
        seed,
        ..train.clone()
    };
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.fit(&data, |_, log| {
        log::info!("{log}");
        Ok(())
    })?;
    Ok(trainer)
}

/// Scores the test split, mixed with `noise` at `snr` when given.
pub fn evaluate(
    model: &SpeakerModel,
    head: Head,
    corpus: &Corpus,
    noise: Option<(&NoiseSource, f64)>,
    task: Task,
    seed: u64,
) -> Result<ResultRow> {
    let policy = match noise {
        Some((source, snr_db)) => NoisePolicy::Fixed {
            source: source.clone(),
            snr_db,
        },
        None => NoisePolicy::Clean,
    };
    let kind = model.config().backbone.feature_kind();
    let test = extract_all(&corpus.test, kind, &policy, seed ^ EVAL_SALT)?;
    let top1 = identification_top1(model, &test, head)?;
    let eer = match task {
        Task::Identify => None,
        Task::Verify => {
            let trials = corpus
                .trials
                .as_ref()
                .ok_or_else(|| Error::Config("verification needs a trial list".into()))?;
            Some(verification_eer(model, &test, trials)?)
        }
    };
    Ok(ResultRow {
        noise: noise.map_or(CLEAN.to_string(), |(s, _)| s.kind().to_string()),
        snr: noise.map(|(_, snr)| snr),
        top1: Some(top1),
        eer,
    })
}

/// Rows of one seed, in SNR order.
pub fn run_seed(spec: &ExperimentSpec, corpus: &Corpus, bank: &NoiseBank, seed: u64) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let augment = spec.augment.map(|k| bank.source(k)).transpose()?;
    let trainer = train_on(corpus, &spec.model, &spec.train, augment, seed)?;
    let source = spec.noise.map(|k| bank.source(k)).transpose()?;
    spec.cells()
        .into_iter()
        .map(|snr| {
            let noise = source.as_ref().zip(snr);
            evaluate(trainer.model(), trainer.head(), corpus, noise, spec.task, seed)
        })
        .collect()
}

/// Per-cell means over the spec's seeds.
pub fn run_experiment(spec: &ExperimentSpec, corpus: &Corpus, bank: &NoiseBank) -> Result<Vec<ResultRow>> {
    let per_seed = spec
        .seeds
        .iter()
        .map(|&s| run_seed(spec, corpus, bank, s))
        .collect::<Result<Vec<_>>>()?;
    let n = per_seed.len() as f64;
    let mean = |f: &dyn Fn(&ResultRow) -> Option<f64>, i: usize| -> Option<f64> {
        per_seed
            .iter()
            .map(|rows| f(&rows[i]))
            .sum::<Option<f64>>()
            .map(|s| s / n)
    };
    Ok((0..per_seed[0].len())
        .map(|i| ResultRow {
            top1: mean(&|r| r.top1, i),
            eer: mean(&|r| r.eer, i),
            ..per_seed[0][i].clone()
        })
        .collect())
}

/// The parallel scenario at every γ of [`GAMMA_GRID`]; other attention
/// settings of `spec.model` are replaced.
pub fn sweep_gamma(spec: &ExperimentSpec, corpus: &Corpus, bank: &NoiseBank) -> Result<Vec<GammaRow>> {
    let mut rows = Vec::new();
    for gamma in GAMMA_GRID {
        let mut s = spec.clone();
        s.model.attention = AttentionConfig::parallel(gamma)?.with_bottleneck(spec.model.attention.bottleneck)?;
        for result in run_experiment(&s, corpus, bank)? {
            rows.push(GammaRow { gamma, result });
        }
    }
    Ok(rows)
}
