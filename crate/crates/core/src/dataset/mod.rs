//! Utterance manifests, feature sets, batching and the synthetic corpus.

mod batch;
mod synth;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use batch::{make_batches, prefetch, Batch, BatchSpec, Batches, Prefetch};
pub use synth::{
    generate_noise_bundle, generate_synthetic_corpus, make_trials, speaker_profile, split_waves, synth_utterance,
    synthetic_noise_clips, synthetic_noise_source, synthetic_utterances, SpeakerProfile, SynthUtterance,
    SyntheticSpeakerSpec, NOISE_CLIPS, NOISE_CLIP_S,
};

use crate::error::{Error, Result};
use crate::features::{read_wav, FeatureKind, FeatureMatrix, Waveform};
use crate::noise::{mix, MixSpec, NoiseSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("split must be train or test, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    pub speaker: String,
    pub split: Split,
}

/// `<path> <speaker_id> <split>` per line; relative paths resolve against
/// the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let base = origin.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [path, speaker, split] = fields.as_slice() else {
                return Err(err("expected `<path> <speaker_id> <split>`".into()));
            };
            entries.push(Entry {
                path: base.join(path),
                speaker: speaker.to_string(),
                split: split.parse().map_err(|e: Error| err(e.to_string()))?,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Manifest text with paths written relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            let _ = writeln!(s, "{} {} {}", p.display(), e.speaker, e.split);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text(path.parent().unwrap_or(Path::new(""))))?;
        Ok(())
    }

    /// Sorted speaker table; a speaker's label is its index here.
    pub fn speakers(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Identification-mode checks: every test speaker has training data and
    /// no file is in both splits.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("manifest is empty".into()));
        }
        let train_spk: HashSet<&str> = self.split(Split::Train).map(|e| e.speaker.as_str()).collect();
        if let Some(e) = self.split(Split::Test).find(|e| !train_spk.contains(e.speaker.as_str())) {
            return Err(Error::Config(format!(
                "test speaker {} has no training utterances",
                e.speaker
            )));
        }
        let train_paths: HashSet<&Path> = self.split(Split::Train).map(|e| e.path.as_path()).collect();
        if let Some(e) = self.split(Split::Test).find(|e| train_paths.contains(e.path.as_path())) {
            return Err(Error::Config(format!(
                "{} appears in both splits",
                e.path.display()
            )));
        }
        Ok(())
    }
}

/// Features of one utterance with its speaker label.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: FeatureMatrix,
    pub label: usize,
    pub path: PathBuf,
}

/// Noise applied while building a feature set.
#[derive(Clone, Debug)]
pub enum NoisePolicy {
    Clean,
    /// Every utterance is mixed at this SNR.
    Fixed { source: NoiseSource, snr_db: f64 },
    /// Each utterance is kept and a noisy copy at a random grid SNR is
    /// added.
    Augment { source: NoiseSource },
}

/// Mixes `w` with per-utterance randomness derived from `(seed, index)`.
fn mixed(w: &Waveform, source: &NoiseSource, snr: Option<f64>, seed: u64, index: usize) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut spec = MixSpec::training(source.kind(), &mut rng);
    if let Some(s) = snr {
        spec = MixSpec::new(s, source.kind(), spec.rng_seed)?;
    }
    mix(w, source, &spec)
}

/// Extracts features for `waves` in parallel; output order matches input.
pub fn extract_all(
    waves: &[(Waveform, usize, PathBuf)],
    kind: FeatureKind,
    noise: &NoisePolicy,
    seed: u64,
) -> Result<Vec<Utterance>> {
    let per_utt = |(i, (w, label, path)): (usize, &(Waveform, usize, PathBuf))| -> Result<Vec<Utterance>> {
        let make = |w: &Waveform| -> Result<Utterance> {
            Ok(Utterance {
                features: kind.extract(w)?,
                label: *label,
                path: path.clone(),
            })
        };
        Ok(match noise {
            NoisePolicy::Clean => vec![make(w)?],
            NoisePolicy::Fixed { source, snr_db } => vec![make(&mixed(w, source, Some(*snr_db), seed, i)?)?],
            NoisePolicy::Augment { source } => vec![make(w)?, make(&mixed(w, source, None, seed, i)?)?],
        })
    };
    let nested = waves
        .par_iter()
        .enumerate()
        .map(per_utt)
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Reads and featurises one split of a manifest; labels index
/// [`Manifest::speakers`].
pub fn load_split(
    manifest: &Manifest,
    split: Split,
    kind: FeatureKind,
    noise: &NoisePolicy,
    seed: u64,
) -> Result<Vec<Utterance>> {
    let speakers = manifest.speakers();
    let entries: Vec<&Entry> = manifest.split(split).collect();
    let waves = entries
        .par_iter()
        .map(|e| {
            let label = speakers.binary_search(&e.speaker).expect("speaker table");
            Ok((read_wav(&e.path)?, label, e.path.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    extract_all(&waves, kind, noise, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parse_validate_round_trip() {
        let text = "# corpus\na/1.wav spk1 train\na/2.wav spk1 test\nb/1.wav spk2 train\n";
        let m = Manifest::parse(text, Path::new("/c/manifest.txt")).unwrap();
        assert_eq!(m.entries[0].path, PathBuf::from("/c/a/1.wav"));
        assert_eq!(m.speakers(), vec!["spk1", "spk2"]);
        m.validate().unwrap();
        assert_eq!(m.to_text(Path::new("/c")), text.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());

        let orphan = Manifest::parse("x spk3 test\ny spk1 train\n", Path::new("m")).unwrap();
        assert!(orphan.validate().is_err());
        let leak = Manifest::parse("x spk1 test\nx spk1 train\n", Path::new("m")).unwrap();
        assert!(leak.validate().unwrap_err().to_string().contains("both splits"));
        assert!(Manifest::parse("x spk1 dev\n", Path::new("m")).is_err());
        assert!(Manifest::default().validate().is_err());
    }
}
