//! Synthetic speakers: a band-limited sawtooth at a speaker-specific pitch
//! through three speaker-specific formant resonators, shaped into
//! syllables separated by pauses.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{Entry, Manifest, Split};
use crate::dsp::{normalize_peak, Biquad, Saw};
use crate::error::{Error, Result};
use crate::features::{write_wav, Waveform, SAMPLE_RATE};
use crate::metrics::{Trial, TrialList};
use crate::noise::{synth_music, NoiseKind, NoiseManifest, NoiseSource};

pub const F0_RANGE: (f64, f64) = (90.0, 280.0);
const FORMANT_RANGES: [(f64, f64); 3] = [(300.0, 850.0), (900.0, 2300.0), (2400.0, 3600.0)];
const FORMANT_BANDWIDTHS: [f64; 3] = [90.0, 120.0, 180.0];
const FORMANT_GAINS: [f64; 3] = [1.0, 0.6, 0.35];
/// Per-syllable pitch deviation, as a fraction of the speaker's pitch.
pub const F0_JITTER: f64 = 0.03;
const DITHER: f64 = 1e-4;
/// Fraction of each speaker's utterances held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpeakerSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl SyntheticSpeakerSpec {
    pub fn new(n_speakers: usize, utts_per_speaker: usize, duration_s: f64, seed: u64) -> Result<Self> {
        let s = SyntheticSpeakerSpec {
            n_speakers,
            utts_per_speaker,
            duration_s,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 speakers".into()));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::Config("utts_per_speaker must be positive".into()));
        }
        if !(self.duration_s >= 0.1) {
            return Err(Error::Config("utterances must last at least 0.1 s".into()));
        }
        Ok(())
    }

    /// Held-out utterances per speaker.
    pub fn test_per_speaker(&self) -> usize {
        if self.utts_per_speaker < 2 {
            return 0;
        }
        ((self.utts_per_speaker as f64 * TEST_FRACTION).round() as usize).max(1)
    }

    pub fn split_of(&self, utt: usize) -> Split {
        if utt >= self.utts_per_speaker - self.test_per_speaker() {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub f0: f64,
    pub formants: [f64; 3],
}

fn stratified(n: usize, (lo, hi): (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(rng);
    let w = (hi - lo) / n as f64;
    strata
        .into_iter()
        .map(|s| lo + w * (s as f64 + rng.gen_range(0.1..0.9)))
        .collect()
}

/// Voice parameters of every speaker. Each parameter is drawn from its own
/// shuffled strata so no two speakers share a stratum.
pub fn speaker_profile(spec: &SyntheticSpeakerSpec) -> Vec<SpeakerProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_speakers;
    let f0 = stratified(n, F0_RANGE, &mut rng);
    let fm: Vec<Vec<f64>> = FORMANT_RANGES.iter().map(|&r| stratified(n, r, &mut rng)).collect();
    (0..n)
        .map(|i| SpeakerProfile {
            f0: f0[i],
            formants: [fm[0][i], fm[1][i], fm[2][i]],
        })
        .collect()
}

/// One utterance of `duration_s` seconds.
pub fn synth_utterance(profile: &SpeakerProfile, duration_s: f64, seed: u64) -> Result<Waveform> {
    let sr = f64::from(SAMPLE_RATE);
    let n = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source = vec![0.0; n];
    let mut saw = Saw::new(rng.gen());
    let mut t = (rng.gen_range(0.03..0.15) * sr) as usize;
    while t < n {
        let len = (rng.gen_range(0.12..0.35) * sr) as usize;
        let f0 = profile.f0 * (1.0 + rng.gen_range(-F0_JITTER..F0_JITTER));
        let amp = rng.gen_range(0.6..1.0);
        for i in 0..len.min(n - t) {
            let env = (PI * i as f64 / len as f64).sin().powi(2);
            let breath: f64 = StandardNormal.sample(&mut rng);
            source[t + i] = amp * env * (saw.next(f0 / sr) + 0.03 * breath);
        }
        t += len + (rng.gen_range(0.04..0.25) * sr) as usize;
    }
    let mut filters: Vec<Biquad> = profile
        .formants
        .iter()
        .zip(FORMANT_BANDWIDTHS)
        .map(|(&f, bw)| Biquad::bandpass(f, f / bw, sr))
        .collect();
    let mut out: Vec<f64> = source
        .iter()
        .map(|&x| {
            filters
                .iter_mut()
                .zip(FORMANT_GAINS)
                .map(|(flt, g)| g * flt.process(x))
                .sum()
        })
        .collect();
    normalize_peak(&mut out, rng.gen_range(0.3..0.9));
    let samples = out
        .into_iter()
        .map(|v| {
            let d: f64 = StandardNormal.sample(&mut rng);
            (v + DITHER * d).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE)
}

/// A generated utterance and its place in the corpus.
#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub speaker: usize,
    pub index: usize,
    pub split: Split,
    pub wave: Waveform,
}

impl SynthUtterance {
    pub fn speaker_id(&self) -> String {
        format!("spk{:03}", self.speaker)
    }

    pub fn rel_path(&self) -> PathBuf {
        PathBuf::from(format!("wav/{}/utt{:03}.wav", self.speaker_id(), self.index))
    }
}

fn utterance_seed(corpus_seed: u64, speaker: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(1 + (speaker as u64) * 100_003 + index as u64);
    rng.gen()
}

/// The whole corpus in memory, speaker-major.
pub fn synthetic_utterances(spec: &SyntheticSpeakerSpec) -> Result<Vec<SynthUtterance>> {
    spec.validate()?;
    let profiles = speaker_profile(spec);
    let jobs: Vec<(usize, usize)> = (0..spec.n_speakers)
        .flat_map(|s| (0..spec.utts_per_speaker).map(move |u| (s, u)))
        .collect();
    jobs.par_iter()
        .map(|&(s, u)| {
            Ok(SynthUtterance {
                speaker: s,
                index: u,
                split: spec.split_of(u),
                wave: synth_utterance(&profiles[s], spec.duration_s, utterance_seed(spec.seed, s, u))?,
            })
        })
        .collect()
}

/// `(wave, label, path)` triples of one split, ready for
/// [`extract_all`](super::extract_all). Labels are speaker indices, which
/// match the sorted speaker table of the written manifest.
pub fn split_waves(utts: &[SynthUtterance], split: Split) -> Vec<(Waveform, usize, PathBuf)> {
    utts.iter()
        .filter(|u| u.split == split)
        .map(|u| (u.wave.clone(), u.speaker, u.rel_path()))
        .collect()
}

/// Same-speaker pairs of test utterances plus as many different-speaker
/// pairs, chosen by `seed`.
pub fn make_trials(manifest: &Manifest, seed: u64) -> TrialList {
    let test: Vec<&Entry> = manifest.split(Split::Test).collect();
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..test.len() {
        for j in i + 1..test.len() {
            let pair = (i, j);
            if test[i].speaker == test[j].speaker {
                same.push(pair);
            } else {
                diff.push(pair);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    diff.shuffle(&mut rng);
    diff.truncate(same.len());
    diff.sort_unstable();
    let trial = |(i, j): (usize, usize), same: bool| Trial {
        same,
        a: test[i].path.clone(),
        b: test[j].path.clone(),
    };
    let mut trials: Vec<Trial> = same.into_iter().map(|p| trial(p, true)).collect();
    trials.extend(diff.into_iter().map(|p| trial(p, false)));
    TrialList { trials }
}

/// Clips per kind in a synthetic noise bundle.
pub const NOISE_CLIPS: usize = 12;
pub const NOISE_CLIP_S: f64 = 6.0;

fn clip_seed(seed: u64, kind: NoiseKind, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xC11F_0000 + 64 * i as u64 + kind as u64);
    rng.gen()
}

/// Stand-in recordings for a file-backed noise kind. `noise` clips are
/// broad band-passed Gaussian noise, `music` clips come from
/// [`synth_music`], and `babble` clips are utterances of synthetic talkers
/// drawn independently of any corpus.
pub fn synthetic_noise_clips(kind: NoiseKind, seed: u64) -> Result<Vec<Waveform>> {
    let sr = f64::from(SAMPLE_RATE);
    let talkers = speaker_profile(&SyntheticSpeakerSpec::new(NOISE_CLIPS, 1, NOISE_CLIP_S, seed ^ 0x7A1C_E25D)?);
    (0..NOISE_CLIPS)
        .into_par_iter()
        .map(|i| {
            let cs = clip_seed(seed, kind, i);
            match kind {
                NoiseKind::GeneralNoise => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cs);
                    let mut bp = Biquad::bandpass(rng.gen_range(150.0..4000.0), 0.7, sr);
                    let n = (NOISE_CLIP_S * sr) as usize;
                    let mut x: Vec<f64> = (0..n)
                        .map(|_| bp.process(StandardNormal.sample(&mut rng)))
                        .collect();
                    normalize_peak(&mut x, 0.9);
                    Waveform::new(x.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE)
                }
                NoiseKind::Music => synth_music(NOISE_CLIP_S, cs),
                NoiseKind::Babble => synth_utterance(&talkers[i], NOISE_CLIP_S, cs),
                other => Err(Error::Config(format!("{other} noise is generated per mix, not from clips"))),
            }
        })
        .collect()
}

/// A noise source for `kind`: generated clips for the file-backed kinds,
/// the per-mix generators otherwise.
pub fn synthetic_noise_source(kind: NoiseKind, seed: u64) -> Result<NoiseSource> {
    if kind.is_file_backed() {
        NoiseSource::new(kind, synthetic_noise_clips(kind, seed)?)
    } else {
        NoiseSource::synthetic(kind)
    }
}

/// Writes stand-in clips for every file-backed kind under
/// `out_dir/noise/{noise,music,speech}/` and `noise_manifest.txt`.
pub fn generate_noise_bundle(out_dir: &Path, seed: u64) -> Result<NoiseManifest> {
    let mut manifest = NoiseManifest::default();
    for (kind, dir) in [
        (NoiseKind::GeneralNoise, "noise"),
        (NoiseKind::Music, "music"),
        (NoiseKind::Babble, "speech"),
    ] {
        let sub = out_dir.join("noise").join(dir);
        std::fs::create_dir_all(&sub)?;
        for (i, clip) in synthetic_noise_clips(kind, seed)?.iter().enumerate() {
            let rel = PathBuf::from(format!("noise/{dir}/clip{i:02}.wav"));
            write_wav(&out_dir.join(&rel), clip)?;
            match kind {
                NoiseKind::GeneralNoise => manifest.noise.push(rel),
                NoiseKind::Music => manifest.music.push(rel),
                _ => manifest.speech.push(rel),
            }
        }
    }
    std::fs::write(out_dir.join("noise_manifest.txt"), manifest.to_text())?;
    Ok(NoiseManifest::load(&out_dir.join("noise_manifest.txt"))?)
}

/// Writes WAVs under `out_dir/wav/`, plus `manifest.txt` and `trials.txt`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpeakerSpec, out_dir: &Path) -> Result<Manifest> {
    let utts = synthetic_utterances(spec)?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in &utts {
        let path = out_dir.join(u.rel_path());
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_wav(&path, &u.wave)?;
        entries.push(Entry {
            path,
            speaker: u.speaker_id(),
            split: u.split,
        });
    }
    let manifest = Manifest { entries };
    manifest.save(&out_dir.join("manifest.txt"))?;
    let mut trials = make_trials(&manifest, spec.seed);
    for t in &mut trials.trials {
        t.a = t.a.strip_prefix(out_dir).unwrap_or(&t.a).to_path_buf();
        t.b = t.b.strip_prefix(out_dir).unwrap_or(&t.b).to_path_buf();
    }
    std::fs::write(out_dir.join("trials.txt"), trials.to_text())?;
    Ok(manifest)
}
