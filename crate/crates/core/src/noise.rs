//! Additive noise at a controlled signal-to-noise ratio, plus synthetic
//! noise generators so no external corpus is needed.
//!
//! Power is the mean squared amplitude over the whole utterance; there is no
//! voice-activity weighting.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{mean_power, normalize_peak, Biquad};
use crate::error::{Error, Result};
use crate::features::{read_wav, Waveform, SAMPLE_RATE};

/// Evaluation SNR grid in dB; training draws uniformly from the same set.
pub const SNR_GRID: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];
/// Peak the mixture is scaled to when it would otherwise clip.
pub const CLIP_PEAK: f64 = 0.999;
pub const DEFAULT_TALKERS: usize = 6;
/// Range of speech clips summed into one file-backed babble draw.
pub const BABBLE_TALKERS: (usize, usize) = (3, 7);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    GeneralNoise,
    Music,
    Babble,
    SyntheticWhite,
    SyntheticBabble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] = [
        NoiseKind::GeneralNoise,
        NoiseKind::Music,
        NoiseKind::Babble,
        NoiseKind::SyntheticWhite,
        NoiseKind::SyntheticBabble,
    ];

    pub fn is_file_backed(self) -> bool {
        matches!(self, NoiseKind::GeneralNoise | NoiseKind::Music | NoiseKind::Babble)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::GeneralNoise => "noise",
            NoiseKind::Music => "music",
            NoiseKind::Babble => "babble",
            NoiseKind::SyntheticWhite => "white",
            NoiseKind::SyntheticBabble => "synth-babble",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise kind {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSource {
    kind: NoiseKind,
    clips: Vec<Waveform>,
}

impl NoiseSource {
    pub fn new(kind: NoiseKind, clips: Vec<Waveform>) -> Result<Self> {
        if kind.is_file_backed() && clips.is_empty() {
            return Err(Error::Config(format!("noise source {kind} has no clips")));
        }
        Ok(NoiseSource { kind, clips })
    }

    /// Generator-backed source; clips are synthesised per mix.
    pub fn synthetic(kind: NoiseKind) -> Result<Self> {
        if kind.is_file_backed() {
            return Err(Error::Config(format!("{kind} noise needs clips")));
        }
        Ok(NoiseSource {
            kind,
            clips: Vec::new(),
        })
    }

    /// Loads every clip listed under `kind`'s manifest section.
    pub fn load(manifest: &NoiseManifest, kind: NoiseKind) -> Result<Self> {
        let clips = manifest
            .paths(kind)?
            .iter()
            .map(|p| read_wav(p))
            .collect::<Result<Vec<_>>>()?;
        NoiseSource::new(kind, clips)
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn clips(&self) -> &[Waveform] {
        &self.clips
    }

    /// `n` samples of noise drawn according to `rng`.
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let seed = rng.gen::<u64>();
        Ok(match self.kind {
            NoiseKind::SyntheticWhite => white_noise(n, seed),
            NoiseKind::SyntheticBabble => babble_samples(n, DEFAULT_TALKERS, seed),
            NoiseKind::Babble => {
                let talkers = rng.gen_range(BABBLE_TALKERS.0..=BABBLE_TALKERS.1);
                let mut out = vec![0.0; n];
                for _ in 0..talkers {
                    for (o, v) in out.iter_mut().zip(self.looped_clip(n, rng)) {
                        *o += v;
                    }
                }
                out
            }
            _ => self.looped_clip(n, rng),
        })
    }

    /// A random clip from a random offset, looped to `n` samples.
    fn looped_clip(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.clips[rng.gen_range(0..self.clips.len())].samples();
        let offset = rng.gen_range(0..s.len());
        (0..n).map(|i| f64::from(s[(offset + i) % s.len()])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSpec {
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub rng_seed: u64,
}

impl MixSpec {
    pub fn new(snr_db: f64, noise_kind: NoiseKind, rng_seed: u64) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::Config("SNR must be finite; skip mixing for clean audio".into()));
        }
        Ok(MixSpec {
            snr_db,
            noise_kind,
            rng_seed,
        })
    }

    /// Training spec: SNR drawn uniformly from [`SNR_GRID`].
    pub fn training<R: Rng + ?Sized>(noise_kind: NoiseKind, rng: &mut R) -> Self {
        MixSpec {
            snr_db: SNR_GRID[rng.gen_range(0..SNR_GRID.len())],
            noise_kind,
            rng_seed: rng.gen(),
        }
    }
}

/// The two summands of a mixture after gain and any anti-clipping scale.
#[derive(Clone, Debug)]
pub struct MixParts {
    pub speech: Vec<f64>,
    pub noise: Vec<f64>,
}

impl MixParts {
    pub fn snr_db(&self) -> f64 {
        10.0 * (mean_power(&self.speech) / mean_power(&self.noise)).log10()
    }

    pub fn sum(&self) -> Vec<f64> {
        self.speech.iter().zip(&self.noise).map(|(s, n)| s + n).collect()
    }
}

/// Scaled speech and noise components whose sum is the mixture.
pub fn mix_components(speech: &Waveform, noise: &NoiseSource, spec: &MixSpec) -> Result<MixParts> {
    if spec.noise_kind != noise.kind {
        return Err(Error::Config(format!(
            "mix spec asks for {} noise but the source is {}",
            spec.noise_kind, noise.kind
        )));
    }
    let s: Vec<f64> = speech.samples().iter().map(|&v| f64::from(v)).collect();
    let p_speech = mean_power(&s);
    if p_speech == 0.0 {
        return Err(Error::SilentSignal);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut n = noise.draw(s.len(), &mut rng)?;
    let p_noise = mean_power(&n);
    if p_noise == 0.0 {
        return Err(Error::SilentSignal);
    }
    let gain = (p_speech / (p_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    n.iter_mut().for_each(|v| *v *= gain);
    let mut parts = MixParts { speech: s, noise: n };
    let peak = parts.sum().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        let k = CLIP_PEAK / peak;
        parts.speech.iter_mut().for_each(|v| *v *= k);
        parts.noise.iter_mut().for_each(|v| *v *= k);
    }
    Ok(parts)
}

/// `speech + g·noise` with `g` set so the component power ratio equals the
/// target SNR. Output length equals the speech length.
pub fn mix(speech: &Waveform, noise: &NoiseSource, spec: &MixSpec) -> Result<Waveform> {
    let parts = mix_components(speech, noise, spec)?;
    let out = parts.sum().iter().map(|&v| (v as f32).clamp(-1.0, 1.0)).collect();
    Waveform::new(out, speech.sample_rate())
}

fn white_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
}

fn samples_for(duration_s: f64) -> Result<usize> {
    let n = (duration_s * f64::from(SAMPLE_RATE)).round();
    if !(n >= 1.0) {
        return Err(Error::Config(format!("duration {duration_s} s is too short")));
    }
    Ok(n as usize)
}

fn to_waveform(mut x: Vec<f64>, peak: f64) -> Result<Waveform> {
    normalize_peak(&mut x, peak);
    Waveform::new(x.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE)
}

/// Unit-variance Gaussian noise normalised to a 0.9 peak.
pub fn synth_white(duration_s: f64, seed: u64) -> Result<Waveform> {
    to_waveform(white_noise(samples_for(duration_s)?, seed), 0.9)
}

fn babble_samples(n: usize, talkers: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = f64::from(SAMPLE_RATE);
    let mut out = vec![0.0; n];
    for _ in 0..talkers {
        // two cascaded band-passes give a voice-like spectral hump
        let center = rng.gen_range(300.0..1500.0);
        let mut f1 = Biquad::bandpass(center, 1.5, sr);
        let mut f2 = Biquad::bandpass(center * rng.gen_range(1.5..2.5), 1.5, sr);
        let syllable_hz = rng.gen_range(3.0..6.0);
        let phrase_hz = rng.gen_range(0.2..0.5);
        let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let e: f64 = StandardNormal.sample(&mut rng);
            let v = f2.process(f1.process(e));
            let syl = 0.5 * (1.0 + (2.0 * PI * syllable_hz * t + p1).sin());
            let phrase = 0.6 + 0.4 * (2.0 * PI * phrase_hz * t + p2).sin();
            *o += v * syl * syl * phrase;
        }
    }
    out
}

/// Sum of `n_talkers` amplitude-modulated, band-pass-filtered noise voices,
/// normalised to a 0.9 peak.
pub fn synth_babble(duration_s: f64, n_talkers: usize, seed: u64) -> Result<Waveform> {
    if n_talkers < 2 {
        return Err(Error::Config("babble needs at least two talkers".into()));
    }
    to_waveform(babble_samples(samples_for(duration_s)?, n_talkers, seed), 0.9)
}

/// Simple harmonic chord sequence with note decays, normalised to a 0.9 peak.
pub fn synth_music(duration_s: f64, seed: u64) -> Result<Waveform> {
    let n = samples_for(duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = f64::from(SAMPLE_RATE);
    let note_len = (0.5 * sr) as usize;
    let mut out = vec![0.0; n];
    for chunk in out.chunks_mut(note_len) {
        let root = 110.0 * 2f64.powf(f64::from(rng.gen_range(0..24u8)) / 12.0);
        for ratio in [1.0, 1.26, 1.5] {
            for h in 1..=4 {
                let f = root * ratio * h as f64;
                for (i, o) in chunk.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    *o += (2.0 * PI * f * t).sin() * (-3.0 * t).exp() / h as f64;
                }
            }
        }
    }
    to_waveform(out, 0.9)
}

/// Noise clip lists grouped by `[noise]`, `[music]` and `[speech]` headers.
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NoiseManifest {
    pub noise: Vec<PathBuf>,
    pub music: Vec<PathBuf>,
    pub speech: Vec<PathBuf>,
}

impl NoiseManifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let base = origin.parent().unwrap_or(Path::new(""));
        let mut m = NoiseManifest::default();
        let mut section: Option<NoiseKind> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg,
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(match name.trim() {
                    "noise" => NoiseKind::GeneralNoise,
                    "music" => NoiseKind::Music,
                    "speech" => NoiseKind::Babble,
                    other => return Err(err(format!("unknown section [{other}]"))),
                });
                continue;
            }
            let kind = section.ok_or_else(|| err("path before any section header".into()))?;
            let p = base.join(line);
            m.list_mut(kind).push(p);
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    fn list_mut(&mut self, kind: NoiseKind) -> &mut Vec<PathBuf> {
        match kind {
            NoiseKind::Music => &mut self.music,
            NoiseKind::Babble => &mut self.speech,
            _ => &mut self.noise,
        }
    }

    pub fn paths(&self, kind: NoiseKind) -> Result<&[PathBuf]> {
        match kind {
            NoiseKind::GeneralNoise => Ok(&self.noise),
            NoiseKind::Music => Ok(&self.music),
            NoiseKind::Babble => Ok(&self.speech),
            other => Err(Error::Config(format!("{other} noise is not file-backed"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (header, list) in [("noise", &self.noise), ("music", &self.music), ("speech", &self.speech)] {
            s.push_str(&format!("[{header}]\n"));
            for p in list {
                s.push_str(&format!("{}\n", p.display()));
            }
        }
        s
    }
}
