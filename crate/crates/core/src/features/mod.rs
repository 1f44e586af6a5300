//! Acoustic front end: 25 ms Hamming frames every 10 ms at 16 kHz, a
//! 512-point FFT, then either 40 log-mel filterbank energies or the
//! 257-bin log-magnitude spectrogram.
//!
//! Normalisation is per utterance: log-mel features are mean-normalised per
//! coefficient, spectrograms mean- and variance-normalised per bin. The
//! `*_raw` variants skip it.

mod cache;
mod wav;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub use cache::{read_cache, write_cache, CACHE_MAGIC};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, STD_EPS};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LEN: usize = 400;
pub const HOP_LEN: usize = 160;
pub const N_FFT: usize = 512;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 40;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_MEL_FLOOR: f64 = 1e-10;
pub const SPEC_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("empty waveform".into()));
        }
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Audio("samples must be finite and within [-1, 1]".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    /// Scales the signal down to a peak of `peak` if it exceeds it.
    pub fn peak_limited(mut samples: Vec<f32>, sample_rate: u32, peak: f32) -> Result<Self> {
        let max = samples.iter().fold(0f32, |m, s| m.max(s.abs()));
        if max > peak {
            let g = peak / max;
            samples.iter_mut().for_each(|s| *s *= g);
        }
        Waveform::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum::<f64>()
            / self.samples.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    LogMel40,
    Spec257,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::LogMel40 => N_MELS,
            FeatureKind::Spec257 => N_BINS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::LogMel40 => "logmel40",
            FeatureKind::Spec257 => "spec257",
        }
    }

    pub fn extract(self, w: &Waveform) -> Result<FeatureMatrix> {
        match self {
            FeatureKind::LogMel40 => log_mel(w),
            FeatureKind::Spec257 => spectrogram(w),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logmel40" | "logmel" => Ok(FeatureKind::LogMel40),
            "spec257" | "spec" => Ok(FeatureKind::Spec257),
            other => Err(Error::Config(format!("unknown feature kind {other:?}"))),
        }
    }
}

/// `T × L` frame-level features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: Tensor,
    kind: FeatureKind,
}

impl FeatureMatrix {
    pub const FRAME_SHIFT_MS: u32 = 10;
    pub const FRAME_LEN_MS: u32 = 25;

    pub fn new(frames: Tensor, kind: FeatureKind) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[1] != kind.dim() {
            return Err(Error::shape("FeatureMatrix", frames.shape(), &[kind.dim()]));
        }
        Ok(FeatureMatrix { frames, kind })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    /// Rows `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> Result<FeatureMatrix> {
        if len == 0 || start + len > self.num_frames() {
            return Err(Error::shape("crop", self.frames.shape(), &[start, len]));
        }
        let l = self.dim();
        let data = self.frames.data()[start * l..(start + len) * l].to_vec();
        FeatureMatrix::new(Tensor::new(&[len, l], data)?, self.kind)
    }

    /// Per-column mean over frames.
    pub fn column_means(&self) -> Vec<f64> {
        let (t, l) = (self.num_frames(), self.dim());
        let mut m = vec![0.0; l];
        for r in 0..t {
            for (acc, v) in m.iter_mut().zip(self.frame(r)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= t as f64);
        m
    }
}

/// Number of whole frames in `n` samples; the incomplete tail is dropped.
pub fn num_frames(n: usize) -> Option<usize> {
    (n >= WIN_LEN).then(|| 1 + (n - WIN_LEN) / HOP_LEN)
}

fn hamming() -> &'static [f64] {
    static WINDOW: OnceLock<Vec<f64>> = OnceLock::new();
    WINDOW.get_or_init(|| {
        (0..WIN_LEN)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (WIN_LEN - 1) as f64).cos()
            })
            .collect()
    })
}

fn fft() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT)).clone()
}

/// Hamming-windowed 400-sample frames with a 160-sample hop.
pub fn frame_signal(w: &Waveform) -> Result<Vec<Vec<f64>>> {
    let t = num_frames(w.len()).ok_or(Error::TooShort {
        samples: w.len(),
        needed: WIN_LEN,
    })?;
    let win = hamming();
    Ok((0..t)
        .map(|i| {
            w.samples[i * HOP_LEN..i * HOP_LEN + WIN_LEN]
                .iter()
                .zip(win)
                .map(|(&s, &h)| f64::from(s) * h)
                .collect()
        })
        .collect())
}

/// Complex spectrum (bins `0..=256`) of one windowed frame, zero-padded to
/// 512 points.
fn spectrum(frame: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
    buf.resize(N_FFT, Complex::new(0.0, 0.0));
    fft().process(&mut buf);
    buf.truncate(N_BINS);
    buf
}

/// One-sided power spectrum scaled so the bins sum to the frame energy.
pub fn power_spectrum(frame: &[f64]) -> Vec<f64> {
    spectrum(frame)
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let fold = if k == 0 || k == N_BINS - 1 { 1.0 } else { 2.0 };
            fold * c.norm_sqr() / N_FFT as f64
        })
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge frequencies of the triangular filters: filter `m` rises from
/// `edges[m]` to `edges[m + 1]` and falls to `edges[m + 2]`.
pub fn mel_edges() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// `N_MELS × N_BINS` filterbank weights, row per filter.
pub fn mel_filterbank() -> &'static [Vec<f64>] {
    static BANK: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    BANK.get_or_init(|| {
        let edges = mel_edges();
        (0..N_MELS)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..N_BINS)
                    .map(|k| {
                        let f = k as f64 * f64::from(SAMPLE_RATE) / N_FFT as f64;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect()
    })
}

fn check_rate(w: &Waveform) -> Result<()> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "expected {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate
        )));
    }
    Ok(())
}

/// Log-mel energies before per-utterance normalisation.
pub fn log_mel_raw(w: &Waveform) -> Result<FeatureMatrix> {
    check_rate(w)?;
    let frames = frame_signal(w)?;
    let bank = mel_filterbank();
    let mut data = Vec::with_capacity(frames.len() * N_MELS);
    for frame in &frames {
        let p = power_spectrum(frame);
        data.extend(bank.iter().map(|row| {
            let e: f64 = row.iter().zip(&p).map(|(a, b)| a * b).sum();
            e.max(LOG_MEL_FLOOR).ln()
        }));
    }
    FeatureMatrix::new(Tensor::new(&[frames.len(), N_MELS], data)?, FeatureKind::LogMel40)
}

pub fn log_mel(w: &Waveform) -> Result<FeatureMatrix> {
    let mut f = log_mel_raw(w)?;
    normalize_columns(&mut f.frames, false);
    Ok(f)
}

/// Log-magnitude spectrogram before per-utterance normalisation.
pub fn spectrogram_raw(w: &Waveform) -> Result<FeatureMatrix> {
    check_rate(w)?;
    let frames = frame_signal(w)?;
    let mut data = Vec::with_capacity(frames.len() * N_BINS);
    for frame in &frames {
        data.extend(spectrum(frame).iter().map(|c| (c.norm() + SPEC_FLOOR).ln()));
    }
    FeatureMatrix::new(Tensor::new(&[frames.len(), N_BINS], data)?, FeatureKind::Spec257)
}

pub fn spectrogram(w: &Waveform) -> Result<FeatureMatrix> {
    let mut f = spectrogram_raw(w)?;
    normalize_columns(&mut f.frames, true);
    Ok(f)
}

fn normalize_columns(t: &mut Tensor, variance: bool) {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let d = t.data_mut();
    for c in 0..cols {
        let mean = (0..rows).map(|r| d[r * cols + c]).sum::<f64>() / rows as f64;
        let scale = if variance {
            let var = (0..rows).map(|r| (d[r * cols + c] - mean).powi(2)).sum::<f64>() / rows as f64;
            1.0 / (var + STD_EPS).sqrt()
        } else {
            1.0
        };
        for r in 0..rows {
            d[r * cols + c] = (d[r * cols + c] - mean) * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(hz: f64, seconds: f64, amp: f32) -> Waveform {
        let n = (seconds * f64::from(SAMPLE_RATE)) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * hz * i as f64 / 16000.0).sin() as f32)
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn framing_counts() {
        assert_eq!(frame_signal(&noise(16000, 1)).unwrap().len(), 98);
        assert_eq!(frame_signal(&noise(400, 1)).unwrap().len(), 1);
        assert!(matches!(
            frame_signal(&noise(399, 1)),
            Err(Error::TooShort { samples: 399, needed: 400 })
        ));
    }

    #[test]
    fn waveform_validation() {
        assert!(Waveform::new(vec![], SAMPLE_RATE).is_err());
        assert!(Waveform::new(vec![1.5], SAMPLE_RATE).is_err());
        let w = Waveform::peak_limited(vec![2.0, -4.0], SAMPLE_RATE, 1.0).unwrap();
        assert_eq!(w.samples(), &[0.5, -1.0]);
    }

    #[test]
    fn shapes() {
        assert_eq!(log_mel(&noise(32000, 2)).unwrap().frames().shape(), &[198, 40]);
        assert_eq!(spectrogram(&noise(16000, 2)).unwrap().frames().shape(), &[98, 257]);
        let w8k = Waveform::new(vec![0.0; 8000], 8000).unwrap();
        assert!(log_mel(&w8k).is_err());
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
        let raw = log_mel_raw(&w).unwrap();
        assert!(raw.frames().data().iter().all(|&v| v == LOG_MEL_FLOOR.ln()));
        assert!(log_mel(&w).unwrap().frames().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sine_peaks_at_bin_32() {
        let spec = spectrogram_raw(&sine(1000.0, 1.0, 0.5)).unwrap();
        for t in 0..spec.num_frames() {
            let row = spec.frame(t);
            let peak = (0..N_BINS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(peak, 32);
        }
    }

    #[test]
    fn dc_offset_concentrates_in_bin_zero() {
        let w = Waveform::new(vec![0.5; 1600], SAMPLE_RATE).unwrap();
        let frame = &frame_signal(&w).unwrap()[0];
        let p = power_spectrum(frame);
        let total: f64 = p.iter().sum();
        // Hamming main lobe spans bins 0..=2 at 400/512 zero padding
        assert!(p[0] > p[1] && p[0] > 0.5 * total * 0.5);
        assert!(p[..3].iter().sum::<f64>() > 0.99 * total);
    }

    #[test]
    fn parseval_on_random_frames() {
        let w = noise(8000, 3);
        for frame in frame_signal(&w).unwrap() {
            let energy: f64 = frame.iter().map(|x| x * x).sum();
            let p: f64 = power_spectrum(&frame).iter().sum();
            assert!((p - energy).abs() / energy < 0.01);
        }
    }

    #[test]
    fn filterbank_geometry() {
        let bank = mel_filterbank();
        let edges = mel_edges();
        assert_eq!(bank.len(), N_MELS);
        assert!(edges[0] >= MEL_LOW_HZ - 1e-9);
        assert!(edges[N_MELS + 1] <= MEL_HIGH_HZ + 1e-9);
        for m in 0..N_MELS {
            assert!(bank[m].iter().sum::<f64>() > 0.0, "filter {m} is empty");
            if m + 1 < N_MELS {
                let overlap = bank[m].iter().zip(&bank[m + 1]).any(|(a, b)| *a > 0.0 && *b > 0.0);
                assert!(overlap, "filters {m} and {} do not overlap", m + 1);
            }
        }
    }

    #[test]
    fn deterministic_and_shift_equivariant() {
        let w = noise(8000, 4);
        assert_eq!(log_mel(&w).unwrap(), log_mel(&w).unwrap());
        let shifted = Waveform::new(w.samples()[HOP_LEN..].to_vec(), SAMPLE_RATE).unwrap();
        let a = log_mel_raw(&w).unwrap();
        let b = log_mel_raw(&shifted).unwrap();
        for t in 0..b.num_frames() {
            for (x, y) in a.frame(t + 1).iter().zip(b.frame(t)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
