//! Signal-generation helpers shared by the noise and corpus synthesisers.

use std::f64::consts::PI;

/// Second-order IIR section in transposed direct form II.
#[derive(Clone, Debug)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    /// Band-pass with unit gain at `center_hz`.
    pub fn bandpass(center_hz: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * center_hz / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    pub fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

/// Band-limited sawtooth oscillator (PolyBLEP correction at the wrap).
#[derive(Clone, Debug, Default)]
pub struct Saw {
    phase: f64,
}

impl Saw {
    pub fn new(phase: f64) -> Self {
        Saw {
            phase: phase.rem_euclid(1.0),
        }
    }

    /// Next sample for frequency `f` in cycles per sample.
    pub fn next(&mut self, f: f64) -> f64 {
        let t = self.phase;
        let mut y = 2.0 * t - 1.0;
        if t < f {
            let x = t / f;
            y -= x + x - x * x - 1.0;
        } else if t > 1.0 - f {
            let x = (t - 1.0) / f;
            y -= x * x + x + x + 1.0;
        }
        self.phase = (self.phase + f).fract();
        y
    }
}

/// Scales `x` so its largest magnitude is `peak`; silent input is unchanged.
pub fn normalize_peak(x: &mut [f64], peak: f64) {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        let g = peak / max;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

pub fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}
