//! Zero-phase bandpass filtering and resampling to the internal rate.

use std::f64::consts::PI;

use super::{Recording, SAMPLING_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for Band {
    fn default() -> Self {
        Self { low_hz: 0.5, high_hz: 40.0 }
    }
}

/// Second-order IIR section (bilinear-transform design).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [a1 / a0, a2 / a0] }
    }

    pub fn lowpass(fs: f64, cutoff: f64, q: f64) -> Self {
        let w = 2.0 * PI * cutoff / fs;
        let (s, c) = w.sin_cos();
        let alpha = s / (2.0 * q);
        Self::normalized([(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    pub fn highpass(fs: f64, cutoff: f64, q: f64) -> Self {
        let w = 2.0 * PI * cutoff / fs;
        let (s, c) = w.sin_cos();
        let alpha = s / (2.0 * q);
        Self::normalized([(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    /// Direct form II transposed, in place.
    pub fn apply(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + z1;
            z1 = self.b[1] * *v - self.a[0] * y + z2;
            z2 = self.b[2] * *v - self.a[1] * y;
            *v = y;
        }
    }

    /// Fourth-order Butterworth lowpass preceded by a second-order
    /// Butterworth highpass.
    pub fn bandpass(fs: f64, band: Band) -> Vec<Biquad> {
        let q_lp = [1.0 / (2.0 * (PI / 8.0).cos()), 1.0 / (2.0 * (3.0 * PI / 8.0).cos())];
        vec![
            Biquad::highpass(fs, band.low_hz, std::f64::consts::FRAC_1_SQRT_2),
            Biquad::lowpass(fs, band.high_hz, q_lp[0]),
            Biquad::lowpass(fs, band.high_hz, q_lp[1]),
        ]
    }
}

/// Forward-backward filtering with odd-reflection padding at both ends.
pub fn filtfilt(sections: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = pad.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    for s in sections {
        s.apply(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.apply(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

const SINC_HALF_WIDTH: f64 = 16.0;

/// Resample a band-limited signal. Integer factors decimate; other ratios use
/// Hann-windowed sinc interpolation with the cutoff at the lower Nyquist rate.
pub fn resample(x: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if to_hz > from_hz {
        return Err(Error::Resampling(format!("cannot upsample from {from_hz} Hz to {to_hz} Hz")));
    }
    if !(to_hz > 0.0) {
        return Err(Error::Resampling(format!("invalid target rate {to_hz}")));
    }
    let ratio = from_hz / to_hz;
    let n_out = (x.len() as f64 / ratio + 1e-9).floor() as usize;
    if (ratio - ratio.round()).abs() < 1e-9 {
        let k = ratio.round() as usize;
        return Ok((0..n_out).map(|i| x[i * k]).collect());
    }
    let cutoff = 1.0 / ratio;
    let reach = SINC_HALF_WIDTH * ratio;
    let out = (0..n_out)
        .map(|i| {
            let t = i as f64 * ratio;
            let lo = (t - reach).ceil().max(0.0) as usize;
            let hi = ((t + reach).floor() as usize).min(x.len() - 1);
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let w = 0.5 * (1.0 + (PI * d / reach).cos());
                let h = cutoff * sinc(cutoff * d) * w;
                acc += h * v;
                norm += h;
            }
            if norm.abs() > 1e-12 {
                acc / norm
            } else {
                0.0
            }
        })
        .collect();
    Ok(out)
}

/// Bandpass every channel with a zero-phase filter, then resample to
/// `target_rate`.
pub fn preprocess(raw: &Recording, band: Band, target_rate: f64) -> Result<Recording> {
    let fs = raw.sampling_rate;
    if target_rate > fs {
        return Err(Error::Resampling(format!("target rate {target_rate} Hz exceeds the raw rate {fs} Hz")));
    }
    if fs < 2.0 * band.high_hz {
        return Err(Error::Data(format!("raw rate {fs} Hz is below twice the {} Hz band edge", band.high_hz)));
    }
    if !(band.low_hz > 0.0 && band.low_hz < band.high_hz) {
        return Err(Error::Config(format!("invalid band {}-{} Hz", band.low_hz, band.high_hz)));
    }
    if raw.samples().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite input samples".into()));
    }
    let sections = Biquad::bandpass(fs, band);
    let pad = (3.0 * fs / band.low_hz).round() as usize;
    let mut out = Vec::new();
    for c in 0..raw.n_channels() {
        let x: Vec<f64> = raw.channel(c).iter().map(|&v| f64::from(v)).collect();
        let filtered = filtfilt(&sections, &x, pad);
        let resampled = resample(&filtered, fs, target_rate)?;
        out.extend(resampled.into_iter().map(|v| v as f32));
    }
    Recording::new(out, target_rate, raw.montage.clone(), raw.subject_id.clone(), raw.paradigm)
}

impl Recording {
    /// [`preprocess`] with the default band and rate.
    pub fn preprocessed(&self) -> Result<Recording> {
        preprocess(self, Band::default(), SAMPLING_RATE)
    }
}
