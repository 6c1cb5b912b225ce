use super::{Example, Recording};
use crate::error::{Error, Result};

pub const DEFAULT_INTERVAL_S: f64 = 16.9;

pub fn samples_for_seconds(seconds: f64, rate: f64) -> usize {
    (seconds * rate).round() as usize
}

/// Unlabeled slices starting at `k * interval_s` for k = 0, 1, ...; a slice is
/// kept only if it lies entirely inside the recording.
pub fn slice_continuous(rec: &Recording, example_length_s: f64, interval_s: f64) -> Result<Vec<Example>> {
    if !(example_length_s > 0.0) || example_length_s > interval_s {
        return Err(Error::Config(format!(
            "example length {example_length_s} s must be positive and at most the {interval_s} s interval"
        )));
    }
    let len = samples_for_seconds(example_length_s, rec.sampling_rate);
    let c = rec.n_channels();
    let mut out = Vec::new();
    for k in 0.. {
        let start = samples_for_seconds(k as f64 * interval_s, rec.sampling_rate);
        if start + len > rec.n_samples() {
            break;
        }
        let mut samples = Vec::with_capacity(c * len);
        for ch in 0..c {
            samples.extend_from_slice(&rec.channel(ch)[start..start + len]);
        }
        out.push(Example::unlabeled(c, len, samples)?);
    }
    Ok(out)
}
