//! Electrode geometry, spatial block masks and position encodings.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nets::TokenGrid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STANDARD_62: &str = include_str!("../assets/standard_62.txt");

/// Centers tried before giving up on a partial mask.
pub const MAX_CENTER_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    pub name: String,
    pub position: [f64; 3],
}

/// Named electrodes with 3D positions in a common length unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Montage {
    channels: Vec<Electrode>,
}

impl Montage {
    pub fn new(channels: Vec<Electrode>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Geometry("a montage needs at least one channel".into()));
        }
        let mut seen = HashSet::new();
        for e in &channels {
            if e.name.is_empty() {
                return Err(Error::Geometry("empty channel name".into()));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Geometry(format!("duplicate channel name `{}`", e.name)));
            }
            if e.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::Geometry(format!("non-finite coordinate for `{}`", e.name)));
            }
        }
        Ok(Self { channels })
    }

    pub fn from_positions<S: Into<String>>(items: impl IntoIterator<Item = (S, [f64; 3])>) -> Result<Self> {
        Self::new(items.into_iter().map(|(n, p)| Electrode { name: n.into(), position: p }).collect())
    }

    /// The bundled 62-channel 10-10 layout (millimetres on a 95 mm sphere).
    pub fn standard_62() -> Self {
        Self::parse(STANDARD_62).expect("bundled montage is valid")
    }

    /// Parse `name x y z` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut channels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Geometry(format!(
                    "montage line {}: expected `name x y z`, got {} fields",
                    lineno + 1,
                    fields.len()
                )));
            }
            let mut position = [0.0; 3];
            for (slot, f) in position.iter_mut().zip(&fields[1..]) {
                *slot = f.parse().map_err(|_| {
                    Error::Geometry(format!("montage line {}: bad coordinate `{f}`", lineno + 1))
                })?;
            }
            channels.push(Electrode { name: fields[0].to_string(), position });
        }
        Self::new(channels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Text in the same `name x y z` format. `{}` formatting of `f64` is the
    /// shortest representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.channels {
            let [x, y, z] = e.position;
            let _ = writeln!(out, "{} {x} {y} {z}", e.name);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[Electrode] {
        &self.channels
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|e| e.name.as_str())
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.channels[i].position
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.position(i), self.position(j));
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|e| e.name == name)
    }

    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let channels = names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .map(|i| self.channels[i].clone())
                    .ok_or_else(|| Error::Geometry(format!("unknown channel `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(channels)
    }

    /// `n` well-spread channels picked by farthest-point traversal from the
    /// first channel; returned in the montage's original order.
    pub fn spread_subset(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!("cannot pick {n} of {} channels", self.len())));
        }
        let mut chosen = vec![0usize];
        let mut nearest: Vec<f64> = (0..self.len()).map(|j| self.distance(0, j)).collect();
        while chosen.len() < n {
            let (next, _) = nearest
                .iter()
                .enumerate()
                .filter(|(j, _)| !chosen.contains(j))
                .fold((usize::MAX, f64::NEG_INFINITY), |best, (j, &d)| if d > best.1 { (j, d) } else { best });
            chosen.push(next);
            for (j, slot) in nearest.iter_mut().enumerate() {
                *slot = slot.min(self.distance(next, j));
            }
        }
        chosen.sort_unstable();
        Self::new(chosen.into_iter().map(|i| self.channels[i].clone()).collect())
    }
}

/// Largest Euclidean distance between any two electrodes.
pub fn head_size(montage: &Montage) -> Result<f64> {
    let c = montage.len();
    if c < 2 {
        return Err(Error::Geometry(format!("head size needs at least 2 channels, montage has {c}")));
    }
    let mut best = 0.0f64;
    for i in 0..c {
        for j in i + 1..c {
            best = best.max(montage.distance(i, j));
        }
    }
    if best <= 0.0 {
        return Err(Error::Geometry("all electrodes coincide; head size is zero".into()));
    }
    Ok(best)
}

/// A sampled spatial block mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub center_channel: usize,
    pub diameter_fraction: f64,
    /// Sorted channel indices.
    pub masked_channels: Vec<usize>,
    /// One flag per token, channel-major (`token = channel * windows + window`).
    pub token_mask: Vec<bool>,
    pub n_windows: usize,
}

impl MaskSpec {
    pub fn n_tokens(&self) -> usize {
        self.token_mask.len()
    }

    pub fn visible_tokens(&self) -> Vec<usize> {
        (0..self.token_mask.len()).filter(|&i| !self.token_mask[i]).collect()
    }

    pub fn masked_tokens(&self) -> Vec<usize> {
        (0..self.token_mask.len()).filter(|&i| self.token_mask[i]).collect()
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("diameter fraction {fraction} outside (0, 1]")));
    }
    Ok(())
}

/// Channels within `fraction * head_size / 2` of `center`, boundary included.
pub fn channels_within(montage: &Montage, center: usize, fraction: f64, head: f64) -> Vec<usize> {
    let radius = fraction * head / 2.0;
    (0..montage.len()).filter(|&j| montage.distance(center, j) <= radius).collect()
}

/// The mask a given center produces, without the full-coverage check.
pub fn mask_for_center(montage: &Montage, center: usize, fraction: f64, n_windows: usize) -> Result<MaskSpec> {
    check_fraction(fraction)?;
    if center >= montage.len() {
        return Err(Error::Config(format!("center {center} out of range")));
    }
    let head = head_size(montage)?;
    let masked_channels = channels_within(montage, center, fraction, head);
    let mut token_mask = vec![false; montage.len() * n_windows];
    for &c in &masked_channels {
        token_mask[c * n_windows..(c + 1) * n_windows].fill(true);
    }
    Ok(MaskSpec { center_channel: center, diameter_fraction: fraction, masked_channels, token_mask, n_windows })
}

/// Draw a uniformly random center and mask every channel inside the sphere
/// around it. Centers whose sphere covers the whole montage are redrawn.
pub fn sample_mask(montage: &Montage, fraction: f64, n_windows: usize, rng: &mut impl Rng) -> Result<MaskSpec> {
    check_fraction(fraction)?;
    if n_windows == 0 {
        return Err(Error::Config("at least one window per channel is required".into()));
    }
    let head = head_size(montage)?;
    let c = montage.len();
    let partial = |center: usize| channels_within(montage, center, fraction, head).len() < c;
    if !(0..c).any(partial) {
        return Err(Error::Masking { fraction });
    }
    for _ in 0..MAX_CENTER_RETRIES {
        let center = rng.random_range(0..c);
        if partial(center) {
            return mask_for_center(montage, center, fraction, n_windows);
        }
    }
    Err(Error::Masking { fraction })
}

/// Standard sinusoidal encoding: element `2i` is `sin(pos / 10000^(2i/dims))`,
/// element `2i+1` the matching cosine.
pub fn temporal_encoding(position: f64, dims: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims);
    for i in 0..dims.div_ceil(2) {
        let angle = position / 10000f64.powf(2.0 * i as f64 / dims as f64);
        out.push(angle.sin());
        if out.len() < dims {
            out.push(angle.cos());
        }
    }
    out
}

/// Initial per-channel spatial embeddings: the sinusoidal encodings of the x,
/// y and z coordinates concatenated, `dims / 3` elements each.
pub fn init_spatial_table<T: Scalar>(montage: &Montage, dims: usize) -> Result<Tensor<T>> {
    if dims == 0 || !dims.is_multiple_of(6) {
        return Err(Error::Config(format!("spatial embedding width {dims} is not a positive multiple of 6")));
    }
    let per = dims / 3;
    let mut table = Tensor::zeros(montage.len(), dims);
    for c in 0..montage.len() {
        let row = table.row_mut(c);
        for (axis, &coord) in montage.position(c).iter().enumerate() {
            for (k, v) in temporal_encoding(coord, per).into_iter().enumerate() {
                row[axis * per + k] = T::lit(v);
            }
        }
    }
    Ok(table)
}

/// How temporal and spatial position information is laid over a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionEncoding {
    pub temporal_dims: usize,
    pub d: usize,
}

impl Default for PositionEncoding {
    fn default() -> Self {
        Self { temporal_dims: 34, d: 64 }
    }
}

impl PositionEncoding {
    pub fn new(temporal_dims: usize, d: usize) -> Result<Self> {
        if !temporal_dims.is_multiple_of(2) || temporal_dims >= d {
            return Err(Error::Config(format!("temporal width {temporal_dims} must be even and below d={d}")));
        }
        if !(d - temporal_dims).is_multiple_of(6) {
            return Err(Error::Config(format!("spatial width {} is not a multiple of 6", d - temporal_dims)));
        }
        Ok(Self { temporal_dims, d })
    }

    pub fn spatial_dims(&self) -> usize {
        self.d - self.temporal_dims
    }

    /// Marker rows for every token of a `channels x windows` grid: the temporal
    /// encoding in the leading columns, the channel's table row after it.
    pub fn markers<T: Scalar>(&self, table: &Tensor<T>, n_windows: usize) -> Result<Tensor<T>> {
        if table.cols() != self.spatial_dims() {
            return Err(Error::Shape(format!(
                "spatial table width {} does not match {}",
                table.cols(),
                self.spatial_dims()
            )));
        }
        let temporal: Vec<Vec<f64>> =
            (0..n_windows).map(|w| temporal_encoding(w as f64, self.temporal_dims)).collect();
        let mut out = Tensor::zeros(table.rows() * n_windows, self.d);
        for c in 0..table.rows() {
            for (w, enc) in temporal.iter().enumerate() {
                let row = out.row_mut(c * n_windows + w);
                for (slot, v) in row.iter_mut().zip(enc) {
                    *slot = T::lit(*v);
                }
                row[self.temporal_dims..].copy_from_slice(table.row(c));
            }
        }
        Ok(out)
    }
}

/// A flattened, position-marked token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedTokens<T> {
    pub values: Tensor<T>,
    /// `(channel, window)` of each row.
    pub provenance: Vec<(usize, usize)>,
}

pub fn apply_position_markers<T: Scalar>(
    tokens: &TokenGrid<T>,
    encoding: &PositionEncoding,
    table: &Tensor<T>,
) -> Result<MarkedTokens<T>> {
    if tokens.d() != encoding.d {
        return Err(Error::Shape(format!("token width {} but encoding expects {}", tokens.d(), encoding.d)));
    }
    if table.rows() != tokens.n_channels() {
        return Err(Error::Shape(format!(
            "spatial table has {} rows for {} channels",
            table.rows(),
            tokens.n_channels()
        )));
    }
    let markers = encoding.markers(table, tokens.n_windows())?;
    let mut values = tokens.values().clone();
    for (v, m) in values.data_mut().iter_mut().zip(markers.data()) {
        *v += *m;
    }
    let t = tokens.n_windows();
    let provenance = (0..tokens.n_channels() * t).map(|i| (i / t, i % t)).collect();
    Ok(MarkedTokens { values, provenance })
}
