//! On-disk containers.
//!
//! A recording directory holds `montage.txt`, a TOML `meta` file and a raw
//! `samples` blob (little-endian f32, channels x samples row-major). A labeled
//! epochs directory adds an `epochs` shape file and `labels`, one integer per
//! line; its `samples` blob is epochs x channels x samples. A corpus directory
//! has a `corpus.toml` manifest plus `recordings/<subject>` and
//! `epochs/<subject>` containers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Example, Paradigm, Recording, SubjectEpochs};
use crate::error::{Error, Result};
use crate::montage::Montage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    subject_id: String,
    paradigm: Paradigm,
    sampling_rate: f64,
    n_channels: usize,
    n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpochShape {
    n_epochs: usize,
    n_channels: usize,
    n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub paradigm: Paradigm,
    /// Subject ids in role-assignment order.
    pub subjects: Vec<String>,
    pub has_epochs: bool,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.message()))
}

fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("plain structs serialize")
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * expected {
        return Err(Error::format(path, format!("{} bytes, expected {} f32 values", bytes.len(), expected)));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_montage(dir: &Path) -> Result<Montage> {
    Montage::load(&dir.join("montage.txt"))
}

pub fn write_recording(dir: impl AsRef<Path>, rec: &Recording) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    write_text(&dir.join("montage.txt"), &rec.montage.to_text())?;
    let meta = Meta {
        subject_id: rec.subject_id.clone(),
        paradigm: rec.paradigm,
        sampling_rate: rec.sampling_rate,
        n_channels: rec.n_channels(),
        n_samples: rec.n_samples(),
    };
    write_text(&dir.join("meta"), &to_toml(&meta))?;
    write_f32(&dir.join("samples"), rec.samples().iter().copied())
}

pub fn read_recording(dir: impl AsRef<Path>) -> Result<Recording> {
    let dir = dir.as_ref();
    let montage = read_montage(dir)?;
    let meta_path = dir.join("meta");
    let meta: Meta = parse_toml(&meta_path)?;
    if meta.n_channels != montage.len() {
        return Err(Error::format(
            &meta_path,
            format!("{} channels in meta, {} in the montage", meta.n_channels, montage.len()),
        ));
    }
    let samples = read_f32(&dir.join("samples"), meta.n_channels * meta.n_samples)?;
    Recording::new(samples, meta.sampling_rate, montage, meta.subject_id, meta.paradigm)
}

pub fn write_epochs(dir: impl AsRef<Path>, epochs: &SubjectEpochs) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let labels = epochs.labels()?;
    let (c, t) = epochs.examples.first().map_or((epochs.montage.len(), 0), |e| (e.n_channels(), e.n_samples()));
    if epochs.examples.iter().any(|e| e.n_channels() != c || e.n_samples() != t) {
        return Err(Error::Shape(format!("epochs of {} differ in shape", epochs.subject)));
    }
    write_text(&dir.join("montage.txt"), &epochs.montage.to_text())?;
    let meta = Meta {
        subject_id: epochs.subject.clone(),
        paradigm: epochs.paradigm,
        sampling_rate: epochs.sampling_rate,
        n_channels: c,
        n_samples: t,
    };
    write_text(&dir.join("meta"), &to_toml(&meta))?;
    let shape = EpochShape { n_epochs: epochs.examples.len(), n_channels: c, n_samples: t };
    write_text(&dir.join("epochs"), &to_toml(&shape))?;
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    write_text(&dir.join("labels"), &text)?;
    write_f32(&dir.join("samples"), epochs.examples.iter().flat_map(|e| e.samples().iter().copied()))
}

pub fn read_epochs(dir: impl AsRef<Path>) -> Result<SubjectEpochs> {
    let dir = dir.as_ref();
    let montage = read_montage(dir)?;
    let meta: Meta = parse_toml(&dir.join("meta"))?;
    let shape_path = dir.join("epochs");
    let shape: EpochShape = parse_toml(&shape_path)?;
    if shape.n_channels != montage.len() {
        return Err(Error::format(&shape_path, "channel count disagrees with the montage"));
    }
    let labels_path = dir.join("labels");
    let labels = read_text(&labels_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<usize>().map_err(|e| Error::format(&labels_path, format!("{l:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != shape.n_epochs {
        return Err(Error::format(&labels_path, format!("{} labels for {} epochs", labels.len(), shape.n_epochs)));
    }
    let per = shape.n_channels * shape.n_samples;
    let samples = read_f32(&dir.join("samples"), shape.n_epochs * per)?;
    let examples = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Example::labeled(shape.n_channels, shape.n_samples, samples[i * per..(i + 1) * per].to_vec(), l))
        .collect::<Result<Vec<_>>>()?;
    Ok(SubjectEpochs {
        subject: meta.subject_id,
        paradigm: meta.paradigm,
        sampling_rate: meta.sampling_rate,
        montage,
        examples,
    })
}

/// Container directories of a corpus rooted at `root`.
pub fn corpus_paths(root: &Path, subject: &str) -> (PathBuf, PathBuf) {
    (root.join("recordings").join(subject), root.join("epochs").join(subject))
}

pub fn write_corpus(
    root: impl AsRef<Path>,
    paradigm: Paradigm,
    recordings: &[Recording],
    epochs: &[SubjectEpochs],
) -> Result<CorpusManifest> {
    let root = root.as_ref();
    create_dir(root)?;
    let subjects: Vec<String> = recordings.iter().map(|r| r.subject_id.clone()).collect();
    if !epochs.is_empty() && epochs.iter().map(|e| &e.subject).ne(subjects.iter()) {
        return Err(Error::Data("epochs must cover the same subjects as the recordings, in order".into()));
    }
    for (i, rec) in recordings.iter().enumerate() {
        let (rdir, edir) = corpus_paths(root, &rec.subject_id);
        write_recording(rdir, rec)?;
        if let Some(ep) = epochs.get(i) {
            write_epochs(edir, ep)?;
        }
    }
    let manifest = CorpusManifest { paradigm, subjects, has_epochs: !epochs.is_empty() };
    write_text(&root.join("corpus.toml"), &to_toml(&manifest))?;
    Ok(manifest)
}

/// Manifest, recordings and (if present) labeled epochs of a corpus.
pub fn read_corpus(root: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<Recording>, Vec<SubjectEpochs>)> {
    let root = root.as_ref();
    let manifest: CorpusManifest = parse_toml(&root.join("corpus.toml"))?;
    let mut recordings = Vec::new();
    let mut epochs = Vec::new();
    for s in &manifest.subjects {
        let (rdir, edir) = corpus_paths(root, s);
        recordings.push(read_recording(rdir)?);
        if manifest.has_epochs {
            epochs.push(read_epochs(edir)?);
        }
    }
    Ok((manifest, recordings, epochs))
}
