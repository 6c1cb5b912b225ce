//! Pipeline grid: enumeration, resumable execution and rank aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Fold, Paradigm, SubjectEpochs};
use crate::error::{Error, Result};
use crate::finetune::{build_downstream, finetune, DownstreamSpec, FoldData, FoldResult, Strategy};
use crate::metrics::Metric;
use crate::nets::{ModelConfig, Placement};
use crate::seed;

pub const RESULTS_SCHEMA: &str = "# sjepa-results v1";
pub const RESULTS_HEADER: &str = "pipeline,dataset,subject,fold,metric,score,epochs";

/// Which pre-training run a pipeline starts from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PretrainId {
    Pretrained { length_s: f64, fraction: f64 },
    None,
}

impl PretrainId {
    pub fn name(&self) -> String {
        match self {
            PretrainId::Pretrained { length_s, fraction } => {
                format!("{}s-{}%", length_s.floor() as i64, (fraction * 100.0).round() as i64)
            }
            PretrainId::None => "none".into(),
        }
    }
}

impl fmt::Display for PretrainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineSpec {
    pub pretrain: PretrainId,
    pub architecture: Placement,
    pub strategy: Strategy,
}

impl PipelineSpec {
    pub fn new(pretrain: PretrainId, architecture: Placement, strategy: Strategy) -> Result<Self> {
        if pretrain == PretrainId::None && strategy != Strategy::Full {
            return Err(Error::Config("the no-pre-training baseline pairs only with strategy `full`".into()));
        }
        Ok(Self { pretrain, architecture, strategy })
    }

    /// e.g. `16s-40%-full-pre-local`.
    pub fn name(&self) -> String {
        format!("{}-{}-{}", self.pretrain, self.strategy, self.architecture.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lengths_s: Vec<f64>,
    pub fractions: Vec<f64>,
    pub architectures: Vec<Placement>,
    pub strategies: Vec<Strategy>,
    #[serde(default = "yes")]
    pub baseline: bool,
}

fn yes() -> bool {
    true
}

impl GridConfig {
    /// Three lengths, three mask sizes, all architectures and strategies.
    pub fn full() -> Self {
        Self {
            lengths_s: vec![1.1875, 4.1875, 16.1875],
            fractions: vec![0.4, 0.6, 0.8],
            architectures: Placement::ALL.to_vec(),
            strategies: Strategy::ALL.to_vec(),
            baseline: true,
        }
    }

    pub fn pretrain_ids(&self) -> Vec<PretrainId> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &length_s in &self.lengths_s {
            for &fraction in &self.fractions {
                let id = PretrainId::Pretrained { length_s, fraction };
                if seen.insert(id.name()) {
                    out.push(id);
                }
            }
        }
        out
    }
}

/// Pre-trained configurations crossed with architectures and strategies,
/// then the baseline with every architecture under `full`. Duplicates
/// (by display name) keep their first position.
pub fn enumerate_pipelines(grid: &GridConfig) -> Result<Vec<PipelineSpec>> {
    if grid.architectures.is_empty() || (grid.strategies.is_empty() && !grid.baseline) {
        return Err(Error::Config("the grid names no architectures or strategies".into()));
    }
    let pretrained = grid.pretrain_ids();
    if pretrained.is_empty() && !grid.baseline {
        return Err(Error::Config("the grid names no pre-training configurations".into()));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |p: PipelineSpec| {
        if seen.insert(p.name()) {
            out.push(p);
        }
    };
    for id in pretrained {
        for &arch in &grid.architectures {
            for &strategy in &grid.strategies {
                push(PipelineSpec { pretrain: id, architecture: arch, strategy });
            }
        }
    }
    if grid.baseline {
        for &arch in &grid.architectures {
            push(PipelineSpec { pretrain: PretrainId::None, architecture: arch, strategy: Strategy::Full });
        }
    }
    Ok(out)
}

/// Test subjects and folds of one downstream dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub paradigm: Paradigm,
    pub subjects: Vec<SubjectEpochs>,
    pub folds: BTreeMap<String, Vec<Fold>>,
}

impl Dataset {
    pub fn metric(&self) -> Metric {
        self.paradigm.metric()
    }
}

/// One unit of grid work.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub pipeline: PipelineSpec,
    pub dataset: String,
    pub subject: String,
    pub fold: usize,
}

impl Cell {
    pub fn key(&self) -> (String, String, String, usize) {
        (self.pipeline.name(), self.dataset.clone(), self.subject.clone(), self.fold)
    }
}

/// Every (pipeline, dataset, test subject, fold) in a fixed order.
pub fn enumerate_cells(pipelines: &[PipelineSpec], datasets: &[Dataset]) -> Vec<Cell> {
    let mut out = Vec::new();
    for p in pipelines {
        for d in datasets {
            for (subject, folds) in &d.folds {
                for fold in 0..folds.len() {
                    out.push(Cell { pipeline: *p, dataset: d.name.clone(), subject: subject.clone(), fold });
                }
            }
        }
    }
    out
}

pub trait CellRunner: Sync {
    fn run(&self, cell: &Cell) -> Result<FoldResult>;
}

fn format_row(r: &FoldResult) -> String {
    format!("{},{},{},{},{},{:?},{}", r.pipeline, r.dataset, r.subject, r.fold, r.metric.name(), r.score, r.epochs)
}

/// Rows of a results file; a missing file is empty.
pub fn read_results(path: &Path) -> Result<Vec<FoldResult>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_SCHEMA) {
        return Err(Error::format(path, format!("missing schema line `{RESULTS_SCHEMA}`")));
    }
    let body: String = lines.map(|l| format!("{l}\n")).collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let header = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != RESULTS_HEADER {
        return Err(Error::format(path, format!("header must be `{RESULTS_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let field = |k: usize| rec.get(k).unwrap_or_default();
        let bad = |what: &str| Error::format(path, format!("row {}: invalid {what}", i + 1));
        out.push(FoldResult {
            pipeline: field(0).to_string(),
            dataset: field(1).to_string(),
            subject: field(2).to_string(),
            fold: field(3).parse().map_err(|_| bad("fold"))?,
            metric: Metric::parse(field(4)).map_err(|_| bad("metric"))?,
            score: field(5).parse().map_err(|_| bad("score"))?,
            epochs: field(6).parse().map_err(|_| bad("epochs"))?,
        });
    }
    Ok(out)
}

fn append_results(path: &Path, rows: &[FoldResult]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(RESULTS_SCHEMA);
        text.push('\n');
        text.push_str(RESULTS_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&format_row(r));
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridReport {
    pub ran: usize,
    pub skipped: usize,
    pub remaining: usize,
}

/// Run every cell not yet recorded in `results`, `jobs` at a time. Finished
/// rows are appended in cell order after each batch, so an interrupted run
/// resumes where it stopped and produces the same file. `max_new_cells` stops
/// after that many new cells.
pub fn run_grid(
    cells: &[Cell],
    results: &Path,
    runner: &dyn CellRunner,
    jobs: usize,
    max_new_cells: Option<usize>,
) -> Result<GridReport> {
    let done: BTreeSet<(String, String, String, usize)> = read_results(results)?
        .into_iter()
        .map(|r| (r.pipeline, r.dataset, r.subject, r.fold))
        .collect();
    let todo: Vec<&Cell> = cells.iter().filter(|c| !done.contains(&c.key())).collect();
    let skipped = cells.len() - todo.len();
    let limit = max_new_cells.unwrap_or(usize::MAX).min(todo.len());
    let jobs = jobs.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    let mut ran = 0;
    for chunk in todo[..limit].chunks(jobs) {
        let rows = pool.install(|| chunk.par_iter().map(|c| runner.run(c)).collect::<Result<Vec<_>>>())?;
        append_results(results, &rows)?;
        ran += rows.len();
    }
    Ok(GridReport { ran, skipped, remaining: todo.len() - ran })
}

/// Runs cells by fine-tuning from stored checkpoints.
pub struct FinetuneRunner {
    pub datasets: BTreeMap<String, Dataset>,
    /// Keyed by pre-training id name.
    pub checkpoints: BTreeMap<String, Checkpoint>,
    /// Settings shared by every cell; architecture, strategy, class count and
    /// seed are filled in per cell.
    pub template: DownstreamSpec,
    /// Backbone architecture of the no-pre-training baseline.
    pub baseline_model: ModelConfig,
    pub root_seed: u64,
}

impl FinetuneRunner {
    /// Fails with the first pre-training id that has no checkpoint.
    pub fn check(&self, pipelines: &[PipelineSpec]) -> Result<()> {
        for p in pipelines {
            if p.pretrain != PretrainId::None && !self.checkpoints.contains_key(&p.pretrain.name()) {
                return Err(Error::MissingCheckpoint(p.pretrain.name()));
            }
        }
        Ok(())
    }
}

impl CellRunner for FinetuneRunner {
    fn run(&self, cell: &Cell) -> Result<FoldResult> {
        let dataset = self
            .datasets
            .get(&cell.dataset)
            .ok_or_else(|| Error::Config(format!("unknown dataset `{}`", cell.dataset)))?;
        let subject = dataset
            .subjects
            .iter()
            .find(|s| s.subject == cell.subject)
            .ok_or_else(|| Error::Config(format!("dataset `{}` has no subject `{}`", cell.dataset, cell.subject)))?;
        let fold = dataset
            .folds
            .get(&cell.subject)
            .and_then(|f| f.get(cell.fold))
            .ok_or_else(|| Error::Split(format!("no fold {} for subject {}", cell.fold, cell.subject)))?;
        let checkpoint = match cell.pipeline.pretrain {
            PretrainId::None => None,
            id => Some(self.checkpoints.get(&id.name()).ok_or_else(|| Error::MissingCheckpoint(id.name()))?),
        };
        let name = cell.pipeline.name();
        let mut spec = self.template.clone();
        spec.architecture = cell.pipeline.architecture;
        spec.strategy = cell.pipeline.strategy;
        spec.n_classes = spec.n_classes.max(subject.n_classes());
        spec.seed = seed::sub_seed(self.root_seed, &format!("cell/{name}/{}/{}/{}", cell.dataset, cell.subject, cell.fold));
        let n_samples = subject.examples.first().map_or(0, |e| e.n_samples());
        let model = build_downstream::<f32>(checkpoint, &spec, &subject.montage, &self.baseline_model, n_samples)?;
        let data = FoldData::from_fold(subject, fold);
        let outcome = finetune(model, &data, dataset.metric(), &mut ())?;
        Ok(FoldResult {
            pipeline: name,
            dataset: cell.dataset.clone(),
            subject: cell.subject.clone(),
            fold: cell.fold,
            metric: dataset.metric(),
            score: outcome.score,
            epochs: outcome.epochs,
        })
    }
}

/// Identifies one cross-validation fold across datasets.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FoldId {
    pub dataset: String,
    pub subject: String,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub dataset: String,
    pub pipeline: String,
    pub metric: Metric,
    pub mean: f64,
    /// Sample standard deviation (zero for a single fold).
    pub std: f64,
    pub n_folds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingTable {
    /// Pipelines by average rank, ties by name.
    pub pipelines: Vec<String>,
    pub average_rank: BTreeMap<String, f64>,
    /// `histogram[p][k]` counts folds where `p` ranked `k + 1`.
    pub histogram: BTreeMap<String, Vec<usize>>,
    /// Per fold, pipelines from rank 1 downwards with their scores.
    pub fold_ranks: BTreeMap<FoldId, Vec<(String, f64)>>,
    pub scores: Vec<ScoreSummary>,
}

/// Rank pipelines within every fold (higher score first, ties by name) and
/// aggregate. Every pipeline must have a score on every fold.
pub fn rank(results: &[FoldResult]) -> Result<RankingTable> {
    let pipelines: BTreeSet<String> = results.iter().map(|r| r.pipeline.clone()).collect();
    if pipelines.is_empty() {
        return Err(Error::Aggregation("no results to rank".into()));
    }
    let mut by_fold: BTreeMap<FoldId, BTreeMap<String, f64>> = BTreeMap::new();
    for r in results {
        let id = FoldId { dataset: r.dataset.clone(), subject: r.subject.clone(), fold: r.fold };
        if by_fold.entry(id).or_default().insert(r.pipeline.clone(), r.score).is_some() {
            return Err(Error::Aggregation(format!(
                "duplicate result for {} on {}/{}/{}",
                r.pipeline, r.dataset, r.subject, r.fold
            )));
        }
    }
    let mut gaps = Vec::new();
    for (id, scores) in &by_fold {
        for p in pipelines.iter().filter(|p| !scores.contains_key(*p)) {
            gaps.push(format!("{p} on {}/{}/{}", id.dataset, id.subject, id.fold));
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Aggregation(format!("missing fold scores: {}", gaps.join("; "))));
    }
    let n = pipelines.len();
    let mut rank_sum: BTreeMap<String, usize> = BTreeMap::new();
    let mut histogram: BTreeMap<String, Vec<usize>> = pipelines.iter().map(|p| (p.clone(), vec![0; n])).collect();
    let mut fold_ranks = BTreeMap::new();
    for (id, scores) in by_fold.iter() {
        let mut order: Vec<(String, f64)> = scores.iter().map(|(p, s)| (p.clone(), *s)).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (k, (p, _)) in order.iter().enumerate() {
            *rank_sum.entry(p.clone()).or_default() += k + 1;
            histogram.get_mut(p).expect("known")[k] += 1;
        }
        fold_ranks.insert(id.clone(), order);
    }
    let n_folds = by_fold.len() as f64;
    let average_rank: BTreeMap<String, f64> = rank_sum.iter().map(|(p, s)| (p.clone(), *s as f64 / n_folds)).collect();
    let mut ordered: Vec<String> = pipelines.into_iter().collect();
    ordered.sort_by(|a, b| average_rank[a].total_cmp(&average_rank[b]).then_with(|| a.cmp(b)));

    let mut groups: BTreeMap<(String, String), (Metric, Vec<f64>)> = BTreeMap::new();
    for r in results {
        groups.entry((r.dataset.clone(), r.pipeline.clone())).or_insert((r.metric, Vec::new())).1.push(r.score);
    }
    let scores = groups
        .into_iter()
        .map(|((dataset, pipeline), (metric, v))| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 } else { 0.0 };
            ScoreSummary { dataset, pipeline, metric, mean: m, std: var.sqrt(), n_folds: v.len() }
        })
        .collect();
    Ok(RankingTable { pipelines: ordered, average_rank, histogram, fold_ranks, scores })
}

/// Write `ranking.csv`, `scores_by_paradigm.csv` and the long-format
/// `ranks_long.csv` into `dir`.
pub fn write_report(table: &RankingTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = table.pipelines.len();
    let csv_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: csv::Error| Error::format(&p, e.to_string())
    };

    let path = dir.join("ranking.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["pipeline".to_string(), "average_rank".to_string()];
    header.extend((1..=n).map(|k| format!("rank_{k}")));
    w.write_record(&header).map_err(csv_err(&path))?;
    for p in &table.pipelines {
        let mut row = vec![p.clone(), format!("{:.6}", table.average_rank[p])];
        row.extend(table.histogram[p].iter().map(usize::to_string));
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("scores_by_paradigm.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["dataset", "pipeline", "metric", "mean", "std", "n_folds"]).map_err(csv_err(&path))?;
    for s in &table.scores {
        w.write_record([
            s.dataset.clone(),
            s.pipeline.clone(),
            s.metric.name().to_string(),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.std),
            s.n_folds.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("ranks_long.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["dataset", "subject", "fold", "pipeline", "score", "rank"]).map_err(csv_err(&path))?;
    for (id, order) in &table.fold_ranks {
        for (k, (p, s)) in order.iter().enumerate() {
            w.write_record([
                id.dataset.clone(),
                id.subject.clone(),
                id.fold.to_string(),
                p.clone(),
                format!("{s:?}"),
                (k + 1).to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
