use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sjepa::checkpoint::Checkpoint;
use sjepa::data::{self, Example, Paradigm, SplitConfig, SubjectEpochs};
use sjepa::harness::{self, Dataset, FinetuneRunner, PipelineSpec, PretrainId};
use sjepa::pretrain::{run_pretraining, Observer, RunOutput};
use sjepa::seed;
use sjepa::Error;

use crate::config::{self, FinetuneFile, FoldSettings, GridFile, PretrainFile, RunManifest, SynthFile};
use crate::{CliError, Common};

fn config_path(c: &Common) -> Result<&Path, CliError> {
    c.config.as_deref().ok_or_else(|| CliError::Input("--config is required".into()))
}

fn out_dir(c: &Common) -> Result<&Path, CliError> {
    c.out.as_deref().ok_or_else(|| CliError::Input("--out is required".into()))
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} not found: {}", path.display())))
    }
}

pub fn synth(c: &Common) -> Result<(), CliError> {
    let path = config_path(c)?;
    let mut file: SynthFile = config::load(path, "synth")?;
    file.seed = c.seed.unwrap_or(file.seed);
    file.synth.validate()?;
    if c.dry_run {
        println!("config ok");
        return Ok(());
    }
    let out = out_dir(c)?;
    RunManifest::new("synth", path, file.seed, out, &file)?.write(out)?;
    let corpus = data::synthesize(&file.synth, file.seed)?;
    let paradigm = file.synth.task.as_ref().map_or(Paradigm::Synthetic, |t| t.paradigm);
    data::write_corpus(out, paradigm, &corpus.recordings, &corpus.epochs)?;
    let examples: usize = corpus.epochs.iter().map(|e| e.examples.len()).sum();
    let classes = corpus.epochs.first().map_or(0, SubjectEpochs::n_classes);
    println!(
        "{} subjects, {} channels, {} labeled examples, {} classes -> {}",
        corpus.recordings.len(),
        corpus.montage.len(),
        examples,
        classes,
        out.display()
    );
    Ok(())
}

struct Progress;

impl<T> Observer<T> for Progress {
    fn on_validation(&mut self, epoch: usize, loss: f64) -> f64 {
        println!("epoch {epoch}: validation loss {loss:.6}");
        loss
    }
}

pub fn pretrain(c: &Common) -> Result<(), CliError> {
    let path = config_path(c)?;
    let mut file: PretrainFile = config::load(path, "pretrain")?;
    file.seed = c.seed.unwrap_or(file.seed);
    file.pretrain.seed = file.seed;
    file.pretrain.validate()?;
    require_dir(&file.corpus, "corpus")?;
    if c.dry_run {
        println!("config ok");
        return Ok(());
    }
    let out = out_dir(c)?;
    RunManifest::new("pretrain", path, file.seed, out, &file)?.write(out)?;
    let (_, recordings, _) = data::read_corpus(&file.corpus)?;
    let n_val = file.validation_subjects;
    if recordings.len() <= n_val || n_val == 0 {
        return Err(CliError::Input(format!(
            "{} recordings cannot supply {n_val} validation subjects and at least one training subject",
            recordings.len()
        )));
    }
    let montage = recordings[0].montage.clone();
    if let Some(r) = recordings.iter().find(|r| r.montage != montage) {
        return Err(Error::Compatibility(format!("subject {} uses a different montage", r.subject_id)).into());
    }
    let slice = |recs: &[data::Recording]| -> Result<Vec<Example>, CliError> {
        let mut out = Vec::new();
        for r in recs {
            out.extend(data::slice_continuous(r, file.pretrain.example_length_s, file.interval_s)?);
        }
        Ok(out)
    };
    let (train_recs, val_recs) = recordings.split_at(recordings.len() - n_val);
    let train = slice(train_recs)?;
    let validation = slice(val_recs)?;
    println!("{} training and {} validation examples", train.len(), validation.len());
    let output = RunOutput { dir: out.to_path_buf() };
    let outcome = run_pretraining::<f32>(train, validation, file.pretrain.clone(), montage, Some(&output), &mut Progress)?;
    println!(
        "best epoch {} of {}{}; checkpoint {}",
        outcome.best_epoch,
        outcome.epochs_run,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        output.best().display()
    );
    Ok(())
}

fn load_dataset(name: &str, corpus: &Path, folds: FoldSettings, root_seed: u64) -> Result<Dataset, CliError> {
    require_dir(corpus, "corpus")?;
    let (manifest, _, subjects) = data::read_corpus(corpus)?;
    if !manifest.has_epochs {
        return Err(CliError::Input(format!("corpus {} has no labeled epochs", corpus.display())));
    }
    let split = SplitConfig {
        n_pretrain: 0,
        n_validation: 0,
        n_test: subjects.len(),
        n_folds: folds.n_folds,
        validation_fraction: folds.validation_fraction,
    };
    let plan = data::make_splits(&subjects, &split, &mut seed::rng(root_seed, &format!("folds/{name}")))?;
    Ok(Dataset { name: name.into(), paradigm: manifest.paradigm, subjects, folds: plan.folds })
}

fn pretrain_id(ckpt: &Checkpoint) -> PretrainId {
    PretrainId::Pretrained { length_s: ckpt.config.example_length_s, fraction: ckpt.config.mask_diameter_fraction }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} not found: {}", path.display())))
    }
}

fn print_summary(results: &Path) -> Result<(), CliError> {
    let rows = harness::read_results(results)?;
    let mut by: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        by.entry((r.pipeline, r.dataset)).or_default().push(r.score);
    }
    for ((p, d), v) in by {
        println!("{p} on {d}: mean {:.4} over {} folds", v.iter().sum::<f64>() / v.len() as f64, v.len());
    }
    Ok(())
}

pub fn finetune(c: &Common) -> Result<(), CliError> {
    let path = config_path(c)?;
    let mut file: FinetuneFile = config::load(path, "finetune")?;
    file.seed = c.seed.unwrap_or(file.seed);
    let template = file.downstream.spec(file.architecture, file.strategy);
    if let Some(ck) = &file.checkpoint {
        require_file(ck, "checkpoint")?;
    }
    require_dir(&file.corpus, "corpus")?;
    if file.checkpoint.is_none() {
        PipelineSpec::new(PretrainId::None, file.architecture, file.strategy)?;
    }
    if c.dry_run {
        println!("config ok");
        return Ok(());
    }
    let out = out_dir(c)?;
    RunManifest::new("finetune", path, file.seed, out, &file)?.write(out)?;
    let name = file.dataset.clone().unwrap_or_else(|| {
        file.corpus.file_name().map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned())
    });
    let dataset = load_dataset(&name, &file.corpus, file.folds, file.seed)?;
    let mut checkpoints = BTreeMap::new();
    let id = match &file.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let id = pretrain_id(&ckpt);
            checkpoints.insert(id.name(), ckpt);
            id
        }
        None => PretrainId::None,
    };
    let pipeline = PipelineSpec::new(id, file.architecture, file.strategy)?;
    let cells = harness::enumerate_cells(&[pipeline], std::slice::from_ref(&dataset));
    let runner = FinetuneRunner {
        datasets: BTreeMap::from([(name, dataset)]),
        checkpoints,
        template,
        baseline_model: file.model.clone(),
        root_seed: file.seed,
    };
    let results = out.join("results.csv");
    let report = harness::run_grid(&cells, &results, &runner, c.jobs.unwrap_or(1), None)?;
    println!("{}: {} folds run, {} already present", pipeline.name(), report.ran, report.skipped);
    print_summary(&results)
}

pub fn grid(c: &Common) -> Result<(), CliError> {
    let path = config_path(c)?;
    let mut file: GridFile = config::load(path, "grid")?;
    file.seed = c.seed.unwrap_or(file.seed);
    let pipelines = harness::enumerate_pipelines(&file.grid)?;
    for d in &file.datasets {
        require_dir(&d.corpus, "corpus")?;
    }
    for p in &pipelines {
        if p.pretrain != PretrainId::None && !file.checkpoints.contains_key(&p.pretrain.name()) {
            return Err(Error::MissingCheckpoint(p.pretrain.name()).into());
        }
    }
    for ck in file.checkpoints.values() {
        require_file(ck, "checkpoint")?;
    }
    if c.dry_run {
        println!("config ok: {} pipelines, {} datasets", pipelines.len(), file.datasets.len());
        return Ok(());
    }
    let out = out_dir(c)?;
    RunManifest::new("grid", path, file.seed, out, &file)?.write(out)?;
    let mut checkpoints = BTreeMap::new();
    for (key, p) in &file.checkpoints {
        let ckpt = Checkpoint::load(p)?;
        let id = pretrain_id(&ckpt).name();
        if &id != key {
            return Err(CliError::Input(format!("checkpoint {} was pre-trained as {id}, listed as {key}", p.display())));
        }
        checkpoints.insert(id, ckpt);
    }
    let datasets: Vec<Dataset> = file
        .datasets
        .iter()
        .map(|d| load_dataset(&d.name, &d.corpus, file.folds, file.seed))
        .collect::<Result<_, _>>()?;
    let cells = harness::enumerate_cells(&pipelines, &datasets);
    let runner = FinetuneRunner {
        datasets: datasets.into_iter().map(|d| (d.name.clone(), d)).collect(),
        checkpoints,
        template: file.downstream.spec(sjepa::nets::Placement::Contextual, sjepa::finetune::Strategy::Full),
        baseline_model: file.model.clone(),
        root_seed: file.seed,
    };
    runner.check(&pipelines)?;
    let results = out.join("results.csv");
    let report = harness::run_grid(&cells, &results, &runner, c.jobs.unwrap_or(1), file.max_new_cells)?;
    println!(
        "{} pipelines, {} cells: {} run, {} already present, {} remaining",
        pipelines.len(),
        cells.len(),
        report.ran,
        report.skipped,
        report.remaining
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct ReportConfig {
    results: PathBuf,
}

pub fn report(results: &Path, c: &Common) -> Result<(), CliError> {
    require_file(results, "results file")?;
    let rows = harness::read_results(results)?;
    let table = harness::rank(&rows)?;
    if c.dry_run {
        println!("results ok: {} rows, {} pipelines", rows.len(), table.pipelines.len());
        return Ok(());
    }
    let out = out_dir(c)?;
    let snapshot = ReportConfig { results: results.to_path_buf() };
    RunManifest::new("report", results, c.seed.unwrap_or(0), out, &snapshot)?.write(out)?;
    harness::write_report(&table, out)?;
    for (k, p) in table.pipelines.iter().enumerate() {
        println!("{:>3}. {p} (average rank {:.3})", k + 1, table.average_rank[p]);
    }
    Ok(())
}
