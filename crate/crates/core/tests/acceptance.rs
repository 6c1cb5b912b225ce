//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness so the report is printed even when
//! everything passes.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use sjepa::checkpoint::Checkpoint;
use sjepa::data::{
    make_splits, samples_for_seconds, slice_continuous, synthesize, Example, Paradigm, SplitConfig, SubjectEpochs,
    SynthConfig, TaskConfig, TaskKind,
};
use sjepa::finetune::{build_downstream, finetune, DownstreamModel, DownstreamSpec, FinetuneObserver, FoldData, FoldResult, Strategy};
use sjepa::graph::{Bound, Graph, NodeId};
use sjepa::harness::{self, Cell, CellRunner, Dataset, GridConfig};
use sjepa::metrics::{auc, Metric};
use sjepa::montage::{mask_for_center, sample_mask, Montage};
use sjepa::nets::{
    contextual_forward, encoder_forward, init_encoder, init_predictor, local_encode, local_forward, LocalEncoderConfig,
    ModelConfig, Placement, TransformerConfig,
};
use sjepa::params::ParamSet;
use sjepa::pretrain::{ema_update, run_pretraining, sjepa_loss, Observer, PretrainConfig, Pretrainer, TrainState};
use sjepa::seed;
use sjepa::tensor::Tensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn small_model(depth: usize) -> ModelConfig {
    ModelConfig {
        encoder: TransformerConfig { depth, ..Default::default() },
        predictor: TransformerConfig { depth, ..Default::default() },
        ..Default::default()
    }
}

fn random_montage(rng: &mut impl Rng, n: usize) -> Montage {
    Montage::from_positions((0..n).map(|i| {
        (format!("E{i}"), [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)])
    }))
    .expect("distinct names")
}

// ---------------------------------------------------------------- 1

fn brute_mask(m: &Montage, center: usize, fraction: f64) -> Vec<usize> {
    let pos: Vec<[f64; 3]> = (0..m.len()).map(|i| m.position(i)).collect();
    let dist = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let mut head = 0.0f64;
    for a in &pos {
        for b in &pos {
            head = head.max(dist(*a, *b));
        }
    }
    (0..m.len()).filter(|&j| dist(pos[center], pos[j]) <= fraction * head / 2.0).collect()
}

fn criterion_1() -> Outcome {
    let mut rng = seed::rng(1, "acceptance/masks");
    let fractions = [0.4, 0.6, 0.8];
    let mut checks = 0;
    for trial in 0..200 {
        let n = rng.random_range(3..=10);
        let m = random_montage(&mut rng, n);
        let windows = rng.random_range(1..=4);
        for center in 0..n {
            let mut previous: Option<BTreeSet<usize>> = None;
            for &f in &fractions {
                let got = mask_for_center(&m, center, f, windows).map_err(e2s)?;
                let want = brute_mask(&m, center, f);
                ensure(got.masked_channels == want, format!("montage {trial}, center {center}, fraction {f}: {:?} vs {want:?}", got.masked_channels))?;
                for c in 0..n {
                    for w in 0..windows {
                        ensure(got.token_mask[c * windows + w] == want.contains(&c), "token mask disagrees with channel set")?;
                    }
                }
                let set: BTreeSet<usize> = want.into_iter().collect();
                if let Some(p) = &previous {
                    ensure(p.is_subset(&set), format!("montage {trial}, center {center}: mask shrinks at fraction {f}"))?;
                }
                previous = Some(set);
                checks += 1;
            }
        }
        for &f in &fractions {
            let s = sample_mask(&m, f, windows, &mut rng).map_err(e2s)?;
            ensure(s.masked_channels == brute_mask(&m, s.center_channel, f), "sampled mask differs from oracle")?;
            ensure(s.masked_channels.len() < n, "sampled mask covers every channel")?;
            checks += 1;
        }
    }
    Ok(format!("{checks} masks equal the brute-force oracle; nested in fraction for every center"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let cfg = LocalEncoderConfig::default();
    let params: ParamSet<f32> = cfg.init(&mut seed::rng(2, "acceptance/tokenizer"));
    for t in 152..=4096usize {
        let want = (t - 152) / 128 + 1;
        ensure(cfg.n_tokens(t) == want, format!("T={t}: {} tokens, expected {want}", cfg.n_tokens(t)))?;
        // the encoder itself runs at every window boundary and on a stride between
        if (t - 152) % 128 > 1 && (t - 152) % 128 != 127 && t % 16 != 0 {
            continue;
        }
        let signal = vec![0.5f32; t];
        let tokens = local_encode(&signal, &params, &cfg).map_err(e2s)?;
        ensure(tokens.shape() == (want, 64), format!("T={t}: encoder returned {:?}", tokens.shape()))?;
    }
    for (seconds, samples, tokens) in [(1.1875, 152, 1), (4.1875, 536, 4), (16.1875, 2072, 16)] {
        ensure(samples_for_seconds(seconds, 128.0) == samples, format!("{seconds} s is not {samples} samples"))?;
        ensure(cfg.n_tokens(samples) == tokens, format!("{samples} samples is not {tokens} tokens"))?;
    }
    ensure(cfg.n_tokens(151) == 0, "a 151-sample signal yields a token")?;
    Ok("token counts exact for T in 152..=4096; 152/536/2072 -> 1/4/16".into())
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let cfg = LocalEncoderConfig::default();
    let mut rng = seed::rng(3, "acceptance/locality");
    let mut untouched = 0;
    for trial in 0..100 {
        let params: ParamSet<f32> = cfg.init(&mut rng);
        let t = rng.random_range(152..=1200);
        let signal: Vec<f32> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = local_encode(&signal, &params, &cfg).map_err(e2s)?;
        let i = rng.random_range(0..t);
        let mut perturbed = signal.clone();
        perturbed[i] += rng.random_range(0.5f32..3.0);
        let out = local_encode(&perturbed, &params, &cfg).map_err(e2s)?;
        let covered = (0..base.rows()).any(|k| (k * 128..k * 128 + 152).contains(&i));
        let mut changed_inside = false;
        for k in 0..base.rows() {
            let (start, end) = (k * 128, k * 128 + 152);
            if (start..end).contains(&i) {
                changed_inside |= base.row(k) != out.row(k);
            } else {
                let same = base.row(k).iter().zip(out.row(k)).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, format!("trial {trial}: token {k} changed though sample {i} lies outside its window"))?;
                untouched += 1;
            }
        }
        ensure(changed_inside || !covered, format!("trial {trial}: no token covering sample {i} responded"))?;
    }
    Ok(format!("{untouched} tokens outside the perturbed window bit-identical over 100 trials"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let cfg = TransformerConfig { depth: 8, ..Default::default() };
    let mut rng = seed::rng(4, "acceptance/equivariance");
    let params: ParamSet<f32> = init_encoder("ctx", &cfg, &mut rng);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let l = rng.random_range(2..=64);
        let x = Tensor::from_fn(l, 64, |_, _| rng.random_range(-1.0f32..1.0));
        let all: Vec<usize> = (0..l).collect();
        let base = contextual_forward(&x, &all, &params, "ctx", &cfg).map_err(e2s)?;
        let mut perm = all.clone();
        perm.shuffle(&mut rng);
        let out = contextual_forward(&x, &perm, &params, "ctx", &cfg).map_err(e2s)?;
        for (r, &p) in perm.iter().enumerate() {
            for (a, b) in out.row(r).iter().zip(base.row(p)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst < 1e-5, format!("max deviation {worst:e}"))?;
    Ok(format!("50 permutations, max deviation {worst:.2e} (< 1e-5)"))
}

// ---------------------------------------------------------------- 5

struct GradReport {
    network: &'static str,
    worst: f64,
}

/// Central differences on `n` sampled entries of `params` against the
/// analytic gradient of `build`.
fn grad_check(
    network: &'static str,
    params: &ParamSet<f64>,
    build: &dyn Fn(&mut Graph<f64>, &Bound) -> NodeId,
    rng: &mut impl Rng,
) -> Result<GradReport, String> {
    let h = 1e-3;
    let mut g = Graph::new();
    let b = g.bind(params, |_| true);
    let loss = build(&mut g, &b);
    let mut grads = g.backward(loss);
    let analytic = b.collect(&mut grads);
    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let b = g.bind(p, |_| false);
        let l = build(&mut g, &b);
        g.value(l).get(0, 0)
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let name = &names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..params.get(name).expect("listed").len());
        let mut p = params.clone();
        let orig = p.get(name).expect("listed").data()[idx];
        p.get_mut(name).expect("listed").data_mut()[idx] = orig + h;
        let up = eval(&p);
        p.get_mut(name).expect("listed").data_mut()[idx] = orig - h;
        let down = eval(&p);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(name).map_or(0.0, |t| t.data()[idx]);
        let scale = a.abs().max(numeric.abs());
        // Entries whose gradient vanishes to rounding level carry no signal.
        let rel = if scale < 1e-7 { 0.0 } else { (a - numeric).abs() / scale };
        if !(rel < 1e-3) {
            return Err(format!("{network}: `{name}`[{idx}] analytic {a:e} vs numeric {numeric:e} (rel {rel:e})"));
        }
        worst = worst.max(rel);
    }
    Ok(GradReport { network, worst })
}

fn probe(g: &mut Graph<f64>, x: NodeId, rng_seed: u64) -> NodeId {
    let (r, c) = g.value(x).shape();
    let mut rng = seed::rng(rng_seed, "probe");
    let w = g.constant(Tensor::from_fn(r * c, 1, |_, _| rng.random_range(-1.0..1.0)));
    let flat = g.reshape(x, 1, r * c);
    g.matmul(flat, w)
}

fn criterion_5() -> Outcome {
    let mut rng = seed::rng(5, "acceptance/gradients");
    let model = ModelConfig::default();
    let mut reports = Vec::new();

    let local: ParamSet<f64> = model.local.init(&mut rng);
    let signal = Tensor::from_fn(2 * 536, 1, |_, _| rng.random_range(-1.0..1.0));
    let lc = model.local.clone();
    reports.push(grad_check(
        "local encoder",
        &local,
        &|g, b| {
            let x = g.constant(signal.clone());
            let out = local_forward(g, b, &lc, x, 2).expect("long enough");
            probe(g, out, 1)
        },
        &mut rng,
    )?);

    let enc: ParamSet<f64> = init_encoder("ctx", &model.encoder, &mut rng);
    let tokens = Tensor::from_fn(12, 64, |_, _| rng.random_range(-1.0..1.0));
    let ec = model.encoder;
    reports.push(grad_check(
        "contextual encoder",
        &enc,
        &|g, b| {
            let x = g.constant(tokens.clone());
            let out = encoder_forward(g, b, "ctx", &ec, x);
            probe(g, out, 2)
        },
        &mut rng,
    )?);

    let pred: ParamSet<f64> = init_predictor("pred", &model.predictor, &mut rng);
    let queries = Tensor::from_fn(5, 64, |_, _| rng.random_range(-1.0..1.0));
    let memory = Tensor::from_fn(9, 64, |_, _| rng.random_range(-1.0..1.0));
    let pc = model.predictor;
    reports.push(grad_check(
        "predictor",
        &pred,
        &|g, b| {
            let q = g.constant(queries.clone());
            let m = g.constant(memory.clone());
            let out = sjepa::nets::predictor_forward(g, b, "pred", &pc, q, m);
            probe(g, out, 3)
        },
        &mut rng,
    )?);

    let montage = Montage::standard_62().spread_subset(6).map_err(e2s)?;
    let samples: Vec<f32> = (0..6 * 536).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let example = Example::labeled(6, 536, samples, 1).map_err(e2s)?;
    for (arch, label) in [
        (Placement::Contextual, "contextual classifier"),
        (Placement::PostLocal, "post-local classifier"),
        (Placement::PreLocal, "pre-local classifier"),
    ] {
        let spec = DownstreamSpec::new(arch, Strategy::Full, 2);
        let dm = build_downstream::<f64>(None, &spec, &montage, &small_model(2), 536).map_err(e2s)?;
        reports.push(grad_check(
            label,
            &dm.params,
            &|g, b| {
                let logits = dm.forward(g, b, &example).expect("shapes agree");
                g.cross_entropy(logits, &[1])
            },
            &mut rng,
        )?);
    }
    let summary: Vec<String> = reports.iter().map(|r| format!("{} {:.1e}", r.network, r.worst)).collect();
    Ok(format!("20 entries per network, worst relative error: {}", summary.join(", ")))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let corpus = synthesize(&SynthConfig::new(4, 8, 100.0), 6).map_err(e2s)?;
    let mut per_subject: Vec<Vec<Example>> =
        corpus.recordings.iter().map(|r| slice_continuous(r, 16.1875, 16.9)).collect::<Result<_, _>>().map_err(e2s)?;
    let validation = per_subject.pop().expect("four subjects");
    let train: Vec<Example> = per_subject.into_iter().flatten().collect();
    let mut cfg = PretrainConfig::new(16.1875, 0.6);
    cfg.learning_rate = 3e-4;
    cfg.batch_size = 8;
    cfg.seed = 6;
    let state = TrainState::<f32>::new(cfg, corpus.montage.clone()).map_err(e2s)?;
    let windows = state.config.model.local.n_tokens(2072);
    ensure(windows == 16, format!("{windows} windows per channel"))?;
    let mut mrng = seed::rng(6, "acceptance/fixed-masks");
    let masks: Vec<_> = train
        .iter()
        .map(|_| sample_mask(&corpus.montage, 0.6, windows, &mut mrng))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let train_loss = |s: &TrainState<f32>| -> Result<f64, String> {
        let mut sum = 0.0;
        for (e, m) in train.iter().zip(&masks) {
            sum += sjepa_loss(e, m, s).map_err(e2s)?.0 as f64;
        }
        Ok(sum / train.len() as f64)
    };
    let initial = train_loss(&state)?;
    let student_names: BTreeSet<String> = state.student.names().map(str::to_string).collect();
    let mut trainer = Pretrainer::new(state, train.clone(), validation).map_err(e2s)?;
    let n = train.len();
    let tau = trainer.state.config.ema_momentum;
    let mut worst_ema = 0.0f64;
    for step in 0..200 {
        let batch: Vec<usize> = (0..8).map(|i| (step * 8 + i) % n).collect();
        let teacher_before = trainer.state.teacher.clone();
        let report = trainer.train_step(&batch).map_err(e2s)?;
        for t in &report.traces {
            ensure(t.n_tokens == 8 * 16, format!("step {step}: {} tokens", t.n_tokens))?;
            ensure(t.teacher_len == t.n_tokens, format!("step {step}: teacher saw {} of {}", t.teacher_len, t.n_tokens))?;
            ensure(
                t.context_len == t.n_tokens - t.n_masked,
                format!("step {step}: context {} for {} tokens, {} masked", t.context_len, t.n_tokens, t.n_masked),
            )?;
            ensure(t.n_masked > 0 && t.n_masked % 16 == 0 && t.n_masked < t.n_tokens, "mask is not whole channels")?;
        }
        let grads: BTreeSet<String> = report.grad_names.iter().cloned().collect();
        ensure(grads.is_subset(&student_names), "a gradient was produced for a non-student tensor")?;
        // the teacher moves only by the EMA rule: no gradient reaches it
        for (name, t) in trainer.state.teacher.iter() {
            let old = teacher_before.get(name).expect("stable names");
            let s = trainer.state.student.get(name).expect("teacher mirrors student");
            for ((new, old), s) in t.data().iter().zip(old.data()).zip(s.data()) {
                let want = tau * *old as f64 + (1.0 - tau) * *s as f64;
                worst_ema = worst_ema.max((*new as f64 - want).abs());
            }
        }
    }
    ensure(worst_ema < 1e-6, format!("teacher deviates from the EMA rule by {worst_ema:e}"))?;

    // geometric decay towards a frozen student
    let mut r = seed::rng(6, "acceptance/ema");
    let mut student: ParamSet<f64> = ParamSet::new();
    let mut teacher: ParamSet<f64> = ParamSet::new();
    student.insert("w", Tensor::from_fn(8, 8, |_, _| r.random_range(-1.0..1.0)));
    teacher.insert("w", Tensor::from_fn(8, 8, |_, _| r.random_range(-1.0..1.0)));
    let t0 = teacher.clone();
    let mut decay_err = 0.0f64;
    for k in 1..=500 {
        ema_update(&mut teacher, &student, tau).map_err(e2s)?;
        let f = tau.powi(k);
        for ((t, t0), s) in teacher.get("w").unwrap().data().iter().zip(t0.get("w").unwrap().data()).zip(student.get("w").unwrap().data()) {
            decay_err = decay_err.max((t - s - f * (t0 - s)).abs());
        }
    }
    ensure(decay_err < 1e-6, format!("EMA decay error {decay_err:e}"))?;

    let final_loss = train_loss(&trainer.state)?;
    let ratio = final_loss / initial;
    ensure(ratio < 0.6, format!("loss {initial:.4} -> {final_loss:.4} after 200 steps ({:.1} %)", 100.0 * ratio))?;
    Ok(format!(
        "context L-|masked|, teacher L on every step; teacher EMA-only (max dev {worst_ema:.1e}); decay err {decay_err:.1e}; loss {initial:.4} -> {final_loss:.4} ({:.1} % of initial)",
        100.0 * ratio
    ))
}

// ---------------------------------------------------------------- 7

/// Independent reference: epoch at which training stops and the best epoch.
fn stopping_oracle(losses: &[f64], patience: usize, warmup: usize) -> (usize, usize) {
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad = 0;
    for (i, &l) in losses.iter().enumerate() {
        let epoch = i + 1;
        if l < best {
            best = l;
            best_epoch = epoch;
            bad = 0;
        } else if epoch > warmup {
            bad += 1;
            if bad == patience {
                return (epoch, best_epoch);
            }
        }
    }
    (losses.len(), best_epoch)
}

struct Scripted(Vec<f64>);

impl<T> Observer<T> for Scripted {
    fn on_validation(&mut self, epoch: usize, _loss: f64) -> f64 {
        self.0[epoch - 1]
    }
}

impl<T> FinetuneObserver<T> for Scripted {
    fn on_validation(&mut self, epoch: usize, _loss: f64) -> f64 {
        self.0[epoch - 1]
    }
}

fn scripted_sequences(len: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(7, "acceptance/scripts");
    let mut seqs = vec![
        [3.0, 2.0, 1.0].into_iter().chain(std::iter::repeat(1.0)).take(len).collect(),
        std::iter::repeat_n(1.0, len).collect(),
        (0..len).map(|i| if i == 20 { 0.5 } else { 1.0 }).collect(),
    ];
    for _ in 0..3 {
        // mostly non-improving noise with occasional new minima
        let mut level = 10.0;
        seqs.push(
            (0..len)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        level -= rng.random_range(0.0..1.0);
                    }
                    level + rng.random_range(0.0..2.0)
                })
                .collect(),
        );
    }
    seqs
}

fn tiny_pretrain_setup() -> Result<(Vec<Example>, Vec<Example>, PretrainConfig, Montage), String> {
    let corpus = synthesize(&SynthConfig::new(2, 4, 24.0), 7).map_err(e2s)?;
    let mut per: Vec<Vec<Example>> =
        corpus.recordings.iter().map(|r| slice_continuous(r, 1.1875, 2.0)).collect::<Result<_, _>>().map_err(e2s)?;
    let validation: Vec<Example> = per.pop().unwrap().into_iter().take(2).collect();
    let train: Vec<Example> = per.pop().unwrap().into_iter().take(2).collect();
    let mut cfg = PretrainConfig::new(1.1875, 0.6);
    cfg.model = small_model(1);
    cfg.batch_size = 2;
    cfg.patience = 10;
    cfg.max_epochs = 200;
    Ok((train, validation, cfg, corpus.montage))
}

fn criterion_7() -> Outcome {
    let (train, validation, cfg, montage) = tiny_pretrain_setup()?;
    let mut lines = Vec::new();
    for seq in scripted_sequences(cfg.max_epochs) {
        let want = stopping_oracle(&seq, 10, 0);
        let out = run_pretraining::<f32>(train.clone(), validation.clone(), cfg.clone(), montage.clone(), None, &mut Scripted(seq))
            .map_err(e2s)?;
        ensure(
            (out.epochs_run, out.best_epoch) == want,
            format!("pre-training stopped at {:?}, oracle {want:?}", (out.epochs_run, out.best_epoch)),
        )?;
        lines.push(format!("{}/{}", want.0, want.1));
    }
    let pre = lines.join(" ");

    let montage = Montage::standard_62().spread_subset(6).map_err(e2s)?;
    let mut rng = seed::rng(7, "acceptance/ft-data");
    let mk = |n: usize, rng: &mut seed::Rng| -> Vec<Example> {
        (0..n)
            .map(|i| Example::labeled(6, 152, (0..6 * 152).map(|_| rng.random_range(-1.0f32..1.0)).collect(), i % 2).unwrap())
            .collect()
    };
    let data = FoldData { train: mk(4, &mut rng), validation: mk(2, &mut rng), test: mk(2, &mut rng) };
    let ckpt = fresh_checkpoint(&montage)?;
    let mut lines = Vec::new();
    for seq in scripted_sequences(150) {
        let want = stopping_oracle(&seq, 50, 10);
        let mut spec = DownstreamSpec::new(Placement::PostLocal, Strategy::Full, 2);
        spec.max_epochs = 150;
        let model = build_downstream::<f32>(Some(&ckpt), &spec, &montage, &ckpt.config.model, 152).map_err(e2s)?;
        let out = finetune(model, &data, Metric::Accuracy, &mut Scripted(seq)).map_err(e2s)?;
        ensure(
            (out.epochs, out.best_epoch) == want,
            format!("fine-tuning stopped at {:?}, oracle {want:?}", (out.epochs, out.best_epoch)),
        )?;
        lines.push(format!("{}/{}", want.0, want.1));
    }
    Ok(format!("stop/best epochs match the oracle; pre-training (patience 10): {pre}; fine-tuning (patience 50, warm-up 10): {}", lines.join(" ")))
}

/// An initialized, untrained checkpoint with a one-layer encoder and predictor.
fn fresh_checkpoint(montage: &Montage) -> Result<Checkpoint, String> {
    let mut cfg = PretrainConfig::new(1.1875, 0.6);
    cfg.model = small_model(1);
    let mut state = TrainState::<f32>::new(cfg, montage.clone()).map_err(e2s)?;
    state.epoch = 1;
    Ok(Checkpoint::from_state(&state, 1.0))
}

// ---------------------------------------------------------------- 8

struct Snapshots {
    pretrained: BTreeSet<String>,
    reference: ParamSet<f32>,
    unchanged: Vec<bool>,
}

impl FinetuneObserver<f32> for Snapshots {
    fn on_epoch_end(&mut self, _epoch: usize, model: &DownstreamModel<f32>) {
        let same = self.pretrained.iter().all(|n| {
            let a = model.params.get(n).expect("kept");
            let b = self.reference.get(n).expect("kept");
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        self.unchanged.push(same);
    }
}

fn frequency_corpus(subjects: usize, per_class: usize, amplitude: f64, seed: u64) -> Result<sjepa::data::SyntheticCorpus, String> {
    let mut cfg = SynthConfig::new(subjects, 8, 120.0);
    cfg.task = Some(TaskConfig {
        kind: TaskKind::Frequency { frequencies: vec![10.0, 20.0] },
        epochs_per_class: per_class,
        epoch_length_s: 4.1875,
        amplitude,
        paradigm: Paradigm::Synthetic,
    });
    synthesize(&cfg, seed).map_err(e2s)
}

/// Pre-train briefly on the continuous recordings of `corpus`.
fn pretrained_checkpoint(corpus: &sjepa::data::SyntheticCorpus, epochs: usize) -> Result<Checkpoint, String> {
    let mut per: Vec<Vec<Example>> =
        corpus.recordings.iter().map(|r| slice_continuous(r, 4.1875, 4.5)).collect::<Result<_, _>>().map_err(e2s)?;
    let validation = per.pop().expect("two subjects");
    let train: Vec<Example> = per.into_iter().flatten().collect();
    let mut cfg = PretrainConfig::new(4.1875, 0.6);
    cfg.model = small_model(1);
    cfg.batch_size = 16;
    cfg.learning_rate = 3e-4;
    cfg.max_epochs = epochs;
    cfg.seed = 8;
    let out = run_pretraining::<f32>(train, validation, cfg, corpus.montage.clone(), None, &mut ()).map_err(e2s)?;
    Ok(Checkpoint::from_state(&out.best, out.best.best_val.unwrap_or(f64::NAN)))
}

fn criterion_8() -> Outcome {
    let corpus = frequency_corpus(2, 20, 2.0, 8)?;
    let ckpt = pretrained_checkpoint(&corpus, 2)?;
    let subject = &corpus.epochs[0];
    let split = SplitConfig { n_pretrain: 0, n_validation: 0, n_test: 1, n_folds: 5, validation_fraction: 0.2 };
    let plan = make_splits(std::slice::from_ref(subject), &split, &mut seed::rng(8, "acceptance/folds")).map_err(e2s)?;
    let data = FoldData::from_fold(subject, &plan.folds[&subject.subject][0]);
    let mut notes = Vec::new();
    let mut kept = 0;
    for strategy in [Strategy::New, Strategy::Full] {
        let mut spec = DownstreamSpec::new(Placement::Contextual, strategy, 2);
        spec.max_epochs = 14;
        spec.batch_size = 8;
        let model = build_downstream::<f32>(Some(&ckpt), &spec, &corpus.montage, &ckpt.config.model, 536).map_err(e2s)?;
        ensure(!model.pretrained.is_empty(), "nothing was taken from the checkpoint")?;
        kept = model.pretrained.len();
        let mut obs = Snapshots { pretrained: model.pretrained.clone(), reference: model.params.clone(), unchanged: vec![] };
        finetune(model, &data, Metric::Accuracy, &mut obs).map_err(e2s)?;
        let u = &obs.unchanged;
        match strategy {
            Strategy::New => ensure(u.iter().all(|&x| x), format!("new-: pre-trained tensors changed ({u:?})"))?,
            Strategy::Full => {
                ensure(u.len() > 10, "full-: stopped before leaving warm-up")?;
                ensure(u[..10].iter().all(|&x| x), format!("full-: changed during warm-up ({u:?})"))?;
                ensure(u[10..].iter().all(|&x| !x), format!("full-: unchanged after warm-up ({u:?})"))?;
            }
        }
        notes.push(format!("{strategy}: {} epochs", u.len()));
    }
    Ok(format!(
        "new- keeps {} pre-trained tensors bit-identical; full- identical through epoch 10, changed from epoch 11 ({})",
        kept,
        notes.join(", ")
    ))
}

// ---------------------------------------------------------------- 9

fn fold_scores(subject: &SubjectEpochs, ckpt: &Checkpoint, montage: &Montage, spec: &DownstreamSpec) -> Result<Vec<f64>, String> {
    let split = SplitConfig { n_pretrain: 0, n_validation: 0, n_test: 1, n_folds: 5, validation_fraction: 0.2 };
    let plan = make_splits(std::slice::from_ref(subject), &split, &mut seed::rng(9, "acceptance/folds")).map_err(e2s)?;
    let mut scores = Vec::new();
    for (k, fold) in plan.folds[&subject.subject].iter().enumerate() {
        let mut spec = spec.clone();
        spec.seed = k as u64;
        let model = build_downstream::<f32>(Some(ckpt), &spec, montage, &ckpt.config.model, 536).map_err(e2s)?;
        let out = finetune(model, &FoldData::from_fold(subject, fold), Metric::Accuracy, &mut ()).map_err(e2s)?;
        scores.push(out.score);
    }
    Ok(scores)
}

fn criterion_9() -> Outcome {
    let corpus = frequency_corpus(2, 60, 2.0, 9)?;
    let ckpt = pretrained_checkpoint(&corpus, 3)?;
    let mut spec = DownstreamSpec::new(Placement::PreLocal, Strategy::Full, 2);
    spec.virtual_channels = 4;
    spec.batch_size = 8;
    spec.patience = 10;
    spec.max_epochs = 30;
    let subject = &corpus.epochs[0];
    let scores = fold_scores(subject, &ckpt, &corpus.montage, &spec)?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;

    let mut shuffled = subject.clone();
    let mut labels: Vec<Option<usize>> = shuffled.examples.iter().map(|e| e.label).collect();
    labels.shuffle(&mut seed::rng(9, "acceptance/shuffle"));
    for (e, l) in shuffled.examples.iter_mut().zip(labels) {
        e.label = l;
    }
    let control = fold_scores(&shuffled, &ckpt, &corpus.montage, &spec)?;
    let control_mean = control.iter().sum::<f64>() / control.len() as f64;
    let fmt = |v: &[f64]| v.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join(" ");
    ensure(mean >= 0.9, format!("mean test accuracy {mean:.3} over folds [{}]", fmt(&scores)))?;
    ensure((0.4..=0.6).contains(&control_mean), format!("shuffled-label control {control_mean:.3} [{}]", fmt(&control)))?;
    Ok(format!(
        "pre-local, V=4: mean accuracy {mean:.3} [{}]; shuffled labels {control_mean:.3} [{}]",
        fmt(&scores),
        fmt(&control)
    ))
}

// ---------------------------------------------------------------- 10

fn brute_auc(scores: &[f64], positives: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &p) in positives.iter().enumerate() {
        if !p {
            continue;
        }
        for (j, &q) in positives.iter().enumerate() {
            if q {
                continue;
            }
            pairs += 1.0;
            wins += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn criterion_10() -> Outcome {
    let mut sets = 0u64;
    for n in 2..=8usize {
        let levels: u64 = if n <= 6 { n.min(4) as u64 } else { 3 };
        let combos = levels.pow(n as u32);
        for mask in 1..(1u32 << n) - 1 {
            let positives: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            for code in 0..combos {
                let mut c = code;
                let scores: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = c % levels;
                        c /= levels;
                        v as f64 / levels as f64
                    })
                    .collect();
                let got = auc(&scores, &positives).map_err(e2s)?;
                let want = brute_auc(&scores, &positives);
                ensure(got == want, format!("scores {scores:?}, labels {positives:?}: {got} vs {want}"))?;
                sets += 1;
            }
        }
        ensure(auc(&vec![0.5; n], &vec![true; n]).is_err(), "single-class AUC accepted")?;
    }
    let example = auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).map_err(e2s)?;
    let example_brute = brute_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]);
    ensure(example == example_brute, "worked example disagrees with brute force")?;
    let tied = auc(&[0.9, 0.6, 0.6, 0.1], &[true, true, false, false]).map_err(e2s)?;
    ensure(tied == 0.875, format!("tied example gives {tied}"))?;
    Ok(format!(
        "{sets} score/label sets of size 2..=8 equal brute force; {{pos .9,.4; neg .6,.1}} -> {example} (3 of 4 pairs ordered), {{pos .9,.6; neg .6,.1}} -> {tied}"
    ))
}

// ---------------------------------------------------------------- 11

struct FakeRunner;

impl CellRunner for FakeRunner {
    fn run(&self, cell: &Cell) -> sjepa::Result<FoldResult> {
        let name = cell.pipeline.name();
        let h = seed::sub_seed(11, &format!("{name}/{}/{}/{}", cell.dataset, cell.subject, cell.fold));
        let metric = if cell.dataset == "ERP" { Metric::Auc } else { Metric::Accuracy };
        Ok(FoldResult {
            pipeline: name,
            dataset: cell.dataset.clone(),
            subject: cell.subject.clone(),
            fold: cell.fold,
            metric,
            // coarse values so ties occur
            score: (h % 21) as f64 / 20.0,
            epochs: (h % 300) as usize + 1,
        })
    }
}

fn paper_protocol() -> Vec<Dataset> {
    [Paradigm::Mi, Paradigm::Erp, Paradigm::Ssvep]
        .into_iter()
        .map(|p| Dataset {
            name: p.name().into(),
            paradigm: p,
            subjects: Vec::new(),
            folds: (48..55)
                .map(|s| {
                    let fold = sjepa::data::Fold { train: vec![], validation: vec![], test: vec![] };
                    (format!("S{s}"), vec![fold; 5])
                })
                .collect(),
        })
        .collect()
}

fn criterion_11() -> Outcome {
    let pipelines = harness::enumerate_pipelines(&GridConfig::full()).map_err(e2s)?;
    let datasets = paper_protocol();
    let cells = harness::enumerate_cells(&pipelines, &datasets);
    let dir = tempfile::tempdir().map_err(e2s)?;
    let full = dir.path().join("full.csv");
    let report = harness::run_grid(&cells, &full, &FakeRunner, 4, None).map_err(e2s)?;
    ensure(report.ran == cells.len(), "uninterrupted grid skipped cells")?;
    let rows = harness::read_results(&full).map_err(e2s)?;
    let mut per_pipeline: BTreeMap<String, usize> = BTreeMap::new();
    for r in &rows {
        *per_pipeline.entry(r.pipeline.clone()).or_default() += 1;
    }
    ensure(per_pipeline.len() == 57, format!("{} pipelines", per_pipeline.len()))?;
    ensure(per_pipeline.values().all(|&n| n == 105), "a pipeline does not have 105 fold rows")?;

    let table = harness::rank(&rows).map_err(e2s)?;
    let n = table.pipelines.len();
    ensure(table.fold_ranks.len() == 105, format!("{} folds ranked", table.fold_ranks.len()))?;
    for order in table.fold_ranks.values() {
        let ranks: usize = (1..=order.len()).sum();
        ensure(order.len() == n && ranks == n * (n + 1) / 2, "fold rank sum is not n(n+1)/2")?;
        let names: BTreeSet<&String> = order.iter().map(|(p, _)| p).collect();
        ensure(names.len() == n, "a pipeline ranked twice in one fold")?;
    }
    let total: f64 = table.average_rank.values().sum();
    ensure((total - (n * (n + 1) / 2) as f64).abs() < 1e-9, "average ranks do not sum to n(n+1)/2")?;

    // interrupted twice at arbitrary points, with different worker counts
    let resumed = dir.path().join("resumed.csv");
    harness::run_grid(&cells, &resumed, &FakeRunner, 3, Some(1000)).map_err(e2s)?;
    harness::run_grid(&cells, &resumed, &FakeRunner, 1, Some(2345)).map_err(e2s)?;
    let last = harness::run_grid(&cells, &resumed, &FakeRunner, 7, None).map_err(e2s)?;
    ensure(last.skipped == 3345 && last.remaining == 0, format!("resume bookkeeping {last:?}"))?;
    let a = std::fs::read(&full).map_err(e2s)?;
    let b = std::fs::read(&resumed).map_err(e2s)?;
    ensure(a == b, "resumed results CSV differs from the uninterrupted one")?;
    Ok(format!(
        "57 pipelines x 105 folds ({} rows); rank sums {} per fold; resumed CSV byte-identical ({} bytes)",
        rows.len(),
        n * (n + 1) / 2,
        a.len()
    ))
}

// ---------------------------------------------------------------- 12

fn criterion_12() -> Outcome {
    let (train, validation, mut cfg, montage) = tiny_pretrain_setup()?;
    cfg.seed = 12;
    let state = TrainState::<f32>::new(cfg, montage.clone()).map_err(e2s)?;
    let mut trainer = Pretrainer::new(state, train.clone(), validation.clone()).map_err(e2s)?;
    for _ in 0..5 {
        trainer.train_step(&[0, 1]).map_err(e2s)?;
    }
    let before = trainer.validate().map_err(e2s)?;
    let mask = trainer.sample_mask().map_err(e2s)?;
    let single = sjepa_loss(&validation[0], &mask, &trainer.state).map_err(e2s)?.0;

    let dir = tempfile::tempdir().map_err(e2s)?;
    let path = dir.path().join("best.ckpt");
    Checkpoint::from_state(&trainer.state, before).save(&path).map_err(e2s)?;
    let loaded = Checkpoint::load(&path).map_err(e2s)?;
    let state = loaded.to_state::<f32>();
    let single_after = sjepa_loss(&validation[0], &mask, &state).map_err(e2s)?.0;
    let restored = Pretrainer::new(state, train, validation).map_err(e2s)?;
    let after = restored.validate().map_err(e2s)?;
    ensure(before.to_bits() == after.to_bits(), format!("validation loss {before:e} became {after:e}"))?;
    ensure(single.to_bits() == single_after.to_bits(), "fixed-mask loss changed")?;
    ensure(loaded.meta.validation_loss.to_bits() == before.to_bits(), "stored loss changed")?;
    Ok(format!("validation loss {before:e} reproduced bit-for-bit after save/load"))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 12] = [
        ("mask geometry oracle", criterion_1, Duration::from_secs(10)),
        ("tokenizer arithmetic", criterion_2, Duration::from_secs(5)),
        ("receptive-field locality", criterion_3, Duration::from_secs(30)),
        ("permutation equivariance", criterion_4, Duration::from_secs(60)),
        ("gradient checks", criterion_5, Duration::from_secs(120)),
        ("training-loop contracts", criterion_6, Duration::from_secs(600)),
        ("early stopping", criterion_7, Duration::from_secs(120)),
        ("freeze and warm-up", criterion_8, Duration::from_secs(120)),
        ("downstream learnability", criterion_9, Duration::from_secs(900)),
        ("AUC oracle", criterion_10, Duration::from_secs(10)),
        ("harness bookkeeping", criterion_11, Duration::from_secs(60)),
        ("checkpoint round trip", criterion_12, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > *budget => Err(format!("{msg}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("criterion {id:>2} PASS {name} ({elapsed:.1?}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name} ({elapsed:.1?}): {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
