use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use qrn::cell::{GateTrace, ScanMode};
use qrn::checkpoint::{self, Checkpoint};
use qrn::config::RunConfig;
use qrn::data::{cap_context, load_dialog_task, load_qa_task, DatasetSplit, Example, TaskFiles};
use qrn::encoding::{IndexedExample, Vocabulary};
use qrn::gradcheck::check_gradients;
use qrn::model::{ModelConfig, QrnModel, TaskKind};
use qrn::scan::benchmark_scan;
use qrn::trainer::{evaluate, train_with_progress};
use qrn::{Precision, QrnError, Scalar, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Common, DataArgs, Kind};

/// Largest model `gradcheck` accepts.
const GRADCHECK_MAX_HIDDEN: usize = 16;
const GRADCHECK_MAX_STEPS: usize = 8;

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    if let Some(s) = common.scan {
        cfg.train.scan = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn task_kind(kind: Kind) -> TaskKind {
    match kind {
        Kind::Qa => TaskKind::Qa,
        Kind::Dialog => TaskKind::Dialog,
    }
}

fn load_files(data: &DataArgs, kind: TaskKind) -> qrn::Result<TaskFiles> {
    match kind {
        TaskKind::Qa => load_qa_task(&data.data, data.task),
        TaskKind::Dialog => load_dialog_task(&data.data, data.task, data.oov),
    }
}

fn fingerprint(files: &TaskFiles) -> Result<String> {
    let train = fs::read(&files.train_path).with_context(|| files.train_path.display().to_string())?;
    let test = fs::read(&files.test_path).with_context(|| files.test_path.display().to_string())?;
    Ok(checkpoint::fingerprint([train.as_slice(), test.as_slice()]))
}

pub fn train(common: &Common, data: &DataArgs, out: &Path) -> Result<()> {
    let cfg = run_config(common)?;
    let kind = task_kind(data.kind);
    let files = load_files(data, kind)?;
    let split = DatasetSplit::prepare(&files, cfg.train.dev_fraction, cfg.train.seed, cfg.train.context_cap)?;
    let qrn = cfg.qrn.clone();
    let mut model_config = match kind {
        TaskKind::Qa => ModelConfig::qa(qrn, split.vocab.len()),
        TaskKind::Dialog => {
            let slots = if cfg.slots > 0 { cfg.slots } else { split.max_response_len() };
            let mut m = ModelConfig::dialog(qrn, split.vocab.len(), slots);
            m.use_match = cfg.use_match;
            m
        }
    };
    model_config.reconstruction = cfg.reconstruction;
    model_config.reconstruction_weight = cfg.reconstruction_weight;
    println!(
        "train={} dev={} test={} vocab={}",
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        split.vocab.len()
    );
    let fp = fingerprint(&files)?;
    match cfg.precision {
        Precision::F32 => train_at::<f32>(&cfg, &split, model_config, out, fp),
        Precision::F64 => train_at::<f64>(&cfg, &split, model_config, out, fp),
    }
}

fn train_at<F: Scalar>(
    cfg: &RunConfig,
    split: &DatasetSplit,
    model_config: ModelConfig,
    out: &Path,
    fingerprint: String,
) -> Result<()> {
    let (model, log) = train_with_progress::<F>(&split.train, &split.dev, &model_config, &cfg.train, &mut |r, e| {
        if e.epoch == 0 {
            println!("restart={r}");
        }
        println!("{e}");
    })?;
    let chosen = log.chosen();
    println!(
        "chosen_restart={} best_epoch={} dev_loss={} wall_clock_s={:.1}",
        chosen.restart, chosen.best_epoch, chosen.best_dev_loss, log.wall_clock_s
    );
    let report = evaluate(&model, &split.test, cfg.train.scan)?;
    let ckpt = Checkpoint {
        model,
        vocab: split.vocab.clone(),
        train_config: cfg.train.clone(),
        fingerprint,
    };
    checkpoint::save(out, &ckpt)?;
    println!("checkpoint={}", out.display());
    println!("test_error={}", report.error_rate);
    Ok(())
}

/// Test examples of a task indexed with a checkpoint's vocabulary.
fn checkpoint_test_set(
    data: &DataArgs,
    manifest: &checkpoint::Manifest,
) -> Result<(Vec<Example>, Vec<IndexedExample>)> {
    let files = load_files(data, manifest.model_config.task)?;
    let mut test = files.test;
    cap_context(&mut test, manifest.train_config.context_cap);
    let indexed = manifest.vocab.index_all(&test)?;
    Ok((test, indexed))
}

pub fn eval(common: &Common, data: &DataArgs, dir: &Path) -> Result<()> {
    let manifest = checkpoint::read_manifest(dir)?;
    let scan = common.scan.unwrap_or(manifest.train_config.scan);
    let (_, test) = checkpoint_test_set(data, &manifest)?;
    let report = match manifest.precision {
        Precision::F32 => evaluate(&checkpoint::load::<f32>(dir)?.model, &test, scan)?,
        Precision::F64 => evaluate(&checkpoint::load::<f64>(dir)?.model, &test, scan)?,
    };
    println!("examples={} mean_loss={}", report.examples, report.mean_loss);
    println!("test_error={}", report.error_rate);
    Ok(())
}

/// Column titles: `z<k>` and `r<k>` per layer, `>`/`<` marking direction
/// when the layer reads both ways.
fn trace_header(trace: &GateTrace) -> Vec<String> {
    let mut cols = vec!["sentence".to_string()];
    for (k, layer) in trace.layers.iter().enumerate() {
        let k = k + 1;
        let both = layer.backward.is_some();
        let arrow = |fwd: bool| match (both, fwd) {
            (false, _) => "",
            (true, true) => ">",
            (true, false) => "<",
        };
        cols.push(format!("z{k}{}", arrow(true)));
        if both {
            cols.push(format!("z{k}{}", arrow(false)));
        }
        if layer.forward.r.is_some() {
            cols.push(format!("r{k}{}", arrow(true)));
        }
        if layer.backward.as_ref().is_some_and(|b| b.r.is_some()) {
            cols.push(format!("r{k}{}", arrow(false)));
        }
    }
    cols
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64
}

/// Gate values of row `t`, in header order; vector gates are averaged.
fn trace_row(trace: &GateTrace, t: usize) -> Vec<f64> {
    let mut row = Vec::new();
    for layer in &trace.layers {
        row.push(mean(&layer.forward.z[t]));
        if let Some(b) = &layer.backward {
            row.push(mean(&b.z[t]));
        }
        if let Some(r) = &layer.forward.r {
            row.push(mean(&r[t]));
        }
        if let Some(r) = layer.backward.as_ref().and_then(|b| b.r.as_ref()) {
            row.push(mean(&r[t]));
        }
    }
    row
}

pub fn trace(
    common: &Common,
    data: &DataArgs,
    dir: &Path,
    example: Option<usize>,
    contains: Option<&str>,
    machine: bool,
) -> Result<()> {
    let manifest = checkpoint::read_manifest(dir)?;
    let scan = common.scan.unwrap_or(manifest.train_config.scan);
    let (raw, test) = checkpoint_test_set(data, &manifest)?;
    let selected: Vec<usize> = match (example, contains) {
        (Some(i), _) => (i < raw.len()).then_some(i).into_iter().collect(),
        (None, Some(text)) => (0..raw.len()).filter(|&i| raw[i].question.contains(text)).collect(),
        (None, None) => Err(QrnError::Usage("trace needs --example or --contains".into()))?,
    };
    if selected.is_empty() {
        return Err(QrnError::Input("no test example matches the selector".into()).into());
    }
    match manifest.precision {
        Precision::F32 => trace_at(&checkpoint::load::<f32>(dir)?, &raw, &test, &selected, scan, machine),
        Precision::F64 => trace_at(&checkpoint::load::<f64>(dir)?, &raw, &test, &selected, scan, machine),
    }
}

fn predicted_text(vocab: &Vocabulary, raw: &Example, index: usize) -> String {
    match &raw.candidates {
        Some(c) => c[index].clone(),
        None => vocab.word(index).to_string(),
    }
}

fn trace_at<F: Scalar>(
    ckpt: &Checkpoint<F>,
    raw: &[Example],
    test: &[IndexedExample],
    selected: &[usize],
    scan: ScanMode,
    machine: bool,
) -> Result<()> {
    for &i in selected {
        let (pred, trace) = ckpt.model.trace(&test[i], scan)?;
        println!("# example\t{i}");
        println!("{}", trace_header(&trace).join("\t"));
        for (t, sentence) in raw[i].context.iter().enumerate() {
            let cells: Vec<String> = trace_row(&trace, t)
                .into_iter()
                .map(|v| if machine { v.to_string() } else { format!("{v:.2}") })
                .collect();
            println!("{sentence}\t{}", cells.join("\t"));
        }
        println!("# question\t{}", raw[i].question);
        println!("# answer\t{}", raw[i].answer);
        println!("# predicted\t{}", predicted_text(&ckpt.vocab, &raw[i], pred.index));
    }
    Ok(())
}

pub fn bench(common: &Common, steps: usize, hidden: usize, batch: usize, repeats: usize) -> Result<()> {
    let cfg = run_config(common)?;
    let seed = common.seed.unwrap_or(if common.config.is_some() { cfg.train.seed } else { 0 });
    let precision = common
        .precision
        .unwrap_or(if common.config.is_some() { cfg.precision } else { Precision::F32 });
    let report = match precision {
        Precision::F32 => benchmark_scan::<f32>(steps, hidden, batch, repeats, seed)?,
        Precision::F64 => benchmark_scan::<f64>(steps, hidden, batch, repeats, seed)?,
    };
    println!("{report} max_abs_diff={:e} self_check=pass", report.max_abs_diff);
    Ok(())
}

fn random_example<R: Rng>(rng: &mut R, steps: usize, vocab: usize) -> IndexedExample {
    let sentence = |rng: &mut R| -> Vec<usize> { (0..rng.random_range(1..=4)).map(|_| rng.random_range(3..vocab)).collect() };
    IndexedExample {
        sentences: (0..steps).map(|_| sentence(rng)).collect(),
        question: sentence(rng),
        answer: rng.random_range(3..vocab),
        answer_tokens: Vec::new(),
        candidates: None,
        gold_candidate: None,
    }
}

/// Gradient check of a QA model on one random example, in 64-bit through
/// both scan paths. The configured precision is ignored.
pub fn gradcheck(common: &Common, steps: usize, tolerance: f64) -> Result<()> {
    let cfg = run_config(common)?;
    if cfg.qrn.hidden_size > GRADCHECK_MAX_HIDDEN || steps > GRADCHECK_MAX_STEPS || steps == 0 {
        return Err(QrnError::Usage(format!(
            "gradcheck is limited to hidden_size <= {GRADCHECK_MAX_HIDDEN} and 1 <= steps <= {GRADCHECK_MAX_STEPS} \
             (got hidden_size={}, steps={steps})",
            cfg.qrn.hidden_size
        ))
        .into());
    }
    const VOCAB: usize = 12;
    let mut model_config = ModelConfig::qa(cfg.qrn.clone(), VOCAB);
    model_config.reconstruction = cfg.reconstruction;
    model_config.reconstruction_weight = cfg.reconstruction_weight;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let ex = random_example(&mut rng, steps, VOCAB);
    let model = QrnModel::<f64>::new(model_config, cfg.train.seed)?;
    let (l2, decay_biases) = (cfg.train.l2_decay, cfg.train.decay_biases);

    let mut failed = false;
    let mut grads = Vec::new();
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let mut store = model.store.clone();
        let ids: Vec<_> = store.ids().collect();
        let report = check_gradients(
            |tape: &mut Tape<f64>, s| {
                let mut m = model.clone();
                m.store = s.clone();
                m.objective(tape, &ex, mode, l2, decay_biases)
            },
            &mut store,
            &ids,
            1e-5,
            tolerance,
        )?;
        for p in &report.params {
            let ok = p.max_rel_error < tolerance;
            failed |= !ok;
            println!(
                "{mode:?}\t{}\t{:.3e}\t{}",
                p.name,
                p.max_rel_error,
                if ok { "ok" } else { "FAIL" }
            );
        }
        grads.push(store);
    }
    let cross = grads[0]
        .iter()
        .zip(grads[1].iter())
        .flat_map(|(a, b)| a.gradient.data().iter().zip(b.gradient.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    println!("cross_mode_max_abs_diff\t{cross:.3e}");
    if failed || cross >= 1e-8 {
        return Err(QrnError::Numeric(format!("gradient check failed (tolerance {tolerance:e})")).into());
    }
    println!("gradcheck=pass");
    Ok(())
}

pub fn synth(out: &Path, task: u32, kind: Kind, train: usize, test: usize, seed: u64) -> Result<()> {
    let written = match kind {
        Kind::Qa => {
            let (a, b) = babi_synth::write_qa_task(out, task, train, test, seed)
                .map_err(|e| QrnError::Usage(format!("cannot write task {task}: {e}")))?;
            vec![a, b]
        }
        Kind::Dialog if task == 1 => babi_synth::write_dialog_task(out, train, test, seed)
            .with_context(|| format!("writing into {}", out.display()))?,
        Kind::Dialog => return Err(QrnError::Usage(format!("no generator for dialog task {task}")).into()),
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
