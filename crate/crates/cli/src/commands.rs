use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

use protorefine::data::{self, CorruptionSpec, IdealSpec, PatternDataset, Role};
use protorefine::metrics;
use protorefine::nn::{self, ClassifierArch, RefinerArch};
use protorefine::par::Parallelism;
use protorefine::proto::{PNorm, RefineMode};
use protorefine::train::{self, ClassifierEpochStats, OptimizerKind, RefinerEpochStats, TrainConfig};

use crate::config::{defaults, layer, out_dir, read_file, required, usage, write_resolved};
use crate::{AblateOpts, EvaluateOpts, ExportOpts, GenDataOpts, RefineOpts, TrainClassifierOpts, TrainRefinerOpts};

pub const IDEAL_FILE: &str = "ideal.pfds";
pub const IMPERFECT_TRAIN_FILE: &str = "imperfect_train.pfds";
pub const IMPERFECT_TEST_FILE: &str = "imperfect_test.pfds";
pub const CLASSIFIER_FILE: &str = "classifier.pfck";
pub const REFINER_FILE: &str = "refiner.pfck";

fn load(path: &Path) -> Result<PatternDataset> {
    data::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn parse_mode(s: &str) -> Result<RefineMode> {
    match s {
        "targeted" => Ok(RefineMode::Targeted),
        "non-targeted" => Ok(RefineMode::NonTargeted),
        other => Err(usage(format!("unknown mode {other:?} (targeted | non-targeted)"))),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    s.parse::<OptimizerKind>().map_err(|e| usage(e.to_string()))
}

fn mode_name(mode: RefineMode) -> &'static str {
    match mode {
        RefineMode::Targeted => "targeted",
        RefineMode::NonTargeted => "non-targeted",
    }
}

/// Appends one line to a stats file, creating it with `header` first.
fn append_line(path: &Path, header: &str, line: &str) -> std::io::Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

fn fresh_file(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).with_context(|| format!("replacing {}", path.display()))?;
    }
    Ok(())
}

pub fn gen_data(mut o: GenDataOpts, config: Option<&Path>) -> Result<()> {
    let mut file: GenDataOpts = read_file(config)?;
    layer!(o, file; out, classes, length, per_class_ideal, per_class_imperfect, height_jitter,
        noise, drift, shift, split_prob, amp_jitter, train_fraction, seed);
    let c = CorruptionSpec::default();
    defaults!(o; classes = 7, length = 256, per_class_ideal = 200, per_class_imperfect = 40,
        height_jitter = 0.15, noise = c.noise_std, drift = c.drift_amplitude, shift = c.shift_max,
        split_prob = c.split_probability, amp_jitter = c.amplitude_jitter, train_fraction = 0.5, seed = 0);
    let seed = o.seed.unwrap();
    let mut ideal_spec = IdealSpec::new(o.classes.unwrap(), o.per_class_ideal.unwrap(), o.length.unwrap(), seed);
    ideal_spec.height_jitter = o.height_jitter.unwrap();
    let mut source_spec = IdealSpec {
        per_class: o.per_class_imperfect.unwrap(),
        stream: 1,
        ..ideal_spec.clone()
    };
    source_spec.height_jitter = ideal_spec.height_jitter;
    let corruption = CorruptionSpec {
        noise_std: o.noise.unwrap(),
        drift_amplitude: o.drift.unwrap(),
        shift_max: o.shift.unwrap(),
        split_probability: o.split_prob.unwrap(),
        amplitude_jitter: o.amp_jitter.unwrap(),
        seed: seed.wrapping_add(17),
    };

    let ideal = data::gen_ideal(&ideal_spec)?;
    let imperfect = data::corrupt(&data::gen_ideal(&source_spec)?, &corruption)?;
    let (train, test) = data::split(&imperfect, o.train_fraction.unwrap(), seed.wrapping_add(29))?;

    let dir = out_dir(&o.out)?;
    data::save_dataset(&ideal, dir.join(IDEAL_FILE))?;
    data::save_dataset(&train, dir.join(IMPERFECT_TRAIN_FILE))?;
    data::save_dataset(&test, dir.join(IMPERFECT_TEST_FILE))?;
    let mut manifest = String::new();
    for (name, ds) in [(IDEAL_FILE, &ideal), (IMPERFECT_TRAIN_FILE, &train), (IMPERFECT_TEST_FILE, &test)] {
        writeln!(manifest, "[{name}]")?;
        writeln!(manifest, "role={}", ds.role.name())?;
        writeln!(manifest, "patterns={}", ds.len())?;
        writeln!(manifest, "paired={}", ds.pairing.is_some())?;
        for (k, v) in &ds.manifest {
            writeln!(manifest, "{k}={v}")?;
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    write_resolved(&dir, &o)?;
    println!(
        "wrote {} ideal, {} + {} imperfect patterns to {}",
        ideal.len(),
        train.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

pub fn train_classifier(mut o: TrainClassifierOpts, config: Option<&Path>) -> Result<()> {
    let mut file: TrainClassifierOpts = read_file(config)?;
    layer!(o, file; data, out, epochs, batches, lr, lambda, nc, optimizer, holdout, checkpoint_every, seed);
    let base = TrainConfig::classifier();
    defaults!(o; epochs = base.epochs, batches = base.batches_per_epoch.unwrap_or(25),
        lr = base.learning_rate, lambda = base.weights.lambda, nc = base.per_class,
        optimizer = base.optimizer.to_string(), holdout = 0.2, checkpoint_every = 0, seed = base.seed);
    let mut cfg = base;
    cfg.epochs = o.epochs.unwrap();
    cfg.batches_per_epoch = Some(o.batches.unwrap());
    cfg.learning_rate = o.lr.unwrap();
    cfg.weights.lambda = o.lambda.unwrap();
    cfg.per_class = o.nc.unwrap();
    cfg.optimizer = parse_optimizer(o.optimizer.as_deref().unwrap())?;
    cfg.seed = o.seed.unwrap();
    let holdout = o.holdout.unwrap();

    let dataset = load(&required(&o.data, "data")?)?;
    let (train_set, held) = if holdout > 0.0 {
        let (a, b) = data::split(&dataset, 1.0 - holdout, cfg.seed.wrapping_add(5))?;
        (a, Some(b))
    } else {
        (dataset, None)
    };
    let dir = out_dir(&o.out)?;
    write_resolved(&dir, &o)?;
    let stats_path = dir.join("stats.csv");
    fresh_file(&stats_path)?;
    let every = o.checkpoint_every.unwrap();
    let arch = ClassifierArch::new(train_set.length, train_set.classes);
    let (model, protos, _) = train::train_classifier(&arch, &train_set, &cfg, |s, m, p| {
        append_line(&stats_path, ClassifierEpochStats::CSV_HEADER, &s.csv_line())?;
        if every > 0 && s.epoch % every == 0 {
            nn::save_classifier(&dir.join(format!("classifier_epoch{}.pfck", s.epoch)), m, p)?;
        }
        Ok(())
    })?;
    nn::save_classifier(&dir.join(CLASSIFIER_FILE), &model, &protos)?;
    if let Some(held) = held {
        let p = Parallelism::from_env();
        let x = held.all();
        let y = held.labels()?;
        let acc = metrics::accuracy(&model, &x, &y, p)?;
        let proto_acc = metrics::nearest_prototype_accuracy(&model, &protos, &x, &y, p)?;
        fs::write(
            dir.join("heldout.csv"),
            format!("key,value\ncount,{}\naccuracy,{acc}\nprototype_accuracy,{proto_acc}\n", held.len()),
        )?;
        println!("held-out ideal accuracy {acc:.4} (nearest prototype {proto_acc:.4})");
    }
    println!("wrote {}", dir.join(CLASSIFIER_FILE).display());
    Ok(())
}

/// Resolves the refiner training options shared by `train-refiner` and `ablate`.
#[allow(clippy::too_many_arguments)]
fn refiner_config(
    mode: &mut Option<String>,
    alpha: &mut Option<f64>,
    beta: &mut Option<f64>,
    p_norm: &mut Option<u32>,
    epochs: &mut Option<usize>,
    batch: &mut Option<usize>,
    lr: &mut Option<f64>,
    optimizer: &mut Option<String>,
    seed: &mut Option<u64>,
) -> Result<TrainConfig> {
    let parsed = parse_mode(mode.get_or_insert_with(|| "targeted".into()))?;
    let base = match parsed {
        RefineMode::Targeted => TrainConfig::refiner(),
        RefineMode::NonTargeted => TrainConfig::refiner_non_targeted(),
    };
    let mut cfg = base.clone();
    cfg.weights.alpha = *alpha.get_or_insert(base.weights.alpha);
    cfg.weights.beta = *beta.get_or_insert(base.weights.beta);
    cfg.weights.p_norm = PNorm::from_order(*p_norm.get_or_insert(base.weights.p_norm.order()))
        .map_err(|e| usage(e.to_string()))?;
    cfg.epochs = *epochs.get_or_insert(base.epochs);
    cfg.per_class = *batch.get_or_insert(base.per_class);
    cfg.learning_rate = *lr.get_or_insert(base.learning_rate);
    cfg.optimizer = parse_optimizer(optimizer.get_or_insert_with(|| base.optimizer.to_string()))?;
    cfg.seed = *seed.get_or_insert(base.seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_refiner(mut o: TrainRefinerOpts, config: Option<&Path>) -> Result<()> {
    let mut file: TrainRefinerOpts = read_file(config)?;
    layer!(o, file; data, classifier, out, mode, alpha, beta, p_norm, epochs, batch, lr, optimizer,
        checkpoint_every, seed);
    let cfg = refiner_config(
        &mut o.mode,
        &mut o.alpha,
        &mut o.beta,
        &mut o.p_norm,
        &mut o.epochs,
        &mut o.batch,
        &mut o.lr,
        &mut o.optimizer,
        &mut o.seed,
    )?;
    defaults!(o; checkpoint_every = 0);
    let classifier_path = required(&o.classifier, "classifier")?;
    let (classifier, protos) = nn::load_classifier(&classifier_path)
        .with_context(|| format!("loading classifier {}", classifier_path.display()))?;
    let mut dataset = load(&required(&o.data, "data")?)?;
    if cfg.mode == RefineMode::NonTargeted {
        dataset = dataset.without_labels();
    }
    let dir = out_dir(&o.out)?;
    write_resolved(&dir, &o)?;
    let stats_path = dir.join("stats.csv");
    fresh_file(&stats_path)?;
    let every = o.checkpoint_every.unwrap();
    let arch = RefinerArch::new(dataset.length);
    let (refiner, history) = train::train_refiner(&arch, &classifier, &protos, &dataset, &cfg, |s, r| {
        append_line(&stats_path, RefinerEpochStats::CSV_HEADER, &s.csv_line())?;
        if every > 0 && s.epoch % every == 0 {
            nn::save_refiner(&dir.join(format!("refiner_epoch{}.pfck", s.epoch)), r)?;
        }
        Ok(())
    })?;
    nn::save_refiner(&dir.join(REFINER_FILE), &refiner)?;
    if let Some(last) = history.last() {
        println!("{} refiner: final loss {:.5}", mode_name(cfg.mode), last.loss);
    }
    println!("wrote {}", dir.join(REFINER_FILE).display());
    Ok(())
}

pub fn evaluate(mut o: EvaluateOpts, config: Option<&Path>) -> Result<()> {
    let mut file: EvaluateOpts = read_file(config)?;
    layer!(o, file; data, classifier, refiner, out);
    let (classifier, _) = nn::load_classifier(&required(&o.classifier, "classifier")?)?;
    let dataset = load(&required(&o.data, "data")?)?;
    let dir = out_dir(&o.out)?;
    write_resolved(&dir, &o)?;
    let p = Parallelism::from_env();
    let Some(refiner_path) = &o.refiner else {
        let x = dataset.all();
        let logits = metrics::logits(&classifier, &x, p)?;
        let entropy = metrics::mean_prediction_entropy(&logits)?;
        let mut text = format!("key,value\ncount,{}\n", dataset.len());
        match dataset.labels() {
            Ok(labels) => {
                let acc = metrics::accuracy(&classifier, &x, &labels, p)?;
                writeln!(text, "accuracy,{acc}")?;
                println!("baseline accuracy {acc:.4}");
            }
            Err(_) => eprintln!("warning: dataset is unlabeled, accuracy skipped"),
        }
        writeln!(text, "entropy,{entropy}")?;
        fs::write(dir.join("baseline.csv"), text)?;
        return Ok(());
    };
    let refiner = nn::load_refiner(refiner_path)?;
    let refined = metrics::refine(&refiner, &dataset.all(), p)?;
    if dataset.pairing.is_none() {
        eprintln!("warning: no ground-truth pairing, quality metrics skipped");
    }
    let report = metrics::evaluate_outputs(&classifier, &dataset, &refined, p)?;
    metrics::write_report(&report, &dir)?;
    print!("{}", metrics::table(&report));
    Ok(())
}

pub fn ablate(mut o: AblateOpts, config: Option<&Path>) -> Result<()> {
    let mut file: AblateOpts = read_file(config)?;
    layer!(o, file; data, test, classifier, out, mode, alpha, beta, p_norm, epochs, batch, lr,
        optimizer, seed, seeds);
    let cfg = refiner_config(
        &mut o.mode,
        &mut o.alpha,
        &mut o.beta,
        &mut o.p_norm,
        &mut o.epochs,
        &mut o.batch,
        &mut o.lr,
        &mut o.optimizer,
        &mut o.seed,
    )?;
    defaults!(o; seeds = 1);
    let count = o.seeds.unwrap();
    if count == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let (classifier, protos) = nn::load_classifier(&required(&o.classifier, "classifier")?)?;
    let data = load(&required(&o.data, "data")?)?;
    let (mut train_set, test_set) = match &o.test {
        Some(path) => (data, load(path)?),
        None => data::split(&data, 0.5, cfg.seed.wrapping_add(11))?,
    };
    if cfg.mode == RefineMode::NonTargeted {
        train_set = train_set.without_labels();
    }
    let dir = out_dir(&o.out)?;
    write_resolved(&dir, &o)?;
    let seeds: Vec<u64> = (0..count).map(|i| cfg.seed.wrapping_add(i)).collect();
    let arch = RefinerArch::new(train_set.length);
    let reports = train::run_ablation(
        &arch,
        &classifier,
        &protos,
        &train_set,
        &test_set,
        &cfg,
        &seeds,
        Parallelism::from_env(),
    )?;
    let mut table = String::new();
    let mut csv = String::new();
    for (i, r) in reports.iter().enumerate() {
        table.push_str(&r.table());
        table.push('\n');
        let body = r.csv();
        csv.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |(_, rest)| rest) });
    }
    fs::write(dir.join("ablation.txt"), &table)?;
    fs::write(dir.join("ablation.csv"), &csv)?;
    print!("{table}");
    Ok(())
}

pub fn refine(mut o: RefineOpts, config: Option<&Path>) -> Result<()> {
    let mut file: RefineOpts = read_file(config)?;
    layer!(o, file; data, refiner, out);
    let refiner = nn::load_refiner(&required(&o.refiner, "refiner")?)?;
    let dataset = load(&required(&o.data, "data")?)?;
    let refined_values = metrics::refine(&refiner, &dataset.all(), Parallelism::from_env())?;
    let refined = dataset.with_values(Role::Refined, &refined_values)?;
    let dir = out_dir(&o.out)?;
    write_resolved(&dir, &o)?;
    data::save_dataset(&refined, dir.join("refined.pfds"))?;
    let mut dump = String::from("sample,series,position,value\n");
    for (i, (raw, new)) in dataset.patterns.iter().zip(&refined.patterns).enumerate() {
        let mut series = vec![("raw", &raw.values), ("refined", &new.values)];
        if let Some(gt) = dataset.ground_truth(i) {
            series.push(("ground-truth", &gt.values));
        }
        for (name, values) in series {
            for (j, v) in values.iter().enumerate() {
                writeln!(dump, "{i},{name},{j},{v}")?;
            }
        }
    }
    fs::write(dir.join("side_by_side.csv"), dump)?;
    println!("wrote {} refined patterns to {}", refined.len(), dir.display());
    Ok(())
}

pub fn export_embeddings(mut o: ExportOpts, config: Option<&Path>) -> Result<()> {
    let mut file: ExportOpts = read_file(config)?;
    layer!(o, file; data, classifier, out);
    let (classifier, _) = nn::load_classifier(&required(&o.classifier, "classifier")?)?;
    let dataset = load(&required(&o.data, "data")?)?;
    let labels = dataset.labels().ok();
    let dir = out_dir(&o.out)?;
    write_resolved(&dir, &o)?;
    let proj = metrics::export_embeddings_2d(
        &classifier,
        &dataset.all(),
        labels.as_deref(),
        dir.join("embeddings.csv"),
        Parallelism::from_env(),
    )?;
    println!(
        "wrote {} projected embeddings (component variances {:.4}, {:.4})",
        proj.coords.len(),
        proj.variances[0],
        proj.variances[1]
    );
    Ok(())
}
