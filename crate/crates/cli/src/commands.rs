use std::fs;
use std::path::Path;

use cadunet::data::{self, undersample_noninfected, Sample, SyntheticSpec, NONINFECTED_TARGET};
use cadunet::eval::{self, EvalOptions};
use cadunet::gradcheck::{self, GradReport};
use cadunet::mask::Mask;
use cadunet::metrics::{confusion, Scores};
use cadunet::severity::{self, SeverityLabel};
use cadunet::stats::{self, Alternative};
use cadunet::train::{self, LrSchedule, TrainConfig};
use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::{AlternativeArg, CompareArgs, EvalArgs, GradcheckArgs, MetricsArgs, SeverityArgs, SynthArgs, TrainArgs};

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] cadunet::Error),
}

impl Failure {
    /// 1 for bad input or a failed check, 2 for anything that went wrong while running.
    pub fn exit_code(&self) -> u8 {
        use cadunet::Error as E;
        match self {
            Failure::Invalid(_) | Failure::Check(_) => 1,
            Failure::Core(E::Config(_) | E::Invalid(_) | E::Shape { .. } | E::OddExtent { .. } | E::EnumerationBound { .. }) => 1,
            Failure::Core(_) => 2,
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| cadunet::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn load(manifest: &Path) -> Result<Vec<Sample>, Failure> {
    let loaded = data::load_dataset(manifest)?;
    if !loaded.failures.is_empty() {
        log::warn!(
            "{}: skipped {} unreadable entries",
            manifest.display(),
            loaded.failures.len()
        );
    }
    if loaded.samples.is_empty() {
        return Err(Failure::Invalid(format!("{}: no usable slices", manifest.display())));
    }
    Ok(loaded.samples)
}

fn infected(samples: &[Sample]) -> usize {
    samples.iter().filter(|s| s.is_infected()).count()
}

pub fn synth(args: &SynthArgs, seed: Option<u64>) -> Outcome {
    let mut spec: SyntheticSpec = match &args.config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    // lesions keep their size relative to the image when it is resized
    let before = spec.height.min(spec.width) as f64;
    spec.height = args.height.unwrap_or(spec.height);
    spec.width = args.width.unwrap_or(spec.width);
    let scale = spec.height.min(spec.width) as f64 / before;
    spec.lesion_radius = (spec.lesion_radius.0 * scale, spec.lesion_radius.1 * scale);
    spec.seed = seed.unwrap_or(spec.seed);
    if !(0.0..1.0).contains(&args.val_fraction) {
        return Err(Failure::Invalid(format!("--val-fraction {} must lie in [0, 1)", args.val_fraction)));
    }
    let samples = data::synth_generate(&spec, args.count)?;
    let n_val = (args.count as f64 * args.val_fraction).round() as usize;
    if args.val_fraction > 0.0 && (n_val == 0 || n_val == args.count) {
        return Err(Failure::Invalid(format!(
            "--val-fraction {} leaves an empty split of {} slices",
            args.val_fraction, args.count
        )));
    }
    let mut held_out = vec![false; samples.len()];
    for &i in &data::epoch_order(samples.len(), spec.seed, 0)[..n_val] {
        held_out[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = samples.into_iter().zip(held_out).partition(|(_, v)| *v);
    let train: Vec<Sample> = train.into_iter().map(|(s, _)| s).collect();
    let val: Vec<Sample> = val.into_iter().map(|(s, _)| s).collect();
    let path = data::write_dataset(&args.out, &train, "train.json")?;
    println!("{} training slices ({} infected) -> {}", train.len(), infected(&train), path.display());
    if !val.is_empty() {
        let path = data::write_dataset(&args.out, &val, "val.json")?;
        println!("{} validation slices ({} infected) -> {}", val.len(), infected(&val), path.display());
    }
    Ok(())
}

pub fn train(args: &TrainArgs, seed: Option<u64>) -> Outcome {
    let mut config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    config.seed = seed.unwrap_or(config.seed);
    config.epochs = args.epochs.unwrap_or(config.epochs);
    config.batch_size = args.batch_size.unwrap_or(config.batch_size);
    if let Some(lr) = args.lr {
        config.schedule = LrSchedule::constant(lr);
    }
    config.max_steps = args.max_steps.or(config.max_steps);
    config.target_f1 = args.target_f1.or(config.target_f1);
    config.model.base_channels = args.base_channels.unwrap_or(config.model.base_channels);
    config.model.num_classes = args.classes.unwrap_or(config.model.num_classes);
    config.checkpoint_every = args.checkpoint_every.unwrap_or(config.checkpoint_every);
    if args.no_augment {
        config.augment = None;
    }
    config.validate()?;

    let mut train_set = load(&args.train)?;
    if args.undersample {
        let (kept, report) = undersample_noninfected(train_set, NONINFECTED_TARGET, config.seed);
        log::info!(
            "undersampling kept {} of {} non-infected slices ({:.1}% of {} slices)",
            report.noninfected_after,
            report.noninfected_before,
            100.0 * report.fraction_after(),
            kept.len()
        );
        train_set = kept;
    }
    let val_set = match &args.val {
        Some(p) => load(p)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&args.out).map_err(|e| cadunet::Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let outcome = train::train(&config, &train_set, &val_set, Some(&args.out))?;
    let last = outcome.records.last().expect("training takes at least one step");
    println!("{} steps over {} epochs, final loss {:.4}", last.step, last.epoch, last.loss_total);
    if let Some(best) = &outcome.best {
        println!("best validation F1 {:.2} (IoU {:.2}) at epoch {}", best.f1, best.iou, best.epoch);
    }
    println!("run written to {}", args.out.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Outcome {
    if !(0.0..1.0).contains(&args.threshold) {
        return Err(Failure::Invalid(format!("--threshold {} must lie in [0, 1)", args.threshold)));
    }
    let mut checkpoint = train::load_checkpoint(&args.checkpoint)?;
    let samples = load(&args.data)?;
    let options = EvalOptions {
        threshold: args.threshold,
        num_classes: args.classes,
        ..EvalOptions::default()
    };
    let evaluation = eval::evaluate(&checkpoint.model, &mut checkpoint.store, &samples, &options)?;
    let run = args.run.clone().unwrap_or_else(|| args.checkpoint.display().to_string());
    let dataset = args.data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    fs::create_dir_all(&args.out).map_err(|e| cadunet::Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let csv_path = args.out.join("metrics.csv");
    eval::write_metrics_csv(&csv_path, &run, &dataset, &evaluation)?;
    if !args.no_overlays {
        eval::write_overlays(&args.out.join("overlays"), &samples, &evaluation)?;
    }
    let names = eval::class_names(evaluation.num_classes);
    println!("{} slices, mean±std over slices:", samples.len());
    println!("{:<10} {}", "class", Scores::NAMES.map(|n| format!("{n:>13}")).join(""));
    for (c, name) in names.iter().enumerate() {
        let cells: Vec<String> = evaluation.summary(c).into_iter().map(|(_, v)| format!("{v:>13}")).collect();
        println!("{name:<10} {}", cells.join(""));
    }
    println!("pooled infection F1 {:.2}", evaluation.infection_f1());
    println!("metrics -> {}", csv_path.display());
    Ok(())
}

fn summarise(reports: &[GradReport]) -> Vec<(String, usize, f64, f64, usize, bool)> {
    let mut rows: Vec<(String, usize, f64, f64, usize, bool)> = Vec::new();
    for r in reports {
        match rows.iter_mut().find(|row| row.0 == r.name) {
            Some(row) => {
                row.1 += 1;
                row.2 = row.2.max(r.max_rel_err);
                row.4 += r.skipped;
                row.5 &= r.passed();
            }
            None => rows.push((r.name.clone(), 1, r.max_rel_err, r.tolerance, r.skipped, r.passed())),
        }
    }
    rows
}

pub fn gradcheck(args: &GradcheckArgs, seed: Option<u64>) -> Outcome {
    let registry = gradcheck::registry();
    if args.list {
        for entry in &registry {
            println!("{}", entry.name);
        }
        return Ok(());
    }
    if let Some(op) = &args.op {
        if !registry.iter().any(|e| e.name == op) {
            return Err(Failure::Invalid(format!("no registered check named `{op}` (see --list)")));
        }
    }
    if args.seeds == 0 {
        return Err(Failure::Invalid("--seeds must be positive".into()));
    }
    let start = seed.unwrap_or(0);
    let reports = gradcheck::run_suite(start..start + args.seeds, args.op.as_deref())?;
    let rows = summarise(&reports);
    println!(
        "{:<24} {:>5} {:>12} {:>10} {:>8}  status",
        "check", "seeds", "max rel err", "tolerance", "skipped"
    );
    for (name, seeds, err, tol, skipped, ok) in &rows {
        let status = if *ok { "ok" } else { "FAIL" };
        println!("{name:<24} {seeds:>5} {err:>12.3e} {tol:>10.0e} {skipped:>8}  {status}");
    }
    let failed = rows.iter().filter(|r| !r.5).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} checks exceeded their tolerance", rows.len())));
    }
    Ok(())
}

fn class_masks(path: &Path, classes: usize) -> Result<Vec<Mask>, Failure> {
    let ((h, w), labels) = data::read_labels(path)?;
    let keep = |l: u8, c: usize| if classes == 1 { l != 0 } else { l as usize == c + 1 };
    if classes == 2 && labels.iter().any(|&l| l > 2) {
        return Err(Failure::Invalid(format!(
            "{}: two-class masks hold only the values 0, 1 and 2",
            path.display()
        )));
    }
    (0..classes)
        .map(|c| Mask::from_labels(h, w, &labels, |l| keep(l, c)).map_err(Failure::from))
        .collect()
}

pub fn metrics(args: &MetricsArgs) -> Outcome {
    if !(1..=2).contains(&args.classes) {
        return Err(Failure::Invalid("--classes must be 1 or 2".into()));
    }
    let pred = class_masks(&args.pred, args.classes)?;
    let gt = class_masks(&args.gt, args.classes)?;
    println!("{:<10} {}", "class", Scores::NAMES.map(|n| format!("{n:>9}")).join(""));
    let mut vacuous = false;
    for ((name, p), t) in eval::class_names(args.classes).iter().zip(&pred).zip(&gt) {
        let scores = confusion(p, t)?.scores();
        let cells: Vec<String> = scores
            .values()
            .iter()
            .zip(scores.flags())
            .map(|(v, flag)| format!("{:>9}", format!("{v:.2}{}", if flag { "*" } else { "" })))
            .collect();
        vacuous |= scores.vacuous.any();
        println!("{name:<10} {}", cells.join(""));
    }
    if vacuous {
        println!("* empty denominator, scored as 100");
    }
    Ok(())
}

fn read_scores(path: &Path, metric: &str, class: Option<&str>) -> Result<Vec<f64>, Failure> {
    let bad = |msg: String| Failure::Invalid(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let value_col = column(metric).ok_or_else(|| bad(format!("no `{metric}` column")))?;
    let (slice_col, class_col) = (column("slice"), column("class"));
    let mut values = Vec::new();
    let mut classes_seen = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        // pooled summary rows are not per-slice observations
        if slice_col.is_some_and(|c| row.get(c) == Some("all")) {
            continue;
        }
        if let Some(c) = class_col.and_then(|c| row.get(c)) {
            if class.is_some_and(|want| want != c) {
                continue;
            }
            if !classes_seen.iter().any(|s| s == c) {
                classes_seen.push(c.to_string());
            }
        }
        let cell = row.get(value_col).unwrap_or("").trim();
        values.push(cell.parse::<f64>().map_err(|_| bad(format!("`{cell}` is not a number")))?);
    }
    if classes_seen.len() > 1 {
        return Err(bad(format!("rows cover classes {classes_seen:?}; pick one with --class")));
    }
    Ok(values)
}

pub fn compare(args: &CompareArgs) -> Outcome {
    let a = read_scores(&args.a, &args.metric, args.class.as_deref())?;
    let b = read_scores(&args.b, &args.metric, args.class.as_deref())?;
    let (alternative, label) = match args.alternative {
        AlternativeArg::TwoSided => (Alternative::TwoSided, "two-sided"),
        AlternativeArg::Less => (Alternative::Less, "one-sided (less)"),
        AlternativeArg::Greater => (Alternative::Greater, "one-sided (greater)"),
    };
    let test = stats::rank_sum_test(&a, &b, alternative)?;
    let hits = (test.p_value * test.assignments as f64).round() as u64;
    println!("{}: n = {}, {}: n = {}", args.a.display(), a.len(), args.b.display(), b.len());
    println!("rank sum of first group {} (expected {})", test.statistic, test.expected);
    println!(
        "{label} exact p = {:.5} ({hits}/{}){}",
        test.p_value,
        test.assignments,
        if test.ties { ", ties present" } else { "" }
    );
    Ok(())
}

pub fn severity(args: &SeverityArgs) -> Outcome {
    let samples = load(&args.data)?;
    let mut grades = Vec::new();
    let mut rows = Vec::new();
    for s in &samples {
        let Some(lung) = s.lung() else {
            log::warn!("{}: no lung mask, not graded", s.id);
            continue;
        };
        match severity::severity(s.labels(), lung, s.spacing) {
            Ok(grade) => {
                grades.push(grade);
                rows.push((s.id.clone(), grade));
            }
            Err(e) => log::warn!("{}: {e}", s.id),
        }
    }
    if grades.is_empty() {
        return Err(Failure::Invalid("no slice could be graded (lung masks are required)".into()));
    }
    for (grade, count) in severity::tally(grades.iter().copied()) {
        println!("{:<14} {count}", grade.name());
    }
    println!("graded {} of {} slices", grades.len(), samples.len());
    if let Some(path) = &args.out {
        let bad = |e: csv::Error| Failure::Core(cadunet::Error::Csv(e));
        let mut w = csv::Writer::from_path(path).map_err(bad)?;
        w.write_record(["slice", "grade"]).map_err(bad)?;
        for (id, grade) in &rows {
            w.write_record([id.as_str(), SeverityLabel::name(*grade)]).map_err(bad)?;
        }
        w.flush().map_err(|e| cadunet::Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}
