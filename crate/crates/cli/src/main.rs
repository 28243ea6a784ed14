use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;
use serde_json::Value;

use egoaction::ablation::{ablation_tsv, arm_means, run_sampling_ablation};
use egoaction::config::TrainConfig;
use egoaction::dataset::{generate_dataset, read_dataset, read_meta, write_dataset, Dataset, Split};
use egoaction::jsonfmt::{f17, to_line, to_pretty};
use egoaction::metrics::confusion_matrix;
use egoaction::par::{self, Execution};
use egoaction::selftest;
use egoaction::train::{
    evaluate_estimator, evaluate_recognizer, load_estimator, load_recognizer, mean_pose_baseline, resolve_poses,
    top1_of, train_estimator, train_recognizer, PoseSource,
};
use egoaction::Error;

const SUBCOMMANDS: [(&str, &str); 8] = [
    ("gen-data", "Generate the synthetic dataset into --out"),
    ("train-keypoints", "Train the keypoint estimator on --data; run directory --out"),
    ("train-action", "Train the action recognizer on --data; run directory --out"),
    ("predict", "Write per-frame estimator poses of a split as JSON lines"),
    ("classify", "Write per-video action predictions of a split and a summary"),
    ("eval", "Write estimator and/or recognizer metrics of a split"),
    ("ablate-sampling", "Train and test the four sampling arms for each seed"),
    ("selftest", "Run the oracle suites and report pass/fail counts"),
];

/// Failure with its exit code: 1 for validation, 2 for I/O.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_io() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

/// Config field names with their default values.
fn config_fields() -> Vec<(String, Value)> {
    match serde_json::to_value(TrainConfig::default()) {
        Ok(Value::Object(map)) => map.into_iter().collect(),
        _ => Vec::new(),
    }
}

fn flag_name(field: &str) -> String {
    field.replace('_', "-")
}

fn cli() -> Command {
    let mut root = Command::new("egoaction")
        .about("Synthetic two-hand/object action recognition pipeline")
        .subcommand_required(true)
        .arg_required_else_help(true);
    let shared = [
        Arg::new("config").long("config").value_name("FILE").help("JSON config; flags override it"),
        Arg::new("out").long("out").value_name("DIR").default_value(".").help("Output directory"),
        Arg::new("data").long("data").value_name("DIR").help("Dataset directory"),
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("FILE")
            .help("Checkpoint of the subcommand's model (estimator for predict, recognizer otherwise)"),
        Arg::new("estimator-checkpoint")
            .long("estimator-checkpoint")
            .value_name("FILE")
            .help("Estimator checkpoint for --pose-source estimator"),
        Arg::new("pose-source")
            .long("pose-source")
            .value_parser(["gt", "estimator"])
            .default_value("gt"),
        Arg::new("split").long("split").value_parser(["train", "val", "test"]).default_value("test"),
        Arg::new("seeds").long("seeds").value_name("LIST").default_value("1,2,3").help("Comma-separated seeds"),
        Arg::new("sequential")
            .long("sequential")
            .action(ArgAction::SetTrue)
            .help("Run on the calling thread only"),
    ];
    for arg in shared {
        root = root.arg(arg.global(true));
    }
    for (field, default) in config_fields() {
        let long: &'static str = Box::leak(flag_name(&field).into_boxed_str());
        let id: &'static str = Box::leak(field.into_boxed_str());
        root = root.arg(
            Arg::new(id)
                .long(long)
                .value_name("VALUE")
                .help(format!("Config field, default {default}"))
                .global(true),
        );
    }
    for (name, about) in SUBCOMMANDS {
        root = root.subcommand(Command::new(name).about(about));
    }
    root
}

fn flag_value(raw: &str, default: &Value) -> Value {
    match default {
        Value::String(_) => Value::String(raw.replace('-', "_")),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

/// Defaults, then the dataset's config, then `--config`, then flags.
fn resolve_config(m: &ArgMatches) -> Result<TrainConfig, Failure> {
    let mut base = match m.get_one::<String>("data") {
        Some(dir) => read_meta(Path::new(dir))?.config,
        None => TrainConfig::default(),
    };
    if let Some(file) = m.get_one::<String>("config") {
        let text = fs::read_to_string(file).map_err(|e| io_failure(Path::new(file), e))?;
        let mut value = serde_json::to_value(&base).map_err(Error::from)?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{file}: {e}")))?;
        let Value::Object(patch) = patch else {
            return Err(invalid(format!("{file}: expected a JSON object")));
        };
        for (k, v) in patch {
            value[k] = v;
        }
        base = serde_json::from_value(value).map_err(|e| invalid(format!("{file}: {e}")))?;
    }
    let mut value = serde_json::to_value(&base).map_err(Error::from)?;
    for (field, default) in config_fields() {
        if let Some(raw) = m.get_one::<String>(&field) {
            value[&field] = flag_value(raw, &default);
        }
    }
    let config: TrainConfig =
        serde_json::from_value(value).map_err(|e| invalid(format!("bad flag value: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn out_dir(m: &ArgMatches) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(m.get_one::<String>("out").map(String::as_str).unwrap_or("."));
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn required<'a>(m: &'a ArgMatches, id: &str) -> Result<&'a str, Failure> {
    m.get_one::<String>(id)
        .map(String::as_str)
        .ok_or_else(|| invalid(format!("--{id} is required")))
}

fn load_data(m: &ArgMatches, config: &TrainConfig) -> Result<Dataset, Failure> {
    let ds = read_dataset(Path::new(required(m, "data")?))?;
    if ds.config.n_actions != config.n_actions || ds.config.n_object_classes != config.n_object_classes {
        return Err(invalid("n_actions / n_object_classes differ from the dataset"));
    }
    Ok(ds)
}

fn split_of(m: &ArgMatches) -> Result<Split, Failure> {
    Ok(required(m, "split")?.parse()?)
}

fn execution(m: &ArgMatches) -> Execution {
    if m.get_flag("sequential") {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn cmd_gen_data(m: &ArgMatches, config: &TrainConfig) -> Result<(), Failure> {
    let out = out_dir(m)?;
    let ds = generate_dataset(config, execution(m))?;
    write_dataset(&out, &ds)?;
    println!(
        "wrote {} train, {} val, {} test videos to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_keypoints(m: &ArgMatches, config: &TrainConfig) -> Result<(), Failure> {
    let ds = load_data(m, config)?;
    let out = out_dir(m)?;
    let run = train_estimator(&ds, config, Some(&out), execution(m))?;
    println!(
        "best epoch {} val mpjpe {}; checkpoint {}",
        run.best_epoch,
        f17(run.best_val_mpjpe),
        out.join("best.ckpt").display()
    );
    Ok(())
}

fn cmd_train_action(m: &ArgMatches, config: &TrainConfig) -> Result<(), Failure> {
    let ds = load_data(m, config)?;
    let out = out_dir(m)?;
    let exec = execution(m);
    let estimator = pose_model(m, config)?;
    let source = match &estimator {
        Some(model) => PoseSource::Estimator(model),
        None => PoseSource::GroundTruth,
    };
    let run = train_recognizer(&ds, source, config, Some(&out), exec)?;
    println!(
        "best epoch {} val top1 {}; checkpoint {}",
        run.best_epoch,
        f17(run.best_val_top1),
        out.join("best.ckpt").display()
    );
    Ok(())
}

/// The estimator behind `--pose-source estimator`, if selected.
fn pose_model(m: &ArgMatches, config: &TrainConfig) -> Result<Option<egoaction::estimator::KeypointEstimator>, Failure> {
    match required(m, "pose-source")? {
        "estimator" => {
            let path = m
                .get_one::<String>("estimator-checkpoint")
                .ok_or_else(|| invalid("--pose-source estimator needs --estimator-checkpoint"))?;
            Ok(Some(load_estimator(Path::new(path), config)?))
        }
        _ => Ok(None),
    }
}

#[derive(Serialize)]
struct RoleConfidence {
    left: f64,
    right: f64,
    object: f64,
}

#[derive(Serialize)]
struct FrameRecord<'a> {
    video_id: &'a str,
    frame: usize,
    left: Vec<f64>,
    right: Vec<f64>,
    object: Vec<f64>,
    object_class: usize,
    confidence: RoleConfidence,
}

fn cmd_predict(m: &ArgMatches, config: &TrainConfig) -> Result<(), Failure> {
    let ds = load_data(m, config)?;
    let model = load_estimator(Path::new(required(m, "checkpoint")?), config)?;
    let split = split_of(m)?;
    let out = out_dir(m)?;
    let render = config.render();
    let videos = ds.split(split);
    let items: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| (0..v.len()).map(move |fi| (vi, fi)))
        .collect();
    let selected = par::try_map(execution(m), &items, |&(vi, fi)| {
        let preds = model.predict(&videos[vi].observation(fi, &render))?;
        egoaction::estimator::select_entities(&preds, config.n_object_classes)
    })?;
    let mut text = String::new();
    for (&(vi, fi), s) in items.iter().zip(&selected) {
        let flat = s.pose.to_flat();
        let record = FrameRecord {
            video_id: &videos[vi].id,
            frame: fi,
            left: flat[0..63].to_vec(),
            right: flat[63..126].to_vec(),
            object: flat[126..189].to_vec(),
            object_class: s.pose.object.class_id,
            confidence: RoleConfidence {
                left: s.confidence[0],
                right: s.confidence[1],
                object: s.confidence[2],
            },
        };
        text.push_str(&to_line(&record)?);
        text.push('\n');
    }
    let path = out.join("predictions.jsonl");
    write(&path, &text)?;
    println!("wrote {} frames of {} {split} videos to {}", items.len(), videos.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct ClassifySummary {
    split: String,
    pose_source: String,
    videos: usize,
    top1: f64,
    action_names: Vec<String>,
    /// Rows are true actions, columns predicted actions.
    confusion: Vec<Vec<usize>>,
}

fn classify(
    m: &ArgMatches,
    config: &TrainConfig,
    ds: &Dataset,
    split: Split,
) -> Result<(Vec<egoaction::train::VideoPrediction>, ClassifySummary), Failure> {
    let exec = execution(m);
    let model = load_recognizer(Path::new(required(m, "checkpoint")?), config)?;
    let estimator = pose_model(m, config)?;
    let source = match &estimator {
        Some(e) => PoseSource::Estimator(e),
        None => PoseSource::GroundTruth,
    };
    let videos = ds.split(split);
    let poses = resolve_poses(videos, source, config, exec)?;
    let preds = evaluate_recognizer(&model, videos, &poses, config, exec)?;
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let summary = ClassifySummary {
        split: split.to_string(),
        pose_source: required(m, "pose-source")?.to_string(),
        videos: preds.len(),
        top1: top1_of(&preds)?,
        action_names: (0..config.n_actions).map(egoaction::synth::action_name).collect(),
        confusion: confusion_matrix(&predicted, &labels, config.n_actions)?,
    };
    Ok((preds, summary))
}

fn cmd_classify(m: &ArgMatches, config: &TrainConfig) -> Result<(), Failure> {
    let ds = load_data(m, config)?;
    let split = split_of(m)?;
    let out = out_dir(m)?;
    let (preds, summary) = classify(m, config, &ds, split)?;
    let mut tsv = String::from("video_id\tpredicted\ttrue\tmargin\n");
    for p in &preds {
        tsv.push_str(&format!("{}\t{}\t{}\t{}\n", p.id, p.predicted, p.label, f17(p.margin())));
    }
    write(&out.join("predictions.tsv"), &tsv)?;
    write(&out.join("summary.json"), &to_pretty(&summary)?)?;
    println!("top1 {} over {} {split} videos", f17(summary.top1), summary.videos);
    Ok(())
}

#[derive(Serialize)]
struct PoseMetrics {
    model_mpjpe: f64,
    baseline_mpjpe: f64,
    beats_baseline: f64,
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pose: Option<PoseMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    action: Option<ClassifySummary>,
}

fn cmd_eval(m: &ArgMatches, config: &TrainConfig) -> Result<(), Failure> {
    let ds = load_data(m, config)?;
    let split = split_of(m)?;
    let has_rec = m.get_one::<String>("checkpoint").is_some();
    let est_path = m.get_one::<String>("estimator-checkpoint");
    if !has_rec && est_path.is_none() {
        return Err(invalid("eval needs --checkpoint and/or --estimator-checkpoint"));
    }
    let out = out_dir(m)?;
    let pose = match est_path {
        Some(path) => {
            let model = load_estimator(Path::new(path), config)?;
            let baseline = mean_pose_baseline(&ds.train)?;
            let ev = evaluate_estimator(&model, ds.split(split), &baseline, config, execution(m))?;
            Some(PoseMetrics {
                model_mpjpe: ev.model_mpjpe(),
                baseline_mpjpe: ev.baseline_mpjpe(),
                beats_baseline: ev.beats_baseline(),
            })
        }
        None => None,
    };
    let action = if has_rec { Some(classify(m, config, &ds, split)?.1) } else { None };
    let report = EvalReport {
        split: split.to_string(),
        pose,
        action,
    };
    let text = to_pretty(&report)?;
    write(&out.join("eval.json"), &text)?;
    print!("{text}");
    Ok(())
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>, Failure> {
    raw.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| invalid(format!("bad seed {s:?} in --seeds"))))
        .collect()
}

fn cmd_ablate(m: &ArgMatches, config: &TrainConfig) -> Result<(), Failure> {
    let ds = load_data(m, config)?;
    let seeds = parse_seeds(required(m, "seeds")?)?;
    let out = out_dir(m)?;
    let rows = run_sampling_ablation(&ds, config, &seeds, execution(m))?;
    write(&out.join("ablation.tsv"), &ablation_tsv(&rows))?;
    for (arm, mean) in arm_means(&rows).iter().enumerate() {
        println!("arm {} mean accuracy {}", arm + 1, f17(*mean));
    }
    Ok(())
}

fn cmd_selftest(m: &ArgMatches) -> Result<(), Failure> {
    let reports = selftest::run_all(execution(m));
    let mut failed = 0;
    for r in &reports {
        println!(
            "{} {}: {} passed, {} failed ({})",
            if r.ok() { "PASS" } else { "FAIL" },
            r.name,
            r.passed,
            r.failed,
            r.detail
        );
        failed += r.failed;
    }
    if failed > 0 {
        return Err(invalid(format!("{failed} selftest checks failed")));
    }
    Ok(())
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<(), Failure> {
    let config = resolve_config(m)?;
    println!("{}", to_line(&config)?);
    match name {
        "gen-data" => cmd_gen_data(m, &config),
        "train-keypoints" => cmd_train_keypoints(m, &config),
        "train-action" => cmd_train_action(m, &config),
        "predict" => cmd_predict(m, &config),
        "classify" => cmd_classify(m, &config),
        "eval" => cmd_eval(m, &config),
        "ablate-sampling" => cmd_ablate(m, &config),
        "selftest" => cmd_selftest(m),
        other => Err(invalid(format!("unknown subcommand {other}"))),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        return ExitCode::from(1);
    };
    match dispatch(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
