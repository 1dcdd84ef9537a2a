//! Command implementations behind the `openworld-kit` binary. Each command
//! reads and writes files under one run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::embedding::{EmbeddingVector, TaskSchedule};
use crate::error::{Error, Result};
use crate::eval::{evaluate_task, fmt_metric, DetRecord, EvalReport};
use crate::io::{self, DetectionsHeader, Manifest, RunDir};
use crate::pipeline::{infer_split, train_next_task, Checkpoint, InferOptions};
use crate::pyramid::FeaturePyramid;
use crate::training::{LabeledScene, TaskData};
use crate::world::{make_world, Split};

pub fn cmd_gen(cfg: &RunConfig, dir: &RunDir) -> Result<Manifest> {
    let world = make_world(&cfg.world, cfg.run.seed)?;
    io::export_world(dir, &world)
}

type NamedRows = Vec<(String, Vec<f64>)>;

fn text_embeddings(dir: &RunDir) -> Result<(EmbeddingVector, NamedRows)> {
    let mut map = io::read_embeddings(&dir.embeddings())?;
    let w0 = map
        .remove("object")
        .ok_or_else(|| Error::Format("embedding file lacks the `object` entry".into()))?;
    Ok((EmbeddingVector::new(w0)?, map.into_iter().collect()))
}

fn load_previous(dir: &RunDir, task: u32) -> Result<Option<Checkpoint>> {
    if task <= 1 {
        return Ok(None);
    }
    let path = dir.checkpoint(task - 1);
    if !path.join("registry.json").exists() {
        return Err(Error::MissingCheckpoint(path));
    }
    io::read_checkpoint(&path).map(Some)
}

struct TrainInputs {
    manifest: Manifest,
    schedule: TaskSchedule,
    train: Vec<LabeledScene>,
    cal: Vec<LabeledScene>,
    w0: EmbeddingVector,
    text: Vec<(String, Vec<f64>)>,
}

fn train_inputs(dir: &RunDir) -> Result<TrainInputs> {
    let manifest = io::read_manifest(dir)?;
    let schedule = manifest.schedule()?;
    let train = io::read_labeled_split(dir, &manifest, Split::Train)?;
    let cal = io::read_labeled_split(dir, &manifest, Split::Cal)?;
    let (w0, text) = text_embeddings(dir)?;
    Ok(TrainInputs {
        manifest,
        schedule,
        train,
        cal,
        w0,
        text,
    })
}

fn train_with(inputs: &TrainInputs, cfg: &RunConfig, prev: Option<&Checkpoint>, task: u32) -> Result<Checkpoint> {
    let rule = inputs.manifest.spec.level_rule()?;
    let data = TaskData {
        train: &inputs.train,
        cal: &inputs.cal,
        rule: &rule,
    };
    train_next_task(
        prev,
        &inputs.w0,
        &inputs.text,
        &inputs.schedule,
        &data,
        &cfg.train,
        cfg.run.alpha,
        task,
        cfg.run.seed,
    )
}

/// Trains `task` from the previous task's checkpoint and writes its own.
pub fn cmd_train(cfg: &RunConfig, dir: &RunDir, task: u32) -> Result<Checkpoint> {
    let prev = load_previous(dir, task)?;
    let inputs = train_inputs(dir)?;
    let c = train_with(&inputs, cfg, prev.as_ref(), task)?;
    io::write_checkpoint(&dir.checkpoint(task), &c, &cfg.to_toml()?)?;
    Ok(c)
}

#[derive(Clone, Debug, Default)]
pub struct InferArgs {
    pub no_owel: bool,
    pub no_mscal: bool,
    /// File-name tag; derived from the flags when empty.
    pub tag: String,
    pub output: Option<PathBuf>,
}

impl InferArgs {
    pub fn tag(&self) -> String {
        if !self.tag.is_empty() {
            return self.tag.clone();
        }
        match (self.no_owel, self.no_mscal) {
            (false, false) => String::new(),
            (true, false) => "no-owel".into(),
            (false, true) => "no-mscal".into(),
            (true, true) => "base".into(),
        }
    }
}

fn read_pyramids(dir: &RunDir, manifest: &Manifest, split: Split) -> Result<Vec<(String, FeaturePyramid)>> {
    manifest
        .scene_ids(split)
        .iter()
        .map(|id| Ok((id.clone(), io::read_scene(dir, split, id)?)))
        .collect()
}

fn run_inference(
    cfg: &RunConfig,
    checkpoint: &Checkpoint,
    scenes: &[(String, FeaturePyramid)],
    split: Split,
    args: &InferArgs,
    options: InferOptions,
    path: &Path,
) -> Result<Vec<DetRecord>> {
    let dets = infer_split(checkpoint, scenes, &cfg.detect, &options)?;
    let header = DetectionsHeader {
        format: io::DETECTIONS_FORMAT.into(),
        version: io::FORMAT_VERSION,
        task: checkpoint.task_id,
        split: split.name().into(),
        no_owel: args.no_owel,
        no_mscal: args.no_mscal,
        alpha: options.alpha.unwrap_or(cfg.run.alpha),
        theta: if args.no_mscal { f64::INFINITY } else { checkpoint.theta },
        scenes: scenes.len(),
    };
    io::write_detections(path, &header, &dets)?;
    Ok(dets)
}

/// Runs inference over a split; returns the output path and detection count.
pub fn cmd_infer(cfg: &RunConfig, dir: &RunDir, task: u32, split: Split, args: &InferArgs) -> Result<(PathBuf, usize)> {
    let checkpoint = io::read_checkpoint(&dir.checkpoint(task))?;
    let manifest = io::read_manifest(dir)?;
    let scenes = read_pyramids(dir, &manifest, split)?;
    let path = args
        .output
        .clone()
        .unwrap_or_else(|| dir.detections(task, split, &args.tag()));
    let options = InferOptions {
        no_owel: args.no_owel,
        no_mscal: args.no_mscal,
        alpha: Some(cfg.run.alpha),
        generic_prompt: None,
    };
    let dets = run_inference(cfg, &checkpoint, &scenes, split, args, options, &path)?;
    Ok((path, dets.len()))
}

/// Which configured thresholds a report misses.
pub fn unmet_thresholds(cfg: &RunConfig, r: &EvalReport) -> Vec<String> {
    let t = &cfg.eval;
    let mut out = Vec::new();
    let mut check = |name: &str, ok: Option<bool>| {
        // an undefined metric never fails a threshold
        if ok == Some(false) {
            out.push(name.to_string());
        }
    };
    check("min_u_recall", t.min_u_recall.and_then(|m| r.u_recall.map(|v| v >= m)));
    check("min_map_both", t.min_map_both.and_then(|m| r.map_both.map(|v| v >= m)));
    check("max_a_ose", t.max_a_ose.map(|m| r.a_ose <= m));
    check("max_wi", t.max_wi.and_then(|m| r.wi.map(|v| v <= m)));
    out
}

fn evaluate(
    cfg: &RunConfig,
    schedule: &TaskSchedule,
    gt: &[crate::eval::GtRecord],
    header: serde_json::Value,
    dets: &[DetRecord],
    task: u32,
) -> Result<EvalReport> {
    let echo = serde_json::json!({ "run_config": cfg.to_json(), "detections": header });
    evaluate_task(dets, gt, schedule, task, echo)
}

pub fn write_report(base: &Path, r: &EvalReport) -> Result<()> {
    if let Some(d) = base.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(base.with_extension("json"), r.to_json()?)?;
    fs::write(
        base.with_extension("csv"),
        format!("{}\n{}\n", EvalReport::csv_header(), r.csv_row()),
    )?;
    Ok(())
}

/// Evaluates a detections file against the split's ground truth and writes
/// the JSON and CSV report next to the others.
pub fn cmd_eval(
    cfg: &RunConfig,
    dir: &RunDir,
    task: u32,
    split: Split,
    detections: Option<&Path>,
    tag: &str,
) -> Result<EvalReport> {
    let manifest = io::read_manifest(dir)?;
    let schedule = manifest.schedule()?;
    let det_path = detections.map_or_else(|| dir.detections(task, split, tag), Path::to_path_buf);
    let (header, dets) = io::read_detections(&det_path)?;
    let gt = io::read_gt(&dir.gt(split))?;
    let report = evaluate(cfg, &schedule, &gt, header, &dets, task)?;
    write_report(&dir.report(task, split, tag), &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateParam {
    Alpha,
    Prompt,
    Tau,
    NegCap,
}

impl AblateParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "prompt" => Ok(Self::Prompt),
            "tau" => Ok(Self::Tau),
            "neg_cap" => Ok(Self::NegCap),
            _ => Err(Error::Config(format!("unknown ablation parameter `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Prompt => "prompt",
            Self::Tau => "tau",
            Self::NegCap => "neg_cap",
        }
    }

    fn needs_retrain(self) -> bool {
        matches!(self, Self::Tau | Self::NegCap)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub report: EvalReport,
}

fn parse_f64(v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("`{v}` is not a number")))
}

/// Sweeps one parameter on the test split. `alpha` and `prompt` only change
/// inference; `tau` and `neg_cap` retrain every task up to `task` in a
/// separate directory and need `retrain`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    dir: &RunDir,
    task: u32,
    param: AblateParam,
    values: &[String],
    retrain: bool,
) -> Result<Vec<AblationRow>> {
    if param.needs_retrain() && !retrain {
        return Err(Error::RetrainRequired(param.name().into()));
    }
    let manifest = io::read_manifest(dir)?;
    let schedule = manifest.schedule()?;
    let split = Split::Test;
    let scenes = read_pyramids(dir, &manifest, split)?;
    let gt = io::read_gt(&dir.gt(split))?;
    let prompts = io::read_embeddings(&dir.prompts())?;
    let values: Vec<String> = if !values.is_empty() {
        values.to_vec()
    } else {
        match param {
            AblateParam::Alpha => ["0.2", "0.4", "0.8"].map(String::from).to_vec(),
            AblateParam::Prompt => prompts.keys().cloned().collect(),
            AblateParam::Tau => ["0.05", "0.1", "0.2"].map(String::from).to_vec(),
            AblateParam::NegCap => ["5", "10", "20"].map(String::from).to_vec(),
        }
    };
    let base_checkpoint = if param.needs_retrain() {
        None
    } else {
        Some(io::read_checkpoint(&dir.checkpoint(task))?)
    };
    let inputs = if param.needs_retrain() {
        Some(train_inputs(dir)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for value in &values {
        let mut run_cfg = cfg.clone();
        let mut options = InferOptions {
            alpha: Some(cfg.run.alpha),
            ..InferOptions::default()
        };
        let checkpoint = match param {
            AblateParam::Alpha => {
                let a = parse_f64(value)?;
                run_cfg.run.alpha = a;
                options.alpha = Some(a);
                base_checkpoint.clone().expect("loaded above")
            }
            AblateParam::Prompt => {
                let v = prompts
                    .get(value)
                    .ok_or_else(|| Error::Config(format!("no prompt `{value}` in the prompt file")))?;
                options.generic_prompt = Some(EmbeddingVector::new(v.clone())?);
                base_checkpoint.clone().expect("loaded above")
            }
            AblateParam::Tau | AblateParam::NegCap => {
                if param == AblateParam::Tau {
                    run_cfg.train.tau = parse_f64(value)?;
                } else {
                    run_cfg.train.neg_cap = value
                        .parse()
                        .map_err(|_| Error::Config(format!("`{value}` is not a count")))?;
                }
                run_cfg.validate()?;
                let inputs = inputs.as_ref().expect("loaded above");
                let sub = RunDir::new(dir.root.join("ablate").join(format!("{}-{value}", param.name())));
                let mut prev: Option<Checkpoint> = None;
                for t in 1..=task {
                    let c = train_with(inputs, &run_cfg, prev.as_ref(), t)?;
                    io::write_checkpoint(&sub.checkpoint(t), &c, &run_cfg.to_toml()?)?;
                    prev = Some(c);
                }
                prev.expect("task >= 1")
            }
        };
        let args = InferArgs {
            tag: format!("{}-{value}", param.name()),
            ..InferArgs::default()
        };
        let path = dir.detections(task, split, &args.tag);
        let dets = run_inference(&run_cfg, &checkpoint, &scenes, split, &args, options, &path)?;
        let (header, _) = io::read_detections(&path)?;
        let mut report = evaluate(&run_cfg, &schedule, &gt, header, &dets, task)?;
        report
            .metadata
            .insert("ablation".into(), format!("{}={value}", param.name()));
        rows.push(AblationRow {
            value: value.clone(),
            report,
        });
    }
    let base = dir.reports().join(format!("ablate-{}-task-{task}", param.name()));
    fs::create_dir_all(dir.reports())?;
    let mut csv = format!("{},{}\n", param.name(), EvalReport::csv_header());
    for r in &rows {
        let _ = writeln!(csv, "{},{}", r.value, r.report.csv_row());
    }
    fs::write(base.with_extension("csv"), csv)?;
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| serde_json::json!({ "value": r.value, "report": r.report }))
        .collect();
    io::write_json(&base.with_extension("json"), &json)?;
    Ok(rows)
}

/// Collects every evaluation report into one table, written as
/// `reports/summary.csv`, and returns it rendered.
pub fn cmd_report(dir: &RunDir) -> Result<String> {
    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    if dir.reports().exists() {
        for entry in fs::read_dir(dir.reports())? {
            let path = entry?.path();
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            if name.starts_with("eval-") && path.extension().is_some_and(|e| e == "json") {
                reports.insert(name, io::read_json(&path)?);
            }
        }
    }
    let mut csv = format!("report,{}\n", EvalReport::csv_header());
    let mut table = format!(
        "{:<32} {:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
        "report", "task", "mAP-prev", "mAP-curr", "mAP-both", "U-Rec", "WI", "A-OSE"
    );
    for (name, r) in &reports {
        let _ = writeln!(csv, "{name},{}", r.csv_row());
        let _ = writeln!(
            table,
            "{:<32} {:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}",
            name,
            r.task_id,
            fmt_metric(r.map_prev),
            fmt_metric(r.map_curr),
            fmt_metric(r.map_both),
            fmt_metric(r.u_recall),
            fmt_metric(r.wi),
            r.a_ose
        );
    }
    fs::create_dir_all(dir.reports())?;
    fs::write(dir.reports().join("summary.csv"), csv)?;
    Ok(table)
}
