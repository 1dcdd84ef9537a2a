//! On-disk formats.
//!
//! Pyramid blob, all little-endian: `u32` layer count `p`, then per layer
//! `u32` height, width, dim and stride; then per layer the `H*W*D` feature
//! floats followed by the `H*W*4` box-field floats, all `f32`.
//!
//! Text formats are JSON lines (ground truth, detections) and pretty JSON
//! (manifest, registry, modules, reports). Floats that must round-trip are
//! written with the shortest exact representation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{ClassEmbeddingRegistry, EmbeddingVector, TaskSchedule};
use crate::error::{Error, Result};
use crate::eval::{DetRecord, GtRecord};
use crate::geometry::BBox;
use crate::mscal::MscalModule;
use crate::pipeline::Checkpoint;
use crate::pyramid::{FeaturePyramid, LayerGeometry, PyramidLayer};
use crate::training::{LabeledScene, TrainLog, TrainLogRow};
use crate::world::{ClassKind, Split, World, WorldClass, WorldSpec};

pub const DETECTIONS_FORMAT: &str = "openworld-kit/detections";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_pyramid(p: &FeaturePyramid) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((p.layers().len() as u32).to_le_bytes());
    for l in p.layers() {
        for v in [
            l.geometry.height as u32,
            l.geometry.width as u32,
            p.dim() as u32,
            l.geometry.stride,
        ] {
            out.extend(v.to_le_bytes());
        }
    }
    for l in p.layers() {
        for v in l.features() {
            out.extend(v.to_le_bytes());
        }
        for b in l.boxes() {
            for v in b {
                out.extend(v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take4(&mut self) -> Result<[u8; 4]> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format("pyramid blob is truncated".into()))?;
        self.pos += 4;
        Ok(b.try_into().expect("four bytes"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take4()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take4()?))
    }
}

pub fn decode_pyramid(bytes: &[u8]) -> Result<FeaturePyramid> {
    let mut r = Reader { bytes, pos: 0 };
    let p = r.u32()? as usize;
    if p == 0 || p > 64 {
        return Err(Error::Format(format!("implausible layer count {p}")));
    }
    let mut shapes = Vec::with_capacity(p);
    let mut dim = None;
    for _ in 0..p {
        let (h, w, d, stride) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        if *dim.get_or_insert(d) != d {
            return Err(Error::Format("layers disagree on feature dimension".into()));
        }
        shapes.push(LayerGeometry::new(h as usize, w as usize, stride));
    }
    let dim = dim.expect("p > 0") as usize;
    let mut layers = Vec::with_capacity(p);
    for g in shapes {
        let n = g.len();
        if bytes.len() < r.pos + 4 * n * (dim + 4) {
            return Err(Error::Format("pyramid blob is truncated".into()));
        }
        let features = (0..n * dim).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
        let boxes = (0..n)
            .map(|_| Ok([r.f32()?, r.f32()?, r.f32()?, r.f32()?]))
            .collect::<Result<Vec<[f32; 4]>>>()?;
        layers.push(PyramidLayer::new(g, dim, features, boxes)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after pyramid".into()));
    }
    FeaturePyramid::new(dim, layers)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    // through Value so map keys come out sorted
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| missing(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::Format(format!("{} not found", path.display()))
    } else {
        Error::Io(e)
    }
}

/// Layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn world(&self) -> PathBuf {
        self.root.join("world")
    }

    pub fn manifest(&self) -> PathBuf {
        self.world().join("manifest.json")
    }

    pub fn tasks(&self) -> PathBuf {
        self.world().join("tasks.json")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.world().join("embeddings.json")
    }

    pub fn prompts(&self) -> PathBuf {
        self.world().join("prompts.json")
    }

    pub fn split_dir(&self, split: Split) -> PathBuf {
        self.world().join(split.name())
    }

    pub fn gt(&self, split: Split) -> PathBuf {
        self.split_dir(split).join("gt.jsonl")
    }

    pub fn scene(&self, split: Split, scene_id: &str) -> PathBuf {
        self.split_dir(split).join(format!("{scene_id}.bin"))
    }

    pub fn checkpoint(&self, task: u32) -> PathBuf {
        self.root.join("checkpoints").join(format!("task-{task}"))
    }

    pub fn detections(&self, task: u32, split: Split, tag: &str) -> PathBuf {
        self.root
            .join("detections")
            .join(format!("task-{task}-{}{}.jsonl", split.name(), suffix(tag)))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, task: u32, split: Split, tag: &str) -> PathBuf {
        self.reports()
            .join(format!("eval-task-{task}-{}{}", split.name(), suffix(tag)))
    }
}

fn suffix(tag: &str) -> String {
    if tag.is_empty() {
        String::new()
    } else {
        format!("-{tag}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub name: String,
    #[serde(flatten)]
    pub kind: ClassKind,
    pub prototype: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub spec: WorldSpec,
    pub classes: Vec<ManifestClass>,
    pub tasks: BTreeMap<String, Vec<String>>,
    pub unknown: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn schedule(&self) -> Result<TaskSchedule> {
        schedule_from_map(&self.tasks)
    }

    pub fn scene_ids(&self, split: Split) -> &[String] {
        self.splits.get(split.name()).map_or(&[], Vec::as_slice)
    }

    pub fn num_tasks(&self) -> u32 {
        self.tasks.len() as u32
    }

    pub fn known_total(&self) -> usize {
        self.tasks.values().map(Vec::len).sum()
    }
}

pub fn schedule_to_map(s: &TaskSchedule) -> BTreeMap<String, Vec<String>> {
    s.tasks()
        .iter()
        .enumerate()
        .map(|(i, names)| ((i + 1).to_string(), names.clone()))
        .collect()
}

pub fn schedule_from_map(map: &BTreeMap<String, Vec<String>>) -> Result<TaskSchedule> {
    let mut tasks: Vec<(u32, Vec<String>)> = map
        .iter()
        .map(|(k, v)| {
            k.parse::<u32>()
                .map(|t| (t, v.clone()))
                .map_err(|_| Error::Format(format!("task id `{k}` is not an integer")))
        })
        .collect::<Result<_>>()?;
    tasks.sort_by_key(|(t, _)| *t);
    if tasks.iter().enumerate().any(|(i, (t, _))| *t != i as u32 + 1) {
        return Err(Error::Format("task ids must be 1..n without gaps".into()));
    }
    TaskSchedule::new(tasks.into_iter().map(|(_, v)| v).collect())
}

pub fn gt_line(r: &GtRecord) -> String {
    serde_json::json!({
        "scene_id": r.scene_id,
        "x1": r.bbox.x1, "y1": r.bbox.y1, "x2": r.bbox.x2, "y2": r.bbox.y2,
        "class_name": r.class_name,
    })
    .to_string()
}

/// Writes the world files: manifest, task split, embeddings, prompts, and per
/// split the pyramid blobs and ground truth. Train and calibration ground
/// truth leave out classes that are never known.
pub fn export_world(dir: &RunDir, world: &World) -> Result<Manifest> {
    let schedule = world.schedule()?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let scenes = crate::world::generate_split(world, split)?;
        let mut gt = String::new();
        fs::create_dir_all(dir.split_dir(split))?;
        for s in &scenes {
            write_bytes(&dir.scene(split, &s.scene_id), &encode_pyramid(&s.pyramid))?;
            for o in &s.objects {
                if split != Split::Test && schedule.task_of(&o.class_name).is_none() {
                    continue;
                }
                gt.push_str(&gt_line(&GtRecord {
                    scene_id: s.scene_id.clone(),
                    bbox: o.bbox,
                    class_name: o.class_name.clone(),
                }));
                gt.push('\n');
            }
        }
        write_bytes(&dir.gt(split), gt.as_bytes())?;
        splits.insert(
            split.name().to_string(),
            scenes.iter().map(|s| s.scene_id.clone()).collect(),
        );
    }
    let mut embeddings: BTreeMap<String, Vec<f64>> = world.text_embeddings.iter().cloned().collect();
    embeddings.insert("object".into(), world.generic_object.clone());
    write_json(&dir.embeddings(), &embeddings)?;
    let prompts: BTreeMap<String, Vec<f64>> = world.generic_prompts.iter().cloned().collect();
    write_json(&dir.prompts(), &prompts)?;
    let tasks = schedule_to_map(&schedule);
    write_json(&dir.tasks(), &tasks)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: world.seed,
        spec: world.spec.clone(),
        classes: world
            .classes
            .iter()
            .map(|c: &WorldClass| ManifestClass {
                name: c.name.clone(),
                kind: c.kind.clone(),
                prototype: c.prototype.clone(),
            })
            .collect(),
        tasks,
        unknown: world.unknown_classes().map(|c| c.name.clone()).collect(),
        splits,
    };
    write_json(&dir.manifest(), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &RunDir) -> Result<Manifest> {
    read_json(&dir.manifest())
}

pub fn read_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    read_json(path)
}

fn field_f64(v: &serde_json::Value, key: &str) -> std::result::Result<f64, String> {
    v.get(key)
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| format!("missing number `{key}`"))
}

fn field_str<'a>(v: &'a serde_json::Value, key: &str) -> std::result::Result<&'a str, String> {
    v.get(key)
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| format!("missing string `{key}`"))
}

fn field_box(v: &serde_json::Value) -> std::result::Result<BBox, String> {
    let b = BBox::new(
        field_f64(v, "x1")?,
        field_f64(v, "y1")?,
        field_f64(v, "x2")?,
        field_f64(v, "y2")?,
    );
    if b.x1 < b.x2 && b.y1 < b.y2 {
        Ok(b)
    } else {
        Err("box is not well formed".into())
    }
}

fn parse_lines<T>(
    path: &Path,
    text: &str,
    mut f: impl FnMut(usize, &serde_json::Value) -> std::result::Result<Option<T>, String>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if let Some(x) = f(i, &v).map_err(err)? {
            out.push(x);
        }
    }
    Ok(out)
}

pub fn read_gt(path: &Path) -> Result<Vec<GtRecord>> {
    let text = fs::read_to_string(path).map_err(|e| missing(path, e))?;
    parse_lines(path, &text, |_, v| {
        Ok(Some(GtRecord {
            scene_id: field_str(v, "scene_id")?.to_string(),
            bbox: field_box(v)?,
            class_name: field_str(v, "class_name")?.to_string(),
        }))
    })
}

/// Ground truth of a split grouped into trainable scenes, in manifest order.
pub fn read_labeled_split(dir: &RunDir, manifest: &Manifest, split: Split) -> Result<Vec<LabeledScene>> {
    let mut gt: BTreeMap<String, Vec<(BBox, String)>> = BTreeMap::new();
    for r in read_gt(&dir.gt(split))? {
        gt.entry(r.scene_id).or_default().push((r.bbox, r.class_name));
    }
    manifest
        .scene_ids(split)
        .iter()
        .map(|id| {
            Ok(LabeledScene {
                scene_id: id.clone(),
                pyramid: read_scene(dir, split, id)?,
                gt: gt.remove(id).unwrap_or_default(),
            })
        })
        .collect()
}

pub fn read_scene(dir: &RunDir, split: Split, scene_id: &str) -> Result<FeaturePyramid> {
    let path = dir.scene(split, scene_id);
    let bytes = fs::read(&path).map_err(|e| missing(&path, e))?;
    decode_pyramid(&bytes)
}

/// Header line of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionsHeader {
    pub format: String,
    pub version: u32,
    pub task: u32,
    pub split: String,
    pub no_owel: bool,
    pub no_mscal: bool,
    pub alpha: f64,
    pub theta: f64,
    pub scenes: usize,
}

/// One detection as a JSON line, coordinates rounded to 4 decimals.
pub fn detection_line(d: &DetRecord) -> String {
    let label = serde_json::to_string(d.label.as_deref().unwrap_or("unknown")).expect("string");
    let id = serde_json::to_string(&d.scene_id).expect("string");
    format!(
        "{{\"scene_id\":{id},\"x1\":{:.4},\"y1\":{:.4},\"x2\":{:.4},\"y2\":{:.4},\"label\":{label},\"confidence\":{},\"ood\":{}}}",
        d.bbox.x1,
        d.bbox.y1,
        d.bbox.x2,
        d.bbox.y2,
        serde_json::Value::from(d.confidence),
        finite_or_null(d.ood),
    )
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::Value::from(v)
    } else {
        serde_json::Value::Null
    }
}

pub fn write_detections(path: &Path, header: &DetectionsHeader, dets: &[DetRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let mut h = serde_json::to_value(header)?;
    if !header.theta.is_finite() {
        h["theta"] = serde_json::Value::Null;
    }
    writeln!(f, "{h}")?;
    for d in dets {
        writeln!(f, "{}", detection_line(d))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a detections file; the first non-empty line must be the header.
pub fn read_detections(path: &Path) -> Result<(serde_json::Value, Vec<DetRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| missing(path, e))?;
    let mut header = None;
    let dets = parse_lines(path, &text, |_, v| {
        if header.is_none() {
            if field_str(v, "format")? != DETECTIONS_FORMAT {
                return Err("first line is not a detections header".into());
            }
            header = Some(v.clone());
            return Ok(None);
        }
        let confidence = field_f64(v, "confidence")?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err("confidence outside [0, 1]".into());
        }
        let label = field_str(v, "label")?;
        Ok(Some(DetRecord {
            scene_id: field_str(v, "scene_id")?.to_string(),
            bbox: field_box(v)?,
            label: (label != "unknown").then(|| label.to_string()),
            confidence,
            ood: v.get("ood").and_then(serde_json::Value::as_f64).unwrap_or(f64::NAN),
        }))
    })?;
    let header = header.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "missing detections header".into(),
    })?;
    Ok((header, dets))
}

#[derive(Serialize, Deserialize)]
struct ThetaFile {
    theta: f64,
    task_id: u32,
}

pub fn write_checkpoint(dir: &Path, checkpoint: &Checkpoint, config_toml: &str) -> Result<()> {
    fs::create_dir_all(dir.join("modules"))?;
    write_json(&dir.join("registry.json"), &checkpoint.registry)?;
    for m in &checkpoint.modules {
        write_json(&dir.join("modules").join(format!("{}.json", m.class_name)), m)?;
    }
    write_bytes(&dir.join("config.toml"), config_toml.as_bytes())?;
    write_json(
        &dir.join("theta.json"),
        &ThetaFile {
            theta: checkpoint.theta,
            task_id: checkpoint.task_id,
        },
    )?;
    write_bytes(&dir.join("train_log.csv"), checkpoint.log.to_csv().as_bytes())?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.join("registry.json").exists() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let raw: ClassEmbeddingRegistry = read_json(&dir.join("registry.json"))?;
    let registry = ClassEmbeddingRegistry::from_parts(
        raw.entries().to_vec(),
        EmbeddingVector::new(raw.generic_object().as_slice().to_vec())?,
        raw.alpha(),
    )?;
    let modules = registry
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let m: MscalModule = read_json(&dir.join("modules").join(format!("{}.json", e.name)))?;
            if m.class_id != i || m.class_name != e.name {
                return Err(Error::Format(format!(
                    "module file of `{}` does not match the registry",
                    e.name
                )));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let theta: ThetaFile = read_json(&dir.join("theta.json"))?;
    let log_path = dir.join("train_log.csv");
    let log_text = fs::read_to_string(&log_path).map_err(|e| missing(&log_path, e))?;
    Ok(Checkpoint {
        task_id: theta.task_id,
        registry,
        modules,
        theta: theta.theta,
        log: parse_train_log(&log_path, &log_text)?,
    })
}

pub fn parse_train_log(path: &Path, text: &str) -> Result<TrainLog> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err("expected 4 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
        rows.push(TrainLogRow {
            step: f[0].parse().map_err(|_| err("bad step"))?,
            det_loss: num(f[1])?,
            mscal_loss: num(f[2])?,
            total: num(f[3])?,
        });
    }
    Ok(TrainLog { rows })
}
