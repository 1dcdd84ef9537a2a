//! Open-world detection metrics: AP/mAP, U-Recall, Wilderness Impact, A-OSE.
//!
//! Matching is greedy by descending confidence at IoU >= 0.5; each ground
//! truth box is claimed at most once. Every metric is computed scene by scene
//! and folded in scene-id order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::TaskSchedule;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const MATCH_IOU: f64 = 0.5;
pub const WI_RECALL: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalDet {
    pub bbox: BBox,
    pub confidence: f64,
    /// `None` for UNKNOWN.
    pub class: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalGt {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// Matched GT index per detection.
    pub det_gt: Vec<Option<usize>>,
    /// IoU with the matched GT, `0` when unmatched.
    pub det_iou: Vec<f64>,
    /// Covering detection per GT.
    pub gt_det: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.det_gt[det].is_some()
    }

    pub fn matched_gt(&self) -> usize {
        self.gt_det.iter().filter(|d| d.is_some()).count()
    }
}

/// Detection indices by descending confidence, ties by input order.
pub fn confidence_order(dets: &[EvalDet]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Greedy matching of one scene. Each detection, in descending confidence,
/// takes the unmatched GT of highest IoU at or above `iou_thr`, ties to the
/// lower GT index. With `label_aware` only GT of the detection's class count.
pub fn match_detections(dets: &[EvalDet], gts: &[EvalGt], iou_thr: f64, label_aware: bool) -> MatchResult {
    let mut r = MatchResult {
        det_gt: vec![None; dets.len()],
        det_iou: vec![0.0; dets.len()],
        gt_det: vec![None; gts.len()],
    };
    for d in confidence_order(dets) {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if r.gt_det[g].is_some() || (label_aware && det.class != Some(gt.class)) {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            r.det_gt[d] = Some(g);
            r.det_iou[d] = v;
            r.gt_det[g] = Some(d);
        }
    }
    r
}

/// All-point interpolated AP from `(confidence, is_tp)` pairs already in
/// ranking order. `None` when there is neither GT nor a detection.
pub fn average_precision(ranked: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if ranked.is_empty() { None } else { Some(0.0) };
    }
    let mut precision = Vec::with_capacity(ranked.len());
    let mut tp_rank = Vec::new();
    let mut tp = 0usize;
    for (i, &(_, hit)) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
            tp_rank.push(i);
        }
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // running maximum from the right
    let mut interp = precision.clone();
    for i in (0..interp.len().saturating_sub(1)).rev() {
        interp[i] = interp[i].max(interp[i + 1]);
    }
    let sum: f64 = tp_rank.iter().map(|&i| interp[i]).sum();
    Some(sum / n_gt as f64)
}

/// One scene's detections and ground truth, with class ids interned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneEval {
    pub scene_id: String,
    pub dets: Vec<EvalDet>,
    pub gts: Vec<EvalGt>,
}

/// Which class ids are known at the evaluated task.
#[derive(Clone, Debug, PartialEq)]
pub struct KnownSet {
    pub known: BTreeSet<usize>,
}

impl KnownSet {
    pub fn is_known(&self, class: usize) -> bool {
        self.known.contains(&class)
    }
}

fn unknown_gts(scene: &SceneEval, known: &KnownSet) -> Vec<EvalGt> {
    scene.gts.iter().copied().filter(|g| !known.is_known(g.class)).collect()
}

fn known_gts(scene: &SceneEval, known: &KnownSet) -> Vec<EvalGt> {
    scene.gts.iter().copied().filter(|g| known.is_known(g.class)).collect()
}

/// Per-class ranked `(confidence, tp)` lists and GT counts, pooled over scenes.
pub fn class_rankings(scenes: &[SceneEval], class: usize) -> (Vec<(f64, bool)>, usize) {
    let per_scene: Vec<(Vec<(f64, bool)>, usize)> = scenes
        .par_iter()
        .map(|s| {
            let dets: Vec<EvalDet> = s.dets.iter().copied().filter(|d| d.class == Some(class)).collect();
            let gts: Vec<EvalGt> = s.gts.iter().copied().filter(|g| g.class == class).collect();
            let m = match_detections(&dets, &gts, MATCH_IOU, true);
            let ranked = confidence_order(&dets)
                .into_iter()
                .map(|d| (dets[d].confidence, m.is_tp(d)))
                .collect();
            (ranked, gts.len())
        })
        .collect();
    let mut all: Vec<(usize, usize, f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for (s, (ranked, n)) in per_scene.into_iter().enumerate() {
        n_gt += n;
        all.extend(ranked.into_iter().enumerate().map(|(k, (c, tp))| (s, k, c, tp)));
    }
    // descending confidence, then scene order, then rank within the scene
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    (all.into_iter().map(|(_, _, c, tp)| (c, tp)).collect(), n_gt)
}

/// Fraction of unknown GT claimed by UNKNOWN detections; `None` without
/// unknown GT.
pub fn u_recall(scenes: &[SceneEval], known: &KnownSet) -> Option<f64> {
    let counts: Vec<(usize, usize)> = scenes
        .par_iter()
        .map(|s| {
            let gts = unknown_gts(s, known);
            let dets: Vec<EvalDet> = s.dets.iter().copied().filter(|d| d.class.is_none()).collect();
            (match_detections(&dets, &gts, MATCH_IOU, false).matched_gt(), gts.len())
        })
        .collect();
    let (hit, total) = counts.iter().fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Number of unknown GT claimed by detections carrying a known label.
pub fn a_ose(scenes: &[SceneEval], known: &KnownSet) -> u64 {
    scenes
        .par_iter()
        .map(|s| {
            let gts = unknown_gts(s, known);
            let dets: Vec<EvalDet> = s.dets.iter().copied().filter(|d| d.class.is_some()).collect();
            match_detections(&dets, &gts, MATCH_IOU, false).matched_gt() as u64
        })
        .collect::<Vec<u64>>()
        .into_iter()
        .sum()
}

/// A known-labeled detection, classified against the scene's ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WiEntry {
    pub confidence: f64,
    pub tp: bool,
    /// False positive overlapping some unknown GT at IoU >= 0.5.
    pub on_unknown: bool,
}

pub fn wi_entries(scenes: &[SceneEval], known: &KnownSet) -> (Vec<WiEntry>, usize) {
    let per_scene: Vec<(Vec<WiEntry>, usize)> = scenes
        .par_iter()
        .map(|s| {
            let kg = known_gts(s, known);
            let ug = unknown_gts(s, known);
            let dets: Vec<EvalDet> = s.dets.iter().copied().filter(|d| d.class.is_some()).collect();
            let m = match_detections(&dets, &kg, MATCH_IOU, true);
            let entries = confidence_order(&dets)
                .into_iter()
                .map(|d| {
                    let tp = m.is_tp(d);
                    WiEntry {
                        confidence: dets[d].confidence,
                        tp,
                        on_unknown: !tp && ug.iter().any(|g| iou(&dets[d].bbox, &g.bbox) >= MATCH_IOU),
                    }
                })
                .collect();
            (entries, kg.len())
        })
        .collect();
    let n_known = per_scene.iter().map(|(_, n)| n).sum();
    let entries = per_scene.into_iter().flat_map(|(e, _)| e).collect();
    (entries, n_known)
}

/// `P_K / P_{K+U} - 1` at the highest confidence threshold whose known recall
/// reaches `recall_level`. `P_K` leaves out false positives lying on unknown
/// GT; `P_{K+U}` counts them.
pub fn wilderness_impact(entries: &[WiEntry], n_known_gt: usize, recall_level: f64) -> Result<f64> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let (mut tp, mut fp_known, mut fp_unknown) = (0usize, 0usize, 0usize);
    let mut reached = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let c = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == c {
            let e = sorted[i];
            if e.tp {
                tp += 1;
            } else if e.on_unknown {
                fp_unknown += 1;
            } else {
                fp_known += 1;
            }
            i += 1;
        }
        if n_known_gt == 0 {
            break;
        }
        reached = tp as f64 / n_known_gt as f64;
        if reached >= recall_level {
            let p_k = tp as f64 / (tp + fp_known) as f64;
            let p_ku = tp as f64 / (tp + fp_known + fp_unknown) as f64;
            return Ok(p_k / p_ku - 1.0);
        }
    }
    Err(Error::UndefinedOperatingPoint {
        target: recall_level,
        reached,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub scenes: usize,
    pub detections: usize,
    pub unknown_detections: usize,
    pub known_gt: usize,
    pub unknown_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: u32,
    pub map_prev: Option<f64>,
    pub map_curr: Option<f64>,
    pub map_both: Option<f64>,
    pub u_recall: Option<f64>,
    pub wi: Option<f64>,
    pub a_ose: u64,
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    pub counts: EvalCounts,
    pub metadata: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn report_metadata() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("ap".into(), "all-point interpolated AP at IoU 0.5, greedy matching by confidence".into()),
        ("a_ose".into(), "unknown GT claimed by known-labeled detections at IoU 0.5, greedy".into()),
        ("u_recall".into(), "unknown GT claimed by UNKNOWN detections at IoU 0.5, unknown classes pooled".into()),
        (
            "wi".into(),
            "P_K / P_KU - 1 at the highest threshold reaching known recall 0.8; P_K ignores false positives overlapping unknown GT at IoU 0.5, P_KU counts them".into(),
        ),
    ])
}

/// Named detection as read from a detections file.
#[derive(Clone, Debug, PartialEq)]
pub struct DetRecord {
    pub scene_id: String,
    pub bbox: BBox,
    /// `None` for UNKNOWN.
    pub label: Option<String>,
    pub confidence: f64,
    pub ood: f64,
}

/// Named ground truth as read from a GT file.
#[derive(Clone, Debug, PartialEq)]
pub struct GtRecord {
    pub scene_id: String,
    pub bbox: BBox,
    pub class_name: String,
}

/// Groups records by scene id and interns class names.
pub fn build_scenes(
    dets: &[DetRecord],
    gts: &[GtRecord],
    class_ids: &BTreeMap<String, usize>,
) -> Result<Vec<SceneEval>> {
    let mut by_scene: BTreeMap<&str, SceneEval> = BTreeMap::new();
    for g in gts {
        let class = *class_ids
            .get(&g.class_name)
            .ok_or_else(|| Error::UnknownClass(g.class_name.clone()))?;
        by_scene
            .entry(&g.scene_id)
            .or_insert_with(|| SceneEval {
                scene_id: g.scene_id.clone(),
                ..SceneEval::default()
            })
            .gts
            .push(EvalGt { bbox: g.bbox, class });
    }
    for d in dets {
        let class = match &d.label {
            None => None,
            Some(name) => Some(*class_ids.get(name).ok_or_else(|| Error::UnknownClass(name.clone()))?),
        };
        by_scene
            .entry(&d.scene_id)
            .or_insert_with(|| SceneEval {
                scene_id: d.scene_id.clone(),
                ..SceneEval::default()
            })
            .dets
            .push(EvalDet {
                bbox: d.bbox,
                confidence: d.confidence,
                class,
            });
    }
    Ok(by_scene.into_values().collect())
}

/// Every metric of one task. Classes known at `task_id` split into previous
/// and current tasks; all other GT classes are unknown.
pub fn evaluate_task(
    dets: &[DetRecord],
    gts: &[GtRecord],
    schedule: &TaskSchedule,
    task_id: u32,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if task_id == 0 || task_id > schedule.num_tasks() {
        return Err(Error::Config(format!("task {task_id} is not in the task split")));
    }
    let mut names: BTreeSet<String> = gts.iter().map(|g| g.class_name.clone()).collect();
    for t in schedule.tasks() {
        names.extend(t.iter().cloned());
    }
    let class_ids: BTreeMap<String, usize> = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
    for d in dets {
        if let Some(l) = &d.label {
            if !schedule.is_known_at(l, task_id) {
                return Err(Error::UnknownClass(format!("{l} (not known at task {task_id})")));
            }
        }
    }
    let scenes = build_scenes(dets, gts, &class_ids)?;
    let known = KnownSet {
        known: class_ids
            .iter()
            .filter(|(n, _)| schedule.is_known_at(n, task_id))
            .map(|(_, &i)| i)
            .collect(),
    };

    let mut per_class_ap = BTreeMap::new();
    let mut prev = Vec::new();
    let mut curr = Vec::new();
    for t in 1..=task_id {
        for name in schedule.classes_of(t) {
            let (ranked, n_gt) = class_rankings(&scenes, class_ids[name]);
            let ap = average_precision(&ranked, n_gt);
            per_class_ap.insert(name.clone(), ap);
            if t < task_id {
                prev.push(ap);
            } else {
                curr.push(ap);
            }
        }
    }
    let (entries, n_known_gt) = wi_entries(&scenes, &known);
    let wi = match wilderness_impact(&entries, n_known_gt, WI_RECALL) {
        Ok(v) => Some(v),
        Err(Error::UndefinedOperatingPoint { .. }) => None,
        Err(e) => return Err(e),
    };
    let counts = EvalCounts {
        scenes: scenes.len(),
        detections: dets.len(),
        unknown_detections: dets.iter().filter(|d| d.label.is_none()).count(),
        known_gt: n_known_gt,
        unknown_gt: scenes.iter().map(|s| unknown_gts(s, &known).len()).sum(),
    };
    Ok(EvalReport {
        task_id,
        map_prev: mean_defined(prev.iter().copied()),
        map_curr: mean_defined(curr.iter().copied()),
        map_both: mean_defined(prev.iter().chain(&curr).copied()),
        u_recall: u_recall(&scenes, &known),
        wi,
        a_ose: a_ose(&scenes, &known),
        per_class_ap,
        counts,
        metadata: report_metadata(),
        config,
    })
}

/// Renders an optional metric, `n/a` when undefined.
pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".to_string(),
    }
}

impl EvalReport {
    /// Canonical JSON with sorted keys.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        Ok(s)
    }

    pub fn csv_header() -> &'static str {
        "task,map_prev,map_curr,map_both,u_recall,wi,a_ose"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.task_id,
            opt(self.map_prev),
            opt(self.map_curr),
            opt(self.map_both),
            opt(self.u_recall),
            opt(self.wi),
            self.a_ose
        )
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "task {}: mAP prev {} curr {} both {} | U-Recall {} | WI {} | A-OSE {}",
            self.task_id,
            fmt_metric(self.map_prev),
            fmt_metric(self.map_curr),
            fmt_metric(self.map_both),
            fmt_metric(self.u_recall),
            fmt_metric(self.wi),
            self.a_ose
        );
        s
    }
}
