//! Brute-force metric oracles written independently of the library code.

use std::collections::BTreeMap;

use openworld_kit::embedding::TaskSchedule;
use openworld_kit::eval::{DetRecord, GtRecord};
use openworld_kit::geometry::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let area = |x: &BBox| (x.x2 - x.x1) * (x.y2 - x.y1);
    inter / (area(a) + area(b) - inter)
}

/// Replays greedy matching by repeated linear scans. Returns, per detection,
/// the matched GT index.
pub fn greedy(dets: &[(BBox, f64)], gts: &[BBox], eligible: impl Fn(usize, usize) -> bool) -> Vec<Option<usize>> {
    let mut done = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for _ in 0..dets.len() {
        let mut pick: Option<usize> = None;
        for d in 0..dets.len() {
            if !done[d] && pick.is_none_or(|p| dets[d].1 > dets[p].1) {
                pick = Some(d);
            }
        }
        let d = pick.expect("an unprocessed detection remains");
        done[d] = true;
        let mut best: Option<(usize, f64)> = None;
        for g in 0..gts.len() {
            if taken[g] || !eligible(d, g) {
                continue;
            }
            let v = overlap(&dets[d].0, &gts[g]);
            if v >= 0.5 && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

fn scenes(dets: &[DetRecord], gts: &[GtRecord]) -> BTreeMap<String, (Vec<DetRecord>, Vec<GtRecord>)> {
    let mut m: BTreeMap<String, (Vec<DetRecord>, Vec<GtRecord>)> = BTreeMap::new();
    for d in dets {
        m.entry(d.scene_id.clone()).or_default().0.push(d.clone());
    }
    for g in gts {
        m.entry(g.scene_id.clone()).or_default().1.push(g.clone());
    }
    m
}

/// Position of each detection when sorted by descending confidence, ties by
/// input order, computed by counting.
fn rank_in_scene(dets: &[(BBox, f64)]) -> Vec<usize> {
    (0..dets.len())
        .map(|i| {
            (0..dets.len())
                .filter(|&j| dets[j].1 > dets[i].1 || (dets[j].1 == dets[i].1 && j < i))
                .count()
        })
        .collect()
}

pub fn ap(dets: &[DetRecord], gts: &[GtRecord], class: &str) -> Option<f64> {
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for (s, (sd, sg)) in scenes(dets, gts).values().enumerate() {
        let d: Vec<(BBox, f64)> = sd
            .iter()
            .filter(|x| x.label.as_deref() == Some(class))
            .map(|x| (x.bbox, x.confidence))
            .collect();
        let g: Vec<BBox> = sg.iter().filter(|x| x.class_name == class).map(|x| x.bbox).collect();
        n_gt += g.len();
        let m = greedy(&d, &g, |_, _| true);
        let rank = rank_in_scene(&d);
        for i in 0..d.len() {
            pooled.push((d[i].1, s, rank[i], m[i].is_some()));
        }
    }
    if n_gt == 0 {
        return if pooled.is_empty() { None } else { Some(0.0) };
    }
    // selection order: confidence desc, scene, rank
    let mut order: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut left = pooled;
    while !left.is_empty() {
        let mut b = 0;
        for i in 1..left.len() {
            let (x, y) = (&left[i], &left[b]);
            if x.0 > y.0 || (x.0 == y.0 && (x.1, x.2) < (y.1, y.2)) {
                b = i;
            }
        }
        order.push(left.remove(b));
    }
    let prec = |k: usize| order[..=k].iter().filter(|x| x.3).count() as f64 / (k + 1) as f64;
    let mut sum = 0.0;
    for k in 0..order.len() {
        if order[k].3 {
            sum += (k..order.len()).map(prec).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Some(sum / n_gt as f64)
}

fn mean(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// `(map_prev, map_curr, map_both)`.
pub fn maps(dets: &[DetRecord], gts: &[GtRecord], schedule: &TaskSchedule, task: u32) -> [Option<f64>; 3] {
    let mut prev = Vec::new();
    let mut curr = Vec::new();
    for t in 1..=task {
        for c in schedule.classes_of(t) {
            let v = ap(dets, gts, c);
            if t < task {
                prev.push(v);
            } else {
                curr.push(v);
            }
        }
    }
    let both: Vec<Option<f64>> = prev.iter().chain(&curr).copied().collect();
    [mean(&prev), mean(&curr), mean(&both)]
}

fn is_unknown(schedule: &TaskSchedule, task: u32, class: &str) -> bool {
    !schedule.is_known_at(class, task)
}

/// Unknown GT claimed by detections selected by `labeled`, summed over scenes.
fn claimed(
    dets: &[DetRecord],
    gts: &[GtRecord],
    schedule: &TaskSchedule,
    task: u32,
    labeled: impl Fn(&DetRecord) -> bool,
) -> (usize, usize) {
    let (mut hit, mut total) = (0, 0);
    for (sd, sg) in scenes(dets, gts).values() {
        let d: Vec<(BBox, f64)> = sd
            .iter()
            .filter(|x| labeled(x))
            .map(|x| (x.bbox, x.confidence))
            .collect();
        let g: Vec<BBox> = sg
            .iter()
            .filter(|x| is_unknown(schedule, task, &x.class_name))
            .map(|x| x.bbox)
            .collect();
        total += g.len();
        hit += greedy(&d, &g, |_, _| true).iter().flatten().count();
    }
    (hit, total)
}

pub fn u_recall(dets: &[DetRecord], gts: &[GtRecord], schedule: &TaskSchedule, task: u32) -> Option<f64> {
    let (hit, total) = claimed(dets, gts, schedule, task, |d| d.label.is_none());
    (total > 0).then(|| hit as f64 / total as f64)
}

pub fn a_ose(dets: &[DetRecord], gts: &[GtRecord], schedule: &TaskSchedule, task: u32) -> u64 {
    claimed(dets, gts, schedule, task, |d| d.label.is_some()).0 as u64
}

/// Enumerates thresholds from the highest confidence down and rematches from
/// scratch at each one.
pub fn wi(dets: &[DetRecord], gts: &[GtRecord], schedule: &TaskSchedule, task: u32) -> Option<f64> {
    let mut thresholds: Vec<f64> = dets
        .iter()
        .filter(|d| d.label.is_some())
        .map(|d| d.confidence)
        .collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let n_known = gts
        .iter()
        .filter(|g| !is_unknown(schedule, task, &g.class_name))
        .count();
    if n_known == 0 {
        return None;
    }
    for thr in thresholds {
        let (mut tp, mut fp, mut fp_u) = (0usize, 0usize, 0usize);
        for (sd, sg) in scenes(dets, gts).values() {
            let kept: Vec<&DetRecord> = sd.iter().filter(|d| d.label.is_some() && d.confidence >= thr).collect();
            let known: Vec<&GtRecord> = sg
                .iter()
                .filter(|g| !is_unknown(schedule, task, &g.class_name))
                .collect();
            let unknown: Vec<&GtRecord> = sg
                .iter()
                .filter(|g| is_unknown(schedule, task, &g.class_name))
                .collect();
            let d: Vec<(BBox, f64)> = kept.iter().map(|x| (x.bbox, x.confidence)).collect();
            let g: Vec<BBox> = known.iter().map(|x| x.bbox).collect();
            let m = greedy(&d, &g, |di, gi| {
                kept[di].label.as_deref() == Some(known[gi].class_name.as_str())
            });
            for (i, hit) in m.iter().enumerate() {
                if hit.is_some() {
                    tp += 1;
                } else if unknown.iter().any(|u| overlap(&kept[i].bbox, &u.bbox) >= 0.5) {
                    fp_u += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp as f64 / n_known as f64 >= 0.8 {
            let p_k = tp as f64 / (tp + fp) as f64;
            let p_ku = tp as f64 / (tp + fp + fp_u) as f64;
            return Some(p_k / p_ku - 1.0);
        }
    }
    None
}

pub fn schedule() -> TaskSchedule {
    TaskSchedule::new(vec![vec!["a".into(), "b".into()], vec!["c".into()]]).unwrap()
}

/// Random instance with at most 8 detections and 6 GT boxes over two scenes,
/// on a coarse grid so overlaps and confidence ties are common.
pub fn random_instance(rng: &mut ChaCha8Rng, task: u32) -> (Vec<DetRecord>, Vec<GtRecord>) {
    let sched = schedule();
    let all = ["a", "b", "c", "u", "v"];
    let known: Vec<&str> = all.iter().copied().filter(|c| sched.is_known_at(c, task)).collect();
    let boxes = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..6) as f64 * 2.0;
        let y = rng.random_range(0..3) as f64 * 2.0;
        let w = rng.random_range(2..=4) as f64 * 2.0;
        let h = rng.random_range(2..=4) as f64 * 2.0;
        BBox::new(x, y, x + w, y + h)
    };
    let scene = |rng: &mut ChaCha8Rng| format!("s{}", rng.random_range(0..2));
    let n_gt = rng.random_range(0..=6);
    let gts: Vec<GtRecord> = (0..n_gt)
        .map(|_| GtRecord {
            scene_id: scene(rng),
            bbox: boxes(rng),
            class_name: all[rng.random_range(0..all.len())].to_string(),
        })
        .collect();
    let n_det = rng.random_range(0..=8);
    let dets = (0..n_det)
        .map(|_| {
            // most detections sit on or next to a GT box to make matches likely
            let (scene_id, bbox, near) = if !gts.is_empty() && rng.random_bool(0.7) {
                let g = &gts[rng.random_range(0..gts.len())];
                let dx = rng.random_range(0..=1) as f64 * 2.0;
                let b = BBox::new(g.bbox.x1 + dx, g.bbox.y1, g.bbox.x2 + dx, g.bbox.y2);
                (g.scene_id.clone(), b, Some(g.class_name.clone()))
            } else {
                (scene(rng), boxes(rng), None)
            };
            let label = match near {
                Some(c) if known.contains(&c.as_str()) && rng.random_bool(0.6) => Some(c),
                _ if rng.random_bool(0.3) => None,
                _ => Some(known[rng.random_range(0..known.len())].to_string()),
            };
            DetRecord {
                scene_id,
                bbox,
                label,
                confidence: rng.random_range(1..=5) as f64 / 5.0,
                ood: 0.0,
            }
        })
        .collect();
    (dets, gts)
}
