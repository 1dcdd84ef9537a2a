//! Cosine-similarity detection head, OOD gate and NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::{PromptLabel, PromptMatrix, ZERO_NORM};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::mscal::OodScoreMap;
use crate::pyramid::FeaturePyramid;

pub const DEFAULT_LOGIT_SCALE: f64 = 10.0;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pyramid location a detection came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Source {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub label: PromptLabel,
    pub confidence: f64,
    pub source: Source,
    pub ood: f64,
}

/// Per-layer confidences, `scores[layer][cell * rows + r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub rows: usize,
    pub layers: Vec<Vec<f64>>,
}

impl ClassScores {
    pub fn at(&self, layer: usize, cell: usize) -> &[f64] {
        &self.layers[layer][cell * self.rows..(cell + 1) * self.rows]
    }
}

fn unit_rows(prompts: &PromptMatrix) -> Result<Vec<Vec<f64>>> {
    prompts
        .rows
        .iter()
        .map(|r| {
            let n = r.norm();
            if n < ZERO_NORM {
                Err(Error::ZeroVector)
            } else {
                Ok(r.as_slice().iter().map(|v| v / n).collect())
            }
        })
        .collect()
}

/// `sigmoid(logit_scale * cos(w_c, f))` for every location and prompt row.
pub fn classify_locations(pyramid: &FeaturePyramid, prompts: &PromptMatrix, logit_scale: f64) -> Result<ClassScores> {
    if logit_scale.is_nan() || logit_scale <= 0.0 {
        return Err(Error::Config("logit_scale must be positive".into()));
    }
    let dim = pyramid.dim();
    if prompts.rows.iter().any(|r| r.dim() != dim) {
        return Err(Error::ShapeMismatch("prompt and feature dimensions differ".into()));
    }
    let rows = unit_rows(prompts)?;
    let mut layers = Vec::with_capacity(pyramid.layers().len());
    for layer in pyramid.layers() {
        let cells = layer.geometry.len();
        let mut out = Vec::with_capacity(cells * rows.len());
        for cell in 0..cells {
            let f: Vec<f64> = layer.feature(cell, dim).iter().map(|&v| f64::from(v)).collect();
            let n = crate::embedding::norm(&f);
            if n < ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            for w in &rows {
                let cos = crate::embedding::dot(w, &f) / n;
                out.push(sigmoid(logit_scale * cos));
            }
        }
        layers.push(out);
    }
    Ok(ClassScores {
        rows: rows.len(),
        layers,
    })
}

/// One detection per location whose best confidence reaches the threshold.
/// Ties go to the lower row index.
pub fn decode_detections(
    pyramid: &FeaturePyramid,
    scores: &ClassScores,
    labels: &[PromptLabel],
    conf_threshold: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (j, layer) in pyramid.layers().iter().enumerate() {
        let g = layer.geometry;
        for cell in 0..g.len() {
            let s = scores.at(j, cell);
            let mut best = 0;
            for (r, &v) in s.iter().enumerate().skip(1) {
                if v > s[best] {
                    best = r;
                }
            }
            if s.is_empty() || s[best] < conf_threshold {
                continue;
            }
            out.push(Detection {
                bbox: layer.bbox(cell),
                label: labels[best],
                confidence: s[best],
                source: Source {
                    layer: j,
                    row: cell / g.width,
                    col: cell % g.width,
                },
                ood: 0.0,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Gated detections become UNKNOWN with their confidence kept.
    #[default]
    Relabel,
    /// Gated detections are dropped.
    Suppress,
}

/// Fills `ood` from the score map and relabels known detections scoring
/// above `theta` as UNKNOWN.
pub fn apply_ood_gate(
    dets: Vec<Detection>,
    ood_map: &OodScoreMap,
    theta: f64,
    mode: GateMode,
) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(dets.len());
    for mut d in dets {
        let s = d.source;
        d.ood = ood_map
            .get(s.layer, s.row, s.col)
            .ok_or(Error::SourceOutOfRange((s.layer, s.row, s.col)))?;
        if matches!(d.label, PromptLabel::Known(_)) && d.ood > theta {
            match mode {
                GateMode::Relabel => d.label = PromptLabel::Unknown,
                GateMode::Suppress => continue,
            }
        }
        out.push(d);
    }
    Ok(out)
}

/// Descending confidence, ties by earlier source.
pub fn confidence_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.source.cmp(&b.source))
}

/// Greedy non-maximum suppression.
pub fn nms(dets: &[Detection], iou_threshold: f64, class_wise: bool) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| confidence_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| (!class_wise || k.label == d.label) && iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub logit_scale: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub class_wise_nms: bool,
    pub gate: GateMode,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            logit_scale: DEFAULT_LOGIT_SCALE,
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            class_wise_nms: true,
            gate: GateMode::Relabel,
        }
    }
}

/// Full per-scene inference: classify, decode, gate, NMS.
pub fn detect_scene(
    pyramid: &FeaturePyramid,
    prompts: &PromptMatrix,
    ood_map: &OodScoreMap,
    theta: f64,
    config: &DetectConfig,
) -> Result<Vec<Detection>> {
    let scores = classify_locations(pyramid, prompts, config.logit_scale)?;
    let dets = decode_detections(pyramid, &scores, &prompts.labels, config.conf_threshold);
    let gated = apply_ood_gate(dets, ood_map, theta, config.gate)?;
    Ok(nms(&gated, config.nms_iou, config.class_wise_nms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;
    use crate::mscal::OodLayer;
    use crate::pyramid::{LayerGeometry, PyramidLayer};

    fn pyramid(features: Vec<[f32; 2]>) -> FeaturePyramid {
        let g = LayerGeometry::new(1, features.len(), 8);
        let boxes = (0..features.len())
            .map(|i| [i as f32 * 8.0, 0.0, i as f32 * 8.0 + 8.0, 8.0])
            .collect();
        let flat = features.into_iter().flatten().collect();
        FeaturePyramid::new(2, vec![PyramidLayer::new(g, 2, flat, boxes).unwrap()]).unwrap()
    }

    fn prompts(rows: Vec<[f64; 2]>, unknown_last: bool) -> PromptMatrix {
        let n = rows.len();
        PromptMatrix {
            rows: rows
                .into_iter()
                .map(|r| EmbeddingVector::new(r.to_vec()).unwrap())
                .collect(),
            labels: (0..n)
                .map(|i| {
                    if unknown_last && i == n - 1 {
                        PromptLabel::Unknown
                    } else {
                        PromptLabel::Known(i)
                    }
                })
                .collect(),
        }
    }

    fn det(x: f64, label: PromptLabel, confidence: f64, col: usize) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            label,
            confidence,
            source: Source { layer: 0, row: 0, col },
            ood: 0.0,
        }
    }

    #[test]
    fn parallel_and_orthogonal_confidences() {
        let p = pyramid(vec![[1.0, 0.0], [0.0, 1.0]]);
        let s = classify_locations(&p, &prompts(vec![[2.0, 0.0]], false), 10.0).unwrap();
        assert!((s.at(0, 0)[0] - sigmoid(10.0)).abs() < 1e-15);
        assert_eq!(s.at(0, 1)[0], 0.5);
    }

    #[test]
    fn prompt_scaling_is_invisible() {
        let p = pyramid(vec![[0.6, 0.8], [0.8, -0.6]]);
        let a = classify_locations(&p, &prompts(vec![[1.0, 0.2], [-0.3, 1.0]], false), 10.0).unwrap();
        let b = classify_locations(&p, &prompts(vec![[5.0, 1.0], [-0.3, 1.0]], false), 10.0).unwrap();
        for (x, y) in a.layers[0].iter().zip(&b.layers[0]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_prompt_row_rejected() {
        let p = pyramid(vec![[1.0, 0.0]]);
        let m = PromptMatrix {
            rows: vec![EmbeddingVector::zeros(2)],
            labels: vec![PromptLabel::Known(0)],
        };
        assert!(matches!(classify_locations(&p, &m, 10.0), Err(Error::ZeroVector)));
    }

    #[test]
    fn decode_threshold_unknown_and_ties() {
        let p = pyramid(vec![[1.0, 0.0]]);
        let m = prompts(vec![[0.0, 1.0], [1.0, 0.0]], true);
        let s = classify_locations(&p, &m, 10.0).unwrap();
        let d = decode_detections(&p, &s, &m.labels, 0.25);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label, PromptLabel::Unknown);
        assert!(decode_detections(&p, &s, &m.labels, 0.9999999).is_empty());

        let tie = prompts(vec![[1.0, 1.0], [1.0, 1.0]], false);
        let s = classify_locations(&p, &tie, 10.0).unwrap();
        assert_eq!(
            decode_detections(&p, &s, &tie.labels, 0.0)[0].label,
            PromptLabel::Known(0)
        );
    }

    fn flat_map(scores: Vec<f64>) -> OodScoreMap {
        OodScoreMap {
            layers: vec![OodLayer {
                geometry: LayerGeometry::new(1, scores.len(), 8),
                scores,
            }],
        }
    }

    #[test]
    fn gate_extremes() {
        let dets = vec![
            det(0.0, PromptLabel::Known(0), 0.9, 0),
            det(20.0, PromptLabel::Unknown, 0.8, 1),
        ];
        let map = flat_map(vec![-0.5, 0.3]);
        let open = apply_ood_gate(dets.clone(), &map, f64::INFINITY, GateMode::Relabel).unwrap();
        assert_eq!(open[0].label, PromptLabel::Known(0));
        assert_eq!(open[0].ood, -0.5);
        assert_eq!(open[1].ood, 0.3);
        let shut = apply_ood_gate(dets.clone(), &map, f64::NEG_INFINITY, GateMode::Relabel).unwrap();
        assert!(shut.iter().all(|d| d.label == PromptLabel::Unknown));
        assert_eq!(shut[0].confidence, 0.9);
        let dropped = apply_ood_gate(dets.clone(), &map, f64::NEG_INFINITY, GateMode::Suppress).unwrap();
        assert_eq!(dropped.len(), 1);
        let bad = flat_map(vec![0.0]);
        assert!(matches!(
            apply_ood_gate(dets, &bad, 0.0, GateMode::Relabel),
            Err(Error::SourceOutOfRange((0, 0, 1)))
        ));
    }

    #[test]
    fn nms_examples() {
        let a = det(0.0, PromptLabel::Known(0), 0.9, 0);
        let b = det(0.0, PromptLabel::Known(0), 0.8, 1);
        let kept = nms(&[b.clone(), a.clone()], 0.7, true);
        assert_eq!(kept, vec![a.clone()]);
        let c = det(0.0, PromptLabel::Known(1), 0.8, 1);
        assert_eq!(nms(&[a.clone(), c.clone()], 0.7, true).len(), 2);
        assert_eq!(nms(&[a, c], 0.7, false).len(), 1);
    }
}
