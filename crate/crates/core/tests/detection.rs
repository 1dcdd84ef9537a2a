mod common;

use common::{rng, short_run, small_world, split};
use openworld_kit::detection::{
    apply_ood_gate, classify_locations, confidence_order, decode_detections, detect_scene, nms, DetectConfig,
    Detection, GateMode, Source,
};
use openworld_kit::embedding::{EmbeddingVector, PromptLabel, PromptMatrix};
use openworld_kit::geometry::{iou, BBox};
use openworld_kit::mscal::{ood_score, ood_score_map, Mode, MscalModule};
use openworld_kit::pyramid::{Batch, BatchLayer, LayerGeometry};
use openworld_kit::world::Split;
use rand::Rng;

/// S at one location, projecting that location alone through every module.
fn score_at(modules: &[MscalModule], batch: &Batch, s: Source) -> f64 {
    let n = s.row * batch.layers[s.layer].geometry.width + s.col;
    let single = Batch {
        dim: batch.dim,
        layers: batch
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| BatchLayer {
                geometry: LayerGeometry::new(1, 1, l.geometry.stride),
                scenes: 1,
                features: l.row(if j == s.layer { n } else { 0 }, batch.dim).to_vec(),
            })
            .collect(),
    };
    let zs: Vec<Vec<f64>> = modules
        .iter()
        .map(|m| m.project(&single, Mode::Infer).unwrap().z(s.layer, 0).to_vec())
        .collect();
    let refs: Vec<&MscalModule> = modules.iter().collect();
    let z_refs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
    ood_score(&refs, &z_refs, s.layer).unwrap()
}

#[test]
fn gate_relabels_exactly_the_locations_above_theta() {
    let world = small_world(0, 24, 8, 6);
    let ck = short_run(&world, 40).remove(0);
    let prompts = ck.registry.prompt_matrix(true).unwrap();
    let modules: Vec<&MscalModule> = ck.modules.iter().collect();
    let (mut relabeled, mut enumerated, mut known) = (0, 0, 0);
    for scene in split(&world, Split::Test) {
        let scores = classify_locations(&scene.pyramid, &prompts, 10.0).unwrap();
        let dets = decode_detections(&scene.pyramid, &scores, &prompts.labels, 0.25);
        let map = ood_score_map(&modules, &scene.pyramid).unwrap();
        let gated = apply_ood_gate(dets.clone(), &map, ck.theta, GateMode::Relabel).unwrap();
        let batch = Batch::from_pyramid(&scene.pyramid);
        assert_eq!(gated.len(), dets.len());
        for (before, after) in dets.iter().zip(&gated) {
            assert_eq!(before.bbox, after.bbox);
            assert_eq!(before.confidence, after.confidence);
            if before.label == PromptLabel::Unknown {
                assert_eq!(after.label, PromptLabel::Unknown);
                continue;
            }
            known += 1;
            relabeled += usize::from(after.label == PromptLabel::Unknown);
            enumerated += usize::from(score_at(&ck.modules, &batch, before.source) > ck.theta);
        }
    }
    assert_eq!(relabeled, enumerated);
    assert!(relabeled > 0 && relabeled < known, "{relabeled} of {known}");
}

fn det(bbox: BBox, label: PromptLabel, confidence: f64, col: usize) -> Detection {
    Detection {
        bbox,
        label,
        confidence,
        source: Source { layer: 0, row: 0, col },
        ood: 0.0,
    }
}

/// The greedy output is the unique subset where a detection is kept iff no
/// kept detection ranked above it suppresses it. Found by trying every subset.
fn exhaustive_nms(dets: &[Detection], thr: f64, class_wise: bool) -> Vec<Detection> {
    let n = dets.len();
    let above = |i: usize, j: usize| confidence_order(&dets[i], &dets[j]).then(i.cmp(&j)).is_lt();
    let suppresses = |k: usize, d: usize| {
        (!class_wise || dets[k].label == dets[d].label) && iou(&dets[k].bbox, &dets[d].bbox) >= thr
    };
    let mut consistent = Vec::new();
    for mask in 0u32..1 << n {
        let kept = |i: usize| mask >> i & 1 == 1;
        let ok = (0..n).all(|d| {
            let blocked = (0..n).any(|k| k != d && kept(k) && above(k, d) && suppresses(k, d));
            kept(d) != blocked
        });
        if ok {
            consistent.push(mask);
        }
    }
    assert_eq!(consistent.len(), 1);
    let mask = consistent[0];
    let mut out: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
    out.sort_by(|&a, &b| confidence_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    out.into_iter().map(|i| dets[i].clone()).collect()
}

fn random_dets(seed: u64, n: usize) -> Vec<Detection> {
    let mut r = rng(seed);
    let labels = [PromptLabel::Known(0), PromptLabel::Known(1), PromptLabel::Unknown];
    (0..n)
        .map(|i| {
            let x = f64::from(r.random_range(0..8u32));
            let y = f64::from(r.random_range(0..8u32));
            let w = f64::from(r.random_range(4..12u32));
            let h = f64::from(r.random_range(4..12u32));
            let conf = f64::from(r.random_range(1..=10u32)) / 10.0;
            det(BBox::new(x, y, x + w, y + h), labels[r.random_range(0..3)], conf, i)
        })
        .collect()
}

#[test]
fn nms_matches_exhaustive_subset_oracle() {
    let mut suppressed = 0;
    for seed in 0..200 {
        let dets = random_dets(seed, 5);
        for class_wise in [true, false] {
            for thr in [0.3, 0.5, 0.7] {
                let got = nms(&dets, thr, class_wise);
                assert_eq!(got, exhaustive_nms(&dets, thr, class_wise), "seed {seed}");
                suppressed += dets.len() - got.len();
                for w in got.windows(2) {
                    assert!(w[0].confidence >= w[1].confidence);
                }
                for (i, a) in got.iter().enumerate() {
                    assert!(dets.contains(a));
                    for b in &got[i + 1..] {
                        if !class_wise || a.label == b.label {
                            assert!(iou(&a.bbox, &b.bbox) < thr);
                        }
                    }
                }
            }
        }
    }
    assert!(suppressed > 100);
}

fn scaled(prompts: &PromptMatrix, factors: &[f64]) -> PromptMatrix {
    PromptMatrix {
        rows: prompts
            .rows
            .iter()
            .zip(factors)
            .map(|(r, c)| EmbeddingVector::new(r.as_slice().iter().map(|v| v * c).collect()).unwrap())
            .collect(),
        labels: prompts.labels.clone(),
    }
}

#[test]
fn scene_detections_ignore_prompt_scale_and_repeat_exactly() {
    let world = small_world(2, 8, 4, 4);
    let ck = short_run(&world, 5).remove(0);
    let prompts = ck.registry.prompt_matrix(true).unwrap();
    let modules: Vec<&MscalModule> = ck.modules.iter().collect();
    let config = DetectConfig::default();
    let mut r = rng(9);
    for scene in split(&world, Split::Test) {
        let map = ood_score_map(&modules, &scene.pyramid).unwrap();
        let base = detect_scene(&scene.pyramid, &prompts, &map, ck.theta, &config).unwrap();
        assert_eq!(
            base,
            detect_scene(&scene.pyramid, &prompts, &map, ck.theta, &config).unwrap()
        );
        // powers of two keep every normalized row bit-identical
        let factors: Vec<f64> = (0..prompts.len()).map(|_| 2f64.powi(r.random_range(-6..6))).collect();
        let other = detect_scene(&scene.pyramid, &scaled(&prompts, &factors), &map, ck.theta, &config).unwrap();
        assert_eq!(base, other);
        let factors: Vec<f64> = (0..prompts.len()).map(|_| r.random_range(0.1..10.0)).collect();
        let other = detect_scene(&scene.pyramid, &scaled(&prompts, &factors), &map, ck.theta, &config).unwrap();
        assert_eq!(base.len(), other.len());
        for (a, b) in base.iter().zip(&other) {
            assert_eq!((a.bbox, a.label, a.source), (b.bbox, b.label, b.source));
            assert!((a.confidence - b.confidence).abs() <= 1e-12);
        }
    }
}

#[test]
fn gate_extremes_on_a_generated_scene() {
    let world = small_world(3, 8, 4, 2);
    let ck = short_run(&world, 5).remove(0);
    let prompts = ck.registry.prompt_matrix(true).unwrap();
    let modules: Vec<&MscalModule> = ck.modules.iter().collect();
    let scene = &split(&world, Split::Test)[0];
    let scores = classify_locations(&scene.pyramid, &prompts, 10.0).unwrap();
    let dets = decode_detections(&scene.pyramid, &scores, &prompts.labels, 0.25);
    let map = ood_score_map(&modules, &scene.pyramid).unwrap();
    let open = apply_ood_gate(dets.clone(), &map, f64::INFINITY, GateMode::Relabel).unwrap();
    for (a, b) in dets.iter().zip(&open) {
        assert_eq!((a.bbox, a.label, a.confidence), (b.bbox, b.label, b.confidence));
        assert_eq!(Some(b.ood), map.get(b.source.layer, b.source.row, b.source.col));
    }
    let shut = apply_ood_gate(dets.clone(), &map, f64::NEG_INFINITY, GateMode::Relabel).unwrap();
    assert!(shut.iter().all(|d| d.label == PromptLabel::Unknown));
    let dropped = apply_ood_gate(dets.clone(), &map, f64::NEG_INFINITY, GateMode::Suppress).unwrap();
    assert_eq!(
        dropped.len(),
        dets.iter().filter(|d| d.label == PromptLabel::Unknown).count()
    );
}
