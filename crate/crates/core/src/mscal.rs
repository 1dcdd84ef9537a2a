//! Multi-scale contrastive anchor learning.
//!
//! Each known class owns an [`MscalModule`]: per pyramid layer, a projector
//! `affine -> batchnorm -> ReLU -> affine -> L2-normalize` and an anchor. The
//! per-class contrastive loss pulls the class's locations toward its anchors
//! at every scale and pushes other classes and background away. At inference
//! the negated best anchor similarity over all classes is the OOD score.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, ZERO_NORM};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::pyramid::{Batch, FeaturePyramid, LayerGeometry};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_NEG_CAP: usize = 10;
pub const DEFAULT_QUANTILE: f64 = 0.95;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batchnorm uses statistics of the current batch.
    Train,
    /// Batchnorm uses running statistics.
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MscalOptions {
    pub tau: f64,
    /// L2-normalize projections and anchors before the inner product.
    pub normalize: bool,
    /// One anchor for all layers instead of one per layer.
    pub share_anchors: bool,
    pub bn_momentum: f64,
}

impl Default for MscalOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            normalize: true,
            share_anchors: false,
            bn_momentum: BN_MOMENTUM,
        }
    }
}

/// Projector of one pyramid layer. Matrices are row-major: `w1[i * hidden + h]`,
/// `w2[h * out + o]`. The first affine map has no bias: batchnorm removes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorLayer {
    pub w1: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MscalModule {
    pub version: u32,
    pub class_id: usize,
    pub class_name: String,
    pub task_id: u32,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub layers: Vec<ProjectorLayer>,
    /// One anchor per layer, or a single shared anchor.
    pub anchors: Vec<Vec<f64>>,
    pub options: MscalOptions,
    pub frozen: bool,
}

impl MscalModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        class_id: usize,
        class_name: impl Into<String>,
        task_id: u32,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        num_layers: usize,
        options: MscalOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if out_dim > in_dim || out_dim == 0 || hidden_dim == 0 || num_layers == 0 {
            return Err(Error::ShapeMismatch(format!(
                "invalid projector shape {in_dim}->{hidden_dim}->{out_dim} over {num_layers} layers"
            )));
        }
        if options.tau.is_nan() || options.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        let w1_dist = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("valid std");
        let w2_dist = Normal::new(0.0, (1.0 / hidden_dim as f64).sqrt()).expect("valid std");
        // nonzero output bias keeps rows with every hidden unit inactive off the origin
        let b2_dist = Normal::new(0.0, 0.1).expect("valid std");
        let layers = (0..num_layers)
            .map(|_| ProjectorLayer {
                w1: (0..in_dim * hidden_dim).map(|_| w1_dist.sample(rng)).collect(),
                bn_gamma: vec![1.0; hidden_dim],
                bn_beta: vec![0.0; hidden_dim],
                running_mean: vec![0.0; hidden_dim],
                running_var: vec![1.0; hidden_dim],
                w2: (0..hidden_dim * out_dim).map(|_| w2_dist.sample(rng)).collect(),
                b2: (0..out_dim).map(|_| b2_dist.sample(rng)).collect(),
            })
            .collect();
        let n_anchors = if options.share_anchors { 1 } else { num_layers };
        let unit = Normal::new(0.0, 1.0).expect("valid std");
        let anchors = (0..n_anchors)
            .map(|_| loop {
                let v: Vec<f64> = (0..out_dim).map(|_| unit.sample(rng)).collect();
                let n = norm(&v);
                if n > 1e-6 {
                    break v.into_iter().map(|x| x / n).collect();
                }
            })
            .collect();
        Ok(Self {
            version: CHECKPOINT_VERSION,
            class_id,
            class_name: class_name.into(),
            task_id,
            in_dim,
            hidden_dim,
            out_dim,
            layers,
            anchors,
            options,
            frozen: false,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn anchor_index(&self, layer: usize) -> usize {
        if self.options.share_anchors {
            0
        } else {
            layer
        }
    }

    /// Anchor of `layer` as used in the inner product.
    pub fn effective_anchor(&self, layer: usize) -> Vec<f64> {
        let a = &self.anchors[self.anchor_index(layer)];
        if self.options.normalize {
            let n = norm(a);
            a.iter().map(|v| v / n).collect()
        } else {
            a.clone()
        }
    }

    /// Rescales every anchor to unit length.
    pub fn renormalize_anchors(&mut self) {
        for a in &mut self.anchors {
            let n = norm(a);
            if n > ZERO_NORM {
                a.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.num_layers() != self.num_layers() || batch.dim != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "module for `{}` expects {} layers of D={}, got {} layers of D={}",
                self.class_name,
                self.num_layers(),
                self.in_dim,
                batch.num_layers(),
                batch.dim
            )));
        }
        Ok(())
    }

    /// Maps every location of `batch` into the class representation space.
    pub fn project(&self, batch: &Batch, mode: Mode) -> Result<Projection> {
        self.check_batch(batch)?;
        let (din, dh, dz) = (self.in_dim, self.hidden_dim, self.out_dim);
        let mut layers = Vec::with_capacity(self.num_layers());
        for (j, (params, bl)) in self.layers.iter().zip(&batch.layers).enumerate() {
            let m = bl.rows();
            let mut pre = vec![0.0; m * dh];
            for n in 0..m {
                let x = bl.row(n, din);
                let out = &mut pre[n * dh..(n + 1) * dh];
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let wrow = &params.w1[i * dh..(i + 1) * dh];
                    for (o, w) in out.iter_mut().zip(wrow) {
                        *o += xi * w;
                    }
                }
            }
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; dh];
                    for n in 0..m {
                        for (mu, a) in mean.iter_mut().zip(&pre[n * dh..(n + 1) * dh]) {
                            *mu += a;
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m as f64);
                    let mut var = vec![0.0; dh];
                    for n in 0..m {
                        for ((v, a), mu) in var.iter_mut().zip(&pre[n * dh..(n + 1) * dh]).zip(&mean) {
                            *v += (a - mu) * (a - mu);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m as f64);
                    (mean, var)
                }
                Mode::Infer => (params.running_mean.clone(), params.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut a_hat = pre;
            let mut hidden = vec![0.0; m * dh];
            for n in 0..m {
                for h in 0..dh {
                    let k = n * dh + h;
                    a_hat[k] = (a_hat[k] - mean[h]) * inv_std[h];
                    hidden[k] = params.bn_gamma[h] * a_hat[k] + params.bn_beta[h];
                }
            }
            let mut y = vec![0.0; m * dz];
            for n in 0..m {
                let out = &mut y[n * dz..(n + 1) * dz];
                out.copy_from_slice(&params.b2);
                for h in 0..dh {
                    let r = hidden[n * dh + h];
                    if r <= 0.0 {
                        continue;
                    }
                    for (o, w) in out.iter_mut().zip(&params.w2[h * dz..(h + 1) * dz]) {
                        *o += r * w;
                    }
                }
            }
            let mut y_norm = vec![1.0; m];
            let mut z = y.clone();
            if self.options.normalize {
                for n in 0..m {
                    let row = &mut z[n * dz..(n + 1) * dz];
                    let l = norm(row);
                    if l < ZERO_NORM {
                        return Err(Error::DegenerateProjection { layer: j, index: n });
                    }
                    y_norm[n] = l;
                    row.iter_mut().for_each(|v| *v /= l);
                }
            }
            layers.push(LayerTrace {
                rows: m,
                mode,
                batch_mean: mean,
                batch_var: var,
                inv_std,
                a_hat,
                hidden,
                y_norm,
                z,
            });
        }
        Ok(Projection {
            out_dim: dz,
            hidden_dim: dh,
            layers,
        })
    }

    /// Folds the batch statistics of a train-mode projection into the running
    /// statistics. Frozen modules are left untouched.
    pub fn update_running_stats(&mut self, projection: &Projection) {
        if self.frozen {
            return;
        }
        let momentum = self.options.bn_momentum;
        for (params, trace) in self.layers.iter_mut().zip(&projection.layers) {
            if trace.mode != Mode::Train {
                continue;
            }
            let m = trace.rows as f64;
            let unbias = if trace.rows > 1 { m / (m - 1.0) } else { 1.0 };
            for h in 0..params.running_mean.len() {
                params.running_mean[h] = (1.0 - momentum) * params.running_mean[h] + momentum * trace.batch_mean[h];
                params.running_var[h] =
                    (1.0 - momentum) * params.running_var[h] + momentum * trace.batch_var[h] * unbias;
            }
        }
    }

    /// Every trainable value, in a fixed order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.w1);
            out.extend_from_slice(&l.bn_gamma);
            out.extend_from_slice(&l.bn_beta);
            out.extend_from_slice(&l.w2);
            out.extend_from_slice(&l.b2);
        }
        for a in &self.anchors {
            out.extend_from_slice(a);
        }
        out
    }

    /// Multiplies both affine maps and the output bias by `s`.
    pub fn scale_weights(&mut self, s: f64) {
        for l in &mut self.layers {
            for v in l.w1.iter_mut().chain(&mut l.w2).chain(&mut l.b2) {
                *v *= s;
            }
        }
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        let mut fill = |dst: &mut Vec<f64>| dst.iter_mut().for_each(|v| *v = it.next().expect("length"));
        for l in &mut self.layers {
            fill(&mut l.w1);
            fill(&mut l.bn_gamma);
            fill(&mut l.bn_beta);
            fill(&mut l.w2);
            fill(&mut l.b2);
        }
        for a in &mut self.anchors {
            fill(a);
        }
    }

    /// Visits `(key, parameter, gradient)` triples in the flat order.
    pub fn zip_params_mut(&mut self, grads: &MscalGrads, mut f: impl FnMut(String, &mut [f64], &[f64])) -> Result<()> {
        if grads.layers.len() != self.layers.len() || grads.anchors.len() != self.anchors.len() {
            return Err(Error::ShapeMismatch("gradient layout differs from module".into()));
        }
        let name = self.class_name.clone();
        for (j, (p, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            for (key, dst, src) in [
                ("w1", &mut p.w1, &g.w1),
                ("bn_gamma", &mut p.bn_gamma, &g.bn_gamma),
                ("bn_beta", &mut p.bn_beta, &g.bn_beta),
                ("w2", &mut p.w2, &g.w2),
                ("b2", &mut p.b2, &g.b2),
            ] {
                if dst.len() != src.len() {
                    return Err(Error::ShapeMismatch(format!("{key} of layer {j}")));
                }
                f(format!("mscal/{name}/{j}/{key}"), dst, src);
            }
        }
        for (j, (a, g)) in self.anchors.iter_mut().zip(&grads.anchors).enumerate() {
            if a.len() != g.len() {
                return Err(Error::ShapeMismatch(format!("anchor {j}")));
            }
            f(format!("mscal/{name}/anchor/{j}"), a, g);
        }
        Ok(())
    }
}

/// Intermediate values of one layer's projection, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub rows: usize,
    pub mode: Mode,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    inv_std: Vec<f64>,
    a_hat: Vec<f64>,
    hidden: Vec<f64>,
    y_norm: Vec<f64>,
    z: Vec<f64>,
}

impl LayerTrace {
    pub fn z(&self, n: usize, dz: usize) -> &[f64] {
        &self.z[n * dz..(n + 1) * dz]
    }
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub out_dim: usize,
    pub hidden_dim: usize,
    pub layers: Vec<LayerTrace>,
}

impl Projection {
    pub fn z(&self, layer: usize, n: usize) -> &[f64] {
        self.layers[layer].z(n, self.out_dim)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerGrads {
    pub w1: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MscalGrads {
    pub layers: Vec<LayerGrads>,
    pub anchors: Vec<Vec<f64>>,
}

impl MscalGrads {
    pub fn zeros_like(module: &MscalModule) -> Self {
        Self {
            layers: module
                .layers
                .iter()
                .map(|l| LayerGrads {
                    w1: vec![0.0; l.w1.len()],
                    bn_gamma: vec![0.0; l.bn_gamma.len()],
                    bn_beta: vec![0.0; l.bn_beta.len()],
                    w2: vec![0.0; l.w2.len()],
                    b2: vec![0.0; l.b2.len()],
                })
                .collect(),
            anchors: module.anchors.iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }

    /// Same order as [`MscalModule::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.w1);
            out.extend_from_slice(&l.bn_gamma);
            out.extend_from_slice(&l.bn_beta);
            out.extend_from_slice(&l.w2);
            out.extend_from_slice(&l.b2);
        }
        for a in &self.anchors {
            out.extend_from_slice(a);
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for v in [&mut l.w1, &mut l.bn_gamma, &mut l.bn_beta, &mut l.w2, &mut l.b2] {
                v.iter_mut().for_each(|x| *x *= s);
            }
        }
        for a in &mut self.anchors {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.flatten())
    }
}

/// Positive and negative rows of one layer of a batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerSamples {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleAssignment {
    pub layers: Vec<LayerSamples>,
}

impl SampleAssignment {
    pub fn num_positives(&self) -> usize {
        self.layers.iter().map(|l| l.positives.len()).sum()
    }

    pub fn num_negatives(&self) -> usize {
        self.layers.iter().map(|l| l.negatives.len()).sum()
    }
}

/// A labeled ground-truth box, with the class given as a registry index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Maps box sizes to pyramid levels: level `j` owns boxes whose longer side
/// lies in `[bounds[j], bounds[j + 1])`, the last level is open-ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRule {
    pub bounds: Vec<f64>,
}

impl LevelRule {
    pub fn new(bounds: Vec<f64>) -> Result<Self> {
        if bounds.is_empty() || bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "level bounds must be non-empty and strictly increasing".into(),
            ));
        }
        Ok(Self { bounds })
    }

    pub fn level_of(&self, b: &BBox) -> Option<usize> {
        let side = b.max_side();
        if side < self.bounds[0] {
            return None;
        }
        Some(
            self.bounds
                .iter()
                .rposition(|&lo| side >= lo)
                .expect("side >= first bound"),
        )
    }
}

/// Classes owning each batch row: `labels[layer][row]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellLabels {
    pub layers: Vec<Vec<Vec<usize>>>,
}

impl CellLabels {
    /// Labels the rows of a batch built from scenes with the given boxes.
    pub fn new(geometry: &[LayerGeometry], scene_gts: &[Vec<GtBox>], rule: &LevelRule) -> Self {
        let mut layers: Vec<Vec<Vec<usize>>> = geometry
            .iter()
            .map(|g| vec![Vec::new(); g.len() * scene_gts.len()])
            .collect();
        for (s, gts) in scene_gts.iter().enumerate() {
            for gt in gts {
                let Some(j) = rule.level_of(&gt.bbox) else { continue };
                let Some(g) = geometry.get(j) else { continue };
                for cell in g.cells_in(&gt.bbox) {
                    let owners = &mut layers[j][s * g.len() + cell];
                    if !owners.contains(&gt.class_id) {
                        owners.push(gt.class_id);
                        owners.sort_unstable();
                    }
                }
            }
        }
        Self { layers }
    }

    pub fn is_positive(&self, layer: usize, row: usize, class_id: usize) -> bool {
        self.layers[layer][row].contains(&class_id)
    }
}

/// Positives of `class_id`, all locations of other labeled classes as
/// negatives, and uniformly sampled background filling the remaining budget
/// of `neg_cap * max(1, positives)`.
pub fn assign_from_labels<R: Rng>(
    labels: &CellLabels,
    class_id: usize,
    neg_cap: usize,
    rng: &mut R,
) -> SampleAssignment {
    let mut layers: Vec<LayerSamples> = Vec::with_capacity(labels.layers.len());
    let mut class_neg: Vec<(usize, usize)> = Vec::new();
    let mut background: Vec<(usize, usize)> = Vec::new();
    for (j, rows) in labels.layers.iter().enumerate() {
        let mut ls = LayerSamples::default();
        for (n, owners) in rows.iter().enumerate() {
            if owners.contains(&class_id) {
                ls.positives.push(n);
            } else if owners.is_empty() {
                background.push((j, n));
            } else {
                class_neg.push((j, n));
            }
        }
        layers.push(ls);
    }
    let positives: usize = layers.iter().map(|l| l.positives.len()).sum();
    let budget = neg_cap * positives.max(1);
    let mut chosen: Vec<(usize, usize)> = if class_neg.len() > budget {
        let mut pick = index::sample(rng, class_neg.len(), budget).into_vec();
        pick.sort_unstable();
        pick.into_iter().map(|k| class_neg[k]).collect()
    } else {
        let room = (budget - class_neg.len()).min(background.len());
        let mut pick = index::sample(rng, background.len(), room).into_vec();
        pick.sort_unstable();
        let mut out = class_neg;
        out.extend(pick.into_iter().map(|k| background[k]));
        out
    };
    chosen.sort_unstable();
    for (j, n) in chosen {
        layers[j].negatives.push(n);
    }
    SampleAssignment { layers }
}

/// Sample assignment of one class over a batch of scenes.
pub fn assign_samples<R: Rng>(
    geometry: &[LayerGeometry],
    scene_gts: &[Vec<GtBox>],
    class_id: usize,
    neg_cap: usize,
    rule: &LevelRule,
    rng: &mut R,
) -> SampleAssignment {
    assign_from_labels(&CellLabels::new(geometry, scene_gts, rule), class_id, neg_cap, rng)
}

struct Logits {
    /// `(layer, row, is_positive, logit)` for every sample.
    samples: Vec<(usize, usize, bool, f64)>,
    positives: usize,
    log_denominator: f64,
}

fn logits(module: &MscalModule, projection: &Projection, assignment: &SampleAssignment) -> Result<Logits> {
    if assignment.layers.len() != projection.layers.len() {
        return Err(Error::ShapeMismatch(
            "assignment and projection layer counts differ".into(),
        ));
    }
    let tau = module.options.tau;
    let mut samples = Vec::new();
    for (j, ls) in assignment.layers.iter().enumerate() {
        let anchor = module.effective_anchor(j);
        let rows = projection.layers[j].rows;
        for (&n, pos) in ls
            .positives
            .iter()
            .map(|n| (n, true))
            .chain(ls.negatives.iter().map(|n| (n, false)))
        {
            if n >= rows {
                return Err(Error::ShapeMismatch(format!("sample row {n} beyond {rows}")));
            }
            samples.push((j, n, pos, dot(&anchor, projection.z(j, n)) / tau));
        }
    }
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let positives = samples.iter().filter(|s| s.2).count();
    if positives == 0 {
        return Err(Error::NoSamples);
    }
    let max = samples.iter().map(|s| s.3).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = samples.iter().map(|s| (s.3 - max).exp()).sum();
    Ok(Logits {
        samples,
        positives,
        log_denominator: max + sum.ln(),
    })
}

/// Contrastive anchor loss of one class over a projected batch.
pub fn mscal_loss(module: &MscalModule, projection: &Projection, assignment: &SampleAssignment) -> Result<f64> {
    let lg = logits(module, projection, assignment)?;
    let pos_sum: f64 = lg.samples.iter().filter(|s| s.2).map(|s| s.3).sum();
    Ok(lg.log_denominator - pos_sum / lg.positives as f64)
}

/// Loss and its gradient with respect to every parameter of `module`,
/// backpropagated through normalization, the projector and batchnorm (batch
/// statistics in train mode).
pub fn mscal_loss_gradients(
    module: &MscalModule,
    batch: &Batch,
    projection: &Projection,
    assignment: &SampleAssignment,
) -> Result<(f64, MscalGrads)> {
    module.check_batch(batch)?;
    let lg = logits(module, projection, assignment)?;
    let pos_sum: f64 = lg.samples.iter().filter(|s| s.2).map(|s| s.3).sum();
    let loss = lg.log_denominator - pos_sum / lg.positives as f64;

    let (din, dh, dz) = (module.in_dim, module.hidden_dim, module.out_dim);
    let tau = module.options.tau;
    let inv_p = 1.0 / lg.positives as f64;
    let mut grads = MscalGrads::zeros_like(module);

    // dL/dlogit = softmax - [positive] / P
    let mut dz_rows: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); module.num_layers()];
    let mut d_anchor_eff: Vec<Vec<f64>> = vec![vec![0.0; dz]; module.num_layers()];
    for &(j, n, pos, l) in &lg.samples {
        let g = (l - lg.log_denominator).exp() - if pos { inv_p } else { 0.0 };
        let z = projection.z(j, n);
        let anchor = module.effective_anchor(j);
        for (da, zv) in d_anchor_eff[j].iter_mut().zip(z) {
            *da += g * zv / tau;
        }
        dz_rows[j].push((n, anchor.iter().map(|a| g * a / tau).collect()));
    }

    for (j, d_eff) in d_anchor_eff.iter().enumerate() {
        let idx = module.anchor_index(j);
        let raw = &module.anchors[idx];
        if module.options.normalize {
            let n = norm(raw);
            let u: Vec<f64> = raw.iter().map(|v| v / n).collect();
            let proj = dot(&u, d_eff);
            for ((g, de), uv) in grads.anchors[idx].iter_mut().zip(d_eff).zip(&u) {
                *g += (de - uv * proj) / n;
            }
        } else {
            for (g, de) in grads.anchors[idx].iter_mut().zip(d_eff) {
                *g += de;
            }
        }
    }

    for (j, params) in module.layers.iter().enumerate() {
        let trace = &projection.layers[j];
        let bl = &batch.layers[j];
        let m = trace.rows;
        let lgr = &mut grads.layers[j];
        // d(pre-ReLU hidden) is nonzero only on sampled rows
        let mut d_hidden = vec![0.0; m * dh];
        let mut touched = Vec::with_capacity(dz_rows[j].len());
        for (n, dzv) in &dz_rows[j] {
            let n = *n;
            let dy: Vec<f64> = if module.options.normalize {
                let z = trace.z(n, dz);
                let p = dot(z, dzv);
                dzv.iter()
                    .zip(z)
                    .map(|(d, zv)| (d - zv * p) / trace.y_norm[n])
                    .collect()
            } else {
                dzv.clone()
            };
            for (g, d) in lgr.b2.iter_mut().zip(&dy) {
                *g += d;
            }
            for h in 0..dh {
                let hv = trace.hidden[n * dh + h];
                if hv <= 0.0 {
                    continue;
                }
                let wrow = &params.w2[h * dz..(h + 1) * dz];
                let grow = &mut lgr.w2[h * dz..(h + 1) * dz];
                let mut dr = 0.0;
                for o in 0..dz {
                    grow[o] += hv * dy[o];
                    dr += wrow[o] * dy[o];
                }
                d_hidden[n * dh + h] += dr;
            }
            touched.push(n);
        }
        touched.sort_unstable();
        touched.dedup();

        let mut d_ahat = vec![0.0; m * dh];
        for &n in &touched {
            for h in 0..dh {
                let d = d_hidden[n * dh + h];
                lgr.bn_gamma[h] += d * trace.a_hat[n * dh + h];
                lgr.bn_beta[h] += d;
                d_ahat[n * dh + h] = d * params.bn_gamma[h];
            }
        }

        let mut d_pre = vec![0.0; m * dh];
        match trace.mode {
            Mode::Train => {
                let mut c1 = vec![0.0; dh];
                let mut c2 = vec![0.0; dh];
                for &n in &touched {
                    for h in 0..dh {
                        c1[h] += d_ahat[n * dh + h];
                        c2[h] += d_ahat[n * dh + h] * trace.a_hat[n * dh + h];
                    }
                }
                let mf = m as f64;
                for n in 0..m {
                    for h in 0..dh {
                        let k = n * dh + h;
                        d_pre[k] = trace.inv_std[h] * (d_ahat[k] - c1[h] / mf - trace.a_hat[k] * c2[h] / mf);
                    }
                }
            }
            Mode::Infer => {
                for n in 0..m {
                    for h in 0..dh {
                        d_pre[n * dh + h] = d_ahat[n * dh + h] * trace.inv_std[h];
                    }
                }
            }
        }
        for n in 0..m {
            let x = bl.row(n, din);
            let drow = &d_pre[n * dh..(n + 1) * dh];
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (g, d) in lgr.w1[i * dh..(i + 1) * dh].iter_mut().zip(drow) {
                    *g += xi * d;
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Mean of per-class losses over all modules; classes without positives add
/// zero but still count in the mean.
pub fn mscal_total_loss(
    modules: &[MscalModule],
    projections: &[Projection],
    assignments: &[SampleAssignment],
) -> Result<f64> {
    if modules.is_empty() {
        return Ok(0.0);
    }
    if projections.len() != modules.len() || assignments.len() != modules.len() {
        return Err(Error::ShapeMismatch(
            "one projection and assignment per module required".into(),
        ));
    }
    let mut sum = 0.0;
    for ((m, p), a) in modules.iter().zip(projections).zip(assignments) {
        if a.num_positives() == 0 {
            continue;
        }
        sum += mscal_loss(m, p, a)?;
    }
    Ok(sum / modules.len() as f64)
}

/// `-max_i anchor_i . z_i` for one location seen by every class module.
pub fn ood_score(modules: &[&MscalModule], z_by_class: &[&[f64]], layer: usize) -> Result<f64> {
    if modules.is_empty() {
        return Err(Error::NoModules);
    }
    if modules.len() != z_by_class.len() {
        return Err(Error::ShapeMismatch("one projected vector per module required".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for (m, z) in modules.iter().zip(z_by_class) {
        if layer >= m.num_layers() || z.len() != m.out_dim {
            return Err(Error::ShapeMismatch(format!("layer {layer} for `{}`", m.class_name)));
        }
        best = best.max(dot(&m.effective_anchor(layer), z));
    }
    Ok(-best)
}

/// Per-layer grids of OOD scores.
#[derive(Clone, Debug, PartialEq)]
pub struct OodScoreMap {
    pub layers: Vec<OodLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodLayer {
    pub geometry: LayerGeometry,
    pub scores: Vec<f64>,
}

impl OodScoreMap {
    pub fn get(&self, layer: usize, row: usize, col: usize) -> Option<f64> {
        let l = self.layers.get(layer)?;
        if row >= l.geometry.height || col >= l.geometry.width {
            return None;
        }
        l.scores.get(row * l.geometry.width + col).copied()
    }

    pub fn num_entries(&self) -> usize {
        self.layers.iter().map(|l| l.scores.len()).sum()
    }
}

/// OOD scores for every row of a batch, infer-mode projections.
/// Returns `scores[layer][row]`.
pub fn ood_scores_batch(modules: &[&MscalModule], batch: &Batch) -> Result<Vec<Vec<f64>>> {
    if modules.is_empty() {
        return Err(Error::NoModules);
    }
    let mut best: Vec<Vec<f64>> = batch.layers.iter().map(|l| vec![f64::NEG_INFINITY; l.rows()]).collect();
    for m in modules {
        let proj = m.project(batch, Mode::Infer)?;
        for (j, row_best) in best.iter_mut().enumerate() {
            let anchor = m.effective_anchor(j);
            for (n, b) in row_best.iter_mut().enumerate() {
                *b = b.max(dot(&anchor, proj.z(j, n)));
            }
        }
    }
    Ok(best.into_iter().map(|l| l.into_iter().map(|v| -v).collect()).collect())
}

pub fn ood_score_map(modules: &[&MscalModule], pyramid: &FeaturePyramid) -> Result<OodScoreMap> {
    let batch = Batch::from_pyramid(pyramid);
    let scores = ood_scores_batch(modules, &batch)?;
    Ok(OodScoreMap {
        layers: scores
            .into_iter()
            .zip(batch.geometry())
            .map(|(scores, geometry)| OodLayer { geometry, scores })
            .collect(),
    })
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn calibrate_threshold(known_scores: &[f64], quantile: f64) -> Result<f64> {
    if known_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Config(format!("quantile {quantile} outside (0, 1)")));
    }
    let mut v = known_scores.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * quantile;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    Ok(v[lo] + frac * (v[hi] - v[lo]))
}

/// Marks every module of tasks `<= up_to_task` as frozen.
pub fn freeze_class_modules(mut modules: Vec<MscalModule>, up_to_task: u32) -> Vec<MscalModule> {
    for m in &mut modules {
        if m.task_id <= up_to_task {
            m.frozen = true;
        }
    }
    modules
}
