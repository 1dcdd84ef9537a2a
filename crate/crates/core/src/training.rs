//! Joint optimization of class embeddings and MSCAL modules for one task.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::detection::sigmoid;
use crate::embedding::{dot, norm, ClassEmbeddingRegistry, ZERO_NORM};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mscal::{
    assign_from_labels, calibrate_threshold, mscal_loss, mscal_loss_gradients, ood_scores_batch, CellLabels, GtBox,
    LevelRule, Mode, MscalModule, SampleAssignment,
};
use crate::pyramid::{Batch, FeaturePyramid, LayerGeometry};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps_per_task: usize,
    pub tau: f64,
    pub neg_cap: usize,
    pub logit_scale: f64,
    pub quantile: f64,
    pub det_weight: f64,
    pub mscal_weight: f64,
    /// Hidden width of the projectors; `0` means `D`.
    pub hidden_dim: usize,
    /// Output width of the projectors; `0` means `D / 2`.
    pub out_dim: usize,
    pub normalize: bool,
    pub share_anchors: bool,
    pub bn_momentum: f64,
    /// Multiplier on the initial projector weights. Batchnorm and the output
    /// normalization make the projector scale-invariant, so a small start
    /// acts as a larger effective step under a fixed learning rate.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.0125,
            batch_size: 16,
            steps_per_task: 500,
            tau: crate::mscal::DEFAULT_TAU,
            neg_cap: crate::mscal::DEFAULT_NEG_CAP,
            logit_scale: crate::detection::DEFAULT_LOGIT_SCALE,
            quantile: crate::mscal::DEFAULT_QUANTILE,
            det_weight: 1.0,
            mscal_weight: 1.0,
            hidden_dim: 0,
            out_dim: 0,
            normalize: true,
            share_anchors: false,
            bn_momentum: crate::mscal::BN_MOMENTUM,
            init_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau", self.tau),
            ("logit_scale", self.logit_scale),
            ("bn_momentum", self.bn_momentum),
            ("init_scale", self.init_scale),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{k} must be positive")));
            }
        }
        for (k, v) in [
            ("weight_decay", self.weight_decay),
            ("det_weight", self.det_weight),
            ("mscal_weight", self.mscal_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{k} must be non-negative")));
            }
        }
        if self.batch_size == 0 || self.neg_cap == 0 {
            return Err(Error::Config(
                "train.batch_size and train.neg_cap must be positive".into(),
            ));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config("train.quantile must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn mscal_options(&self) -> crate::mscal::MscalOptions {
        crate::mscal::MscalOptions {
            tau: self.tau,
            normalize: self.normalize,
            share_anchors: self.share_anchors,
            bn_momentum: self.bn_momentum,
        }
    }

    pub fn dims(&self, dim: usize) -> (usize, usize) {
        let hidden = if self.hidden_dim == 0 { dim } else { self.hidden_dim };
        let out = if self.out_dim == 0 {
            (dim / 2).max(1)
        } else {
            self.out_dim
        };
        (hidden, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Moment accumulators keyed by parameter name. Frozen parameters never get
/// an entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: BTreeMap<String, Moments>,
}

impl OptimizerState {
    /// Advances the shared step counter; call once per optimizer step.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }
}

/// AdamW on one parameter block: decoupled decay, then the bias-corrected
/// Adam update.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    step: u64,
    config: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if moments.m.is_empty() {
        moments.m = vec![0.0; params.len()];
        moments.v = vec![0.0; params.len()];
    }
    if moments.m.len() != params.len() {
        return Err(Error::ShapeMismatch("optimizer moments differ from parameters".into()));
    }
    let t = step.max(1) as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - config.lr * config.weight_decay;
    for k in 0..params.len() {
        let g = grads[k];
        params[k] *= decay;
        moments.m[k] = config.beta1 * moments.m[k] + (1.0 - config.beta1) * g;
        moments.v[k] = config.beta2 * moments.v[k] + (1.0 - config.beta2) * g * g;
        let m_hat = moments.m[k] / c1;
        let v_hat = moments.v[k] / c2;
        params[k] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

/// Rows entering the detection loss: every row sampled for any class.
pub fn sampled_rows(assignments: &[SampleAssignment], num_layers: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); num_layers];
    for a in assignments {
        for (j, l) in a.layers.iter().enumerate() {
            rows[j].extend_from_slice(&l.positives);
            rows[j].extend_from_slice(&l.negatives);
        }
    }
    for r in &mut rows {
        r.sort_unstable();
        r.dedup();
    }
    rows
}

/// Mean binary cross-entropy over every (sampled row, registry class) pair on
/// `sigmoid(logit_scale * cos)`. Gradients are returned for trainable
/// entries only.
pub fn detection_loss(
    batch: &Batch,
    labels: &CellLabels,
    registry: &ClassEmbeddingRegistry,
    rows: &[Vec<usize>],
    logit_scale: f64,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let n_rows: usize = rows.iter().map(Vec::len).sum();
    if n_rows == 0 {
        return Err(Error::NoSamples);
    }
    if registry.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    if batch.dim != registry.dim() || rows.len() != batch.num_layers() {
        return Err(Error::ShapeMismatch(
            "batch does not match registry or row layout".into(),
        ));
    }
    let dim = batch.dim;
    let classes: Vec<(Vec<f64>, f64)> = registry
        .entries()
        .iter()
        .map(|e| {
            let n = e.embedding.norm();
            if n < ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            Ok((e.embedding.as_slice().iter().map(|v| v / n).collect(), n))
        })
        .collect::<Result<_>>()?;
    let count = (n_rows * classes.len()) as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Option<Vec<f64>>> = registry
        .entries()
        .iter()
        .map(|e| (!e.frozen).then(|| vec![0.0; dim]))
        .collect();
    for (j, layer_rows) in rows.iter().enumerate() {
        let bl = &batch.layers[j];
        for &n in layer_rows {
            let raw = bl.row(n, dim);
            let fnorm = norm(raw);
            if fnorm < ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            let f: Vec<f64> = raw.iter().map(|v| v / fnorm).collect();
            for (c, (w_hat, w_norm)) in classes.iter().enumerate() {
                let cos = dot(w_hat, &f);
                let s = logit_scale * cos;
                let t = if labels.is_positive(j, n, c) { 1.0 } else { 0.0 };
                // softplus(s) - t * s
                let softplus = if s > 0.0 {
                    s + (-s).exp().ln_1p()
                } else {
                    s.exp().ln_1p()
                };
                loss += softplus - t * s;
                if let Some(g) = grads[c].as_mut() {
                    let ds = (sigmoid(s) - t) / count;
                    let k = ds * logit_scale / w_norm;
                    for ((gv, fv), wv) in g.iter_mut().zip(&f).zip(w_hat) {
                        *gv += k * (fv - wv * cos);
                    }
                }
            }
        }
    }
    Ok((loss / count, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub det_loss: f64,
    pub mscal_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,det_loss,mscal_loss,total\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", r.step, r.det_loss, r.mscal_loss, r.total);
        }
        s
    }
}

/// A scene with named ground truth, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub scene_id: String,
    pub pyramid: FeaturePyramid,
    pub gt: Vec<(BBox, String)>,
}

/// Boxes of classes present in the registry, as registry indices.
pub fn registry_boxes(registry: &ClassEmbeddingRegistry, scene: &LabeledScene) -> Vec<GtBox> {
    scene
        .gt
        .iter()
        .filter_map(|(b, name)| registry.index_of(name).map(|class_id| GtBox { bbox: *b, class_id }))
        .collect()
}

pub struct TaskData<'a> {
    pub train: &'a [LabeledScene],
    pub cal: &'a [LabeledScene],
    pub rule: &'a LevelRule,
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub registry: ClassEmbeddingRegistry,
    pub modules: Vec<MscalModule>,
    pub log: TrainLog,
    pub theta: f64,
    pub n_cal_scores: usize,
}

/// Losses of one step without updating anything: `(det, mscal, total)`.
pub struct StepLoss {
    pub det: f64,
    pub mscal: f64,
    pub total: f64,
}

fn check_task_state(registry: &ClassEmbeddingRegistry, modules: &[MscalModule], task_id: u32) -> Result<()> {
    if registry.current_task() != task_id {
        return Err(Error::Config(format!(
            "registry is at task {}, expected {task_id}",
            registry.current_task()
        )));
    }
    if modules.len() != registry.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} modules for {} registry classes",
            modules.len(),
            registry.len()
        )));
    }
    for (i, (m, e)) in modules.iter().zip(registry.entries()).enumerate() {
        if m.class_id != i || m.class_name != e.name || m.frozen != e.frozen || m.task_id != e.task_id {
            return Err(Error::Config(format!(
                "module `{}` disagrees with registry entry `{}`",
                m.class_name, e.name
            )));
        }
    }
    Ok(())
}

/// One optimization step on a fixed batch. Returns the logged losses.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    registry: &mut ClassEmbeddingRegistry,
    modules: &mut [MscalModule],
    batch: &Batch,
    labels: &CellLabels,
    assignments: &[SampleAssignment],
    config: &TrainConfig,
    optimizer: &mut OptimizerState,
) -> Result<StepLoss> {
    let rows = sampled_rows(assignments, batch.num_layers());
    let (det, det_grads) = detection_loss(batch, labels, registry, &rows, config.logit_scale)?;

    let n_mod = modules.len() as f64;
    let mut mscal_sum = 0.0;
    let mut module_grads = Vec::with_capacity(modules.len());
    let mut projections = Vec::with_capacity(modules.len());
    for (m, a) in modules.iter().zip(assignments) {
        if m.frozen {
            if a.num_positives() > 0 {
                let p = m.project(batch, Mode::Infer)?;
                mscal_sum += mscal_loss(m, &p, a)?;
            }
            module_grads.push(None);
            projections.push(None);
            continue;
        }
        let p = m.project(batch, Mode::Train)?;
        if a.num_positives() > 0 {
            let (l, mut g) = mscal_loss_gradients(m, batch, &p, a)?;
            mscal_sum += l;
            g.scale(config.mscal_weight / n_mod);
            module_grads.push(Some(g));
        } else {
            module_grads.push(None);
        }
        projections.push(Some(p));
    }
    let mscal = if modules.is_empty() { 0.0 } else { mscal_sum / n_mod };
    let total = config.det_weight * det + config.mscal_weight * mscal;

    let adam = AdamWConfig::new(config.learning_rate, config.weight_decay);
    let step = optimizer.begin_step();
    for (i, g) in det_grads.into_iter().enumerate() {
        let Some(mut g) = g else { continue };
        g.iter_mut().for_each(|v| *v *= config.det_weight);
        let key = format!("embedding/{}", registry.entries()[i].name);
        let params = registry
            .trainable_mut(i)
            .expect("gradient exists only for trainable entries");
        adamw_step(params, &g, optimizer.slots.entry(key).or_default(), step, &adam)?;
    }
    for ((m, g), p) in modules.iter_mut().zip(module_grads).zip(&projections) {
        if m.frozen {
            continue;
        }
        // classes absent from the batch still decay
        let g = g.unwrap_or_else(|| crate::mscal::MscalGrads::zeros_like(m));
        let mut result = Ok(());
        m.zip_params_mut(&g, |key, params, grads| {
            if result.is_ok() {
                result = adamw_step(params, grads, optimizer.slots.entry(key).or_default(), step, &adam);
            }
        })?;
        result?;
        m.renormalize_anchors();
        if let Some(p) = p {
            m.update_running_stats(p);
        }
    }
    Ok(StepLoss { det, mscal, total })
}

/// Sample assignments of every registry class over one batch.
pub fn assign_all<R: rand::Rng>(
    labels: &CellLabels,
    num_classes: usize,
    neg_cap: usize,
    rng: &mut R,
) -> Vec<SampleAssignment> {
    (0..num_classes)
        .map(|c| assign_from_labels(labels, c, neg_cap, rng))
        .collect()
}

/// Trains the non-frozen embeddings and modules for `steps_per_task` steps,
/// then calibrates the OOD threshold on the calibration split.
pub fn train_task(
    data: &TaskData<'_>,
    registry: ClassEmbeddingRegistry,
    modules: Vec<MscalModule>,
    config: &TrainConfig,
    task_id: u32,
    seed: u64,
) -> Result<TaskOutcome> {
    config.validate()?;
    check_task_state(&registry, &modules, task_id)?;
    if data.train.is_empty() && config.steps_per_task > 0 {
        return Err(Error::NoSamples);
    }
    let mut registry = registry;
    let mut modules = modules;
    let mut optimizer = OptimizerState::default();
    let mut log = TrainLog::default();
    let train_boxes: Vec<Vec<GtBox>> = data.train.iter().map(|s| registry_boxes(&registry, s)).collect();
    for step in 0..config.steps_per_task {
        let mut rng = rng_for(seed, &format!("train/task-{task_id}/step-{step}"));
        let k = config.batch_size.min(data.train.len());
        let mut picks = index::sample(&mut rng, data.train.len(), k).into_vec();
        picks.sort_unstable();
        let pyramids: Vec<&FeaturePyramid> = picks.iter().map(|&i| &data.train[i].pyramid).collect();
        let batch = Batch::from_pyramids(&pyramids)?;
        let gts: Vec<Vec<GtBox>> = picks.iter().map(|&i| train_boxes[i].clone()).collect();
        let labels = CellLabels::new(&batch.geometry(), &gts, data.rule);
        let assignments = assign_all(&labels, registry.len(), config.neg_cap, &mut rng);
        if assignments.iter().all(|a| a.num_positives() + a.num_negatives() == 0) {
            continue;
        }
        let l = train_step(
            &mut registry,
            &mut modules,
            &batch,
            &labels,
            &assignments,
            config,
            &mut optimizer,
        )?;
        log.rows.push(TrainLogRow {
            step,
            det_loss: l.det,
            mscal_loss: l.mscal,
            total: l.total,
        });
    }
    let scores = known_foreground_scores(&modules, &registry, data.cal, data.rule)?;
    let theta = calibrate_threshold(&scores, config.quantile)?;
    Ok(TaskOutcome {
        registry,
        modules,
        log,
        theta,
        n_cal_scores: scores.len(),
    })
}

/// OOD scores at every location positive for a registry class, scene by scene.
pub fn known_foreground_scores(
    modules: &[MscalModule],
    registry: &ClassEmbeddingRegistry,
    scenes: &[LabeledScene],
    rule: &LevelRule,
) -> Result<Vec<f64>> {
    let refs: Vec<&MscalModule> = modules.iter().collect();
    let mut out = Vec::new();
    for s in scenes {
        let batch = Batch::from_pyramid(&s.pyramid);
        let geometry: Vec<LayerGeometry> = batch.geometry();
        let labels = CellLabels::new(&geometry, &[registry_boxes(registry, s)], rule);
        let scores = ood_scores_batch(&refs, &batch)?;
        for (j, layer) in labels.layers.iter().enumerate() {
            for (n, owners) in layer.iter().enumerate() {
                if !owners.is_empty() {
                    out.push(scores[j][n]);
                }
            }
        }
    }
    Ok(out)
}
