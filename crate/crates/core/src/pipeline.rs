//! In-memory pipeline stages shared by the command-line commands: task
//! training from a previous checkpoint and per-scene inference.

use rayon::prelude::*;

use crate::detection::{detect_scene, DetectConfig, Detection};
use crate::embedding::{ClassEmbeddingRegistry, EmbeddingVector, PromptLabel, TaskSchedule, UnknownPrompt};
use crate::error::{Error, Result};
use crate::eval::{DetRecord, GtRecord};
use crate::mscal::{freeze_class_modules, ood_score_map, LevelRule, MscalModule};
use crate::seed::rng_for;
use crate::training::{train_task, LabeledScene, TaskData, TrainConfig, TrainLog};
use crate::world::{Scene, World};

/// State after training one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub task_id: u32,
    pub registry: ClassEmbeddingRegistry,
    pub modules: Vec<MscalModule>,
    pub theta: f64,
    pub log: TrainLog,
}

/// Scenes with the ground truth the trainer may see. Classes that are never
/// known are dropped from train-split labels; later-task classes are filtered
/// per task by the registry.
pub fn labeled_scenes(scenes: &[Scene], schedule: &TaskSchedule, hide_unknown: bool) -> Vec<LabeledScene> {
    scenes
        .iter()
        .map(|s| LabeledScene {
            scene_id: s.scene_id.clone(),
            pyramid: s.pyramid.clone(),
            gt: s
                .objects
                .iter()
                .filter(|o| !hide_unknown || schedule.task_of(&o.class_name).is_some())
                .map(|o| (o.bbox, o.class_name.clone()))
                .collect(),
        })
        .collect()
}

pub fn gt_records(scenes: &[Scene]) -> Vec<GtRecord> {
    scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(|o| GtRecord {
                scene_id: s.scene_id.clone(),
                bbox: o.bbox,
                class_name: o.class_name.clone(),
            })
        })
        .collect()
}

/// Registers the classes of `task_id`, initializes their modules, freezes
/// everything older and trains.
#[allow(clippy::too_many_arguments)]
pub fn train_next_task(
    prev: Option<&Checkpoint>,
    generic_object: &EmbeddingVector,
    text_embeddings: &[(String, Vec<f64>)],
    schedule: &TaskSchedule,
    data: &TaskData<'_>,
    config: &TrainConfig,
    alpha: f64,
    task_id: u32,
    seed: u64,
) -> Result<Checkpoint> {
    let expected = prev.map_or(0, |c| c.task_id) + 1;
    if task_id != expected {
        return Err(Error::Config(format!(
            "task {task_id} follows checkpoint of task {}",
            expected - 1
        )));
    }
    if task_id > schedule.num_tasks() {
        return Err(Error::Config(format!("task {task_id} is not in the task split")));
    }
    let base = match prev {
        Some(c) => c.registry.clone(),
        None => ClassEmbeddingRegistry::new(generic_object.clone(), alpha)?,
    };
    let new_classes = schedule
        .classes_of(task_id)
        .iter()
        .map(|name| {
            let v = text_embeddings
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::UnknownClass(name.clone()))?;
            Ok((name.clone(), EmbeddingVector::new(v.1.clone())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let registry = base.register_task(new_classes)?;

    let mut modules = freeze_class_modules(prev.map(|c| c.modules.clone()).unwrap_or_default(), task_id - 1);
    let dim = registry.dim();
    let (hidden, out) = config.dims(dim);
    let num_layers = data
        .train
        .first()
        .or(data.cal.first())
        .map_or(data.rule.bounds.len(), |s| s.pyramid.layers().len());
    for (i, e) in registry.entries().iter().enumerate().skip(modules.len()) {
        let mut rng = rng_for(seed, &format!("mscal/init/{}", e.name));
        let mut module = MscalModule::new(
            i,
            e.name.clone(),
            task_id,
            dim,
            hidden,
            out,
            num_layers,
            config.mscal_options(),
            &mut rng,
        )?;
        module.scale_weights(config.init_scale);
        modules.push(module);
    }
    let outcome = train_task(data, registry, modules, config, task_id, seed)?;
    Ok(Checkpoint {
        task_id,
        registry: outcome.registry,
        modules: outcome.modules,
        theta: outcome.theta,
        log: outcome.log,
    })
}

/// Inference-time toggles and overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferOptions {
    /// Use the raw generic-object row instead of the pseudo-unknown one.
    pub no_owel: bool,
    /// Disable the OOD gate.
    pub no_mscal: bool,
    pub alpha: Option<f64>,
    /// Replacement for `w_0`.
    pub generic_prompt: Option<EmbeddingVector>,
}

/// Detections of one scene under a checkpoint.
pub fn infer_scene(
    checkpoint: &Checkpoint,
    pyramid: &crate::pyramid::FeaturePyramid,
    detect: &DetectConfig,
    options: &InferOptions,
) -> Result<Vec<Detection>> {
    let mut registry = checkpoint.registry.clone();
    if let Some(a) = options.alpha {
        registry = registry.with_alpha(a)?;
    }
    if let Some(g) = &options.generic_prompt {
        registry = registry.with_generic_object(g.clone())?;
    }
    let prompts = registry.prompt_matrix_with(if options.no_owel {
        UnknownPrompt::Generic
    } else {
        UnknownPrompt::Pseudo
    })?;
    let modules: Vec<&MscalModule> = checkpoint.modules.iter().collect();
    let map = ood_score_map(&modules, pyramid)?;
    let theta = if options.no_mscal {
        f64::INFINITY
    } else {
        checkpoint.theta
    };
    detect_scene(pyramid, &prompts, &map, theta, detect)
}

/// Named records for every scene, in scene order.
pub fn infer_split(
    checkpoint: &Checkpoint,
    scenes: &[(String, crate::pyramid::FeaturePyramid)],
    detect: &DetectConfig,
    options: &InferOptions,
) -> Result<Vec<DetRecord>> {
    let per_scene: Vec<Result<Vec<DetRecord>>> = scenes
        .par_iter()
        .map(|(id, pyramid)| {
            let dets = infer_scene(checkpoint, pyramid, detect, options)?;
            Ok(dets
                .into_iter()
                .map(|d| DetRecord {
                    scene_id: id.clone(),
                    bbox: d.bbox,
                    label: match d.label {
                        PromptLabel::Known(i) => Some(checkpoint.registry.entries()[i].name.clone()),
                        PromptLabel::Unknown => None,
                    },
                    confidence: d.confidence,
                    ood: d.ood,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in per_scene {
        out.extend(r?);
    }
    Ok(out)
}

/// Trains every task of a generated world in memory.
pub fn train_all(
    world: &World,
    train: &[Scene],
    cal: &[Scene],
    config: &TrainConfig,
    alpha: f64,
) -> Result<Vec<Checkpoint>> {
    let schedule = world.schedule()?;
    let rule: LevelRule = world.spec.level_rule()?;
    let train = labeled_scenes(train, &schedule, true);
    let cal = labeled_scenes(cal, &schedule, true);
    let data = TaskData {
        train: &train,
        cal: &cal,
        rule: &rule,
    };
    let w0 = EmbeddingVector::new(world.generic_object.clone())?;
    let mut out: Vec<Checkpoint> = Vec::new();
    for t in 1..=schedule.num_tasks() {
        let c = train_next_task(
            out.last(),
            &w0,
            &world.text_embeddings,
            &schedule,
            &data,
            config,
            alpha,
            t,
            world.seed,
        )?;
        out.push(c);
    }
    Ok(out)
}
