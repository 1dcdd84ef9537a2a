//! Synthetic open-world detection problems.
//!
//! Prototypes live on the unit sphere around a pole `e_0`. Known classes are
//! spread over a wide cap, far-OOD (FOOD) classes over a narrower cap away
//! from every known class, and near-OOD (NOOD) classes sit at a fixed small
//! angle from a known partner. Scenes are feature pyramids whose foreground
//! cells are noisy prototypes and whose background cells avoid all
//! prototypes.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, TaskSchedule};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mscal::LevelRule;
use crate::pyramid::{FeaturePyramid, LayerGeometry, PyramidLayer};
use crate::seed::rng_for;

const MAX_DRAWS: usize = 1_000_000;
const MAX_BOX_TRIES: usize = 200;

/// Generic prompts swept by the prompt ablation; the first one is `w_0`.
pub const GENERIC_PROMPTS: [&str; 5] = ["object", "entity", "unknown", "anything", "everything"];
/// Angle between `w_0` and the other generic prompts.
const GENERIC_PROMPT_ANGLE: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub cal: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub dim: usize,
    pub known_per_task: Vec<usize>,
    pub n_nood: usize,
    pub n_food: usize,
    pub nood_angle: f64,
    pub food_min_angle: f64,
    pub noise_sigma: f64,
    /// Half-angle of the cap holding known prototypes.
    pub known_cap_angle: f64,
    /// Half-angle of the cap holding FOOD prototypes.
    pub food_cap_angle: f64,
    pub text_noise: f64,
    /// Probability that a box belongs to an unknown (NOOD or FOOD) class.
    pub unknown_ratio: f64,
    pub image_size: u32,
    /// `(height, width, stride)` per layer.
    pub pyramid: Vec<(usize, usize, u32)>,
    /// Lower bound on the longer box side owned by each layer.
    pub level_bounds: Vec<f64>,
    /// Inclusive range of the longer box side in pixels.
    pub box_side: (u32, u32),
    /// Shorter side as a fraction of the longer one, lower bound.
    pub min_aspect: f64,
    pub boxes_per_scene: (usize, usize),
    pub background_max_cos: f64,
    /// Uniform jitter of per-location boxes, as a fraction of the box side.
    pub box_jitter: f64,
    pub scenes: SplitSizes,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            known_per_task: vec![5, 5, 5],
            n_nood: 4,
            n_food: 4,
            nood_angle: 0.25,
            food_min_angle: 1.2,
            noise_sigma: 0.1,
            known_cap_angle: 1.4,
            food_cap_angle: 0.7,
            text_noise: 0.05,
            unknown_ratio: 0.3,
            image_size: 64,
            pyramid: vec![(16, 16, 4), (8, 8, 8), (4, 4, 16)],
            level_bounds: vec![0.0, 12.0, 24.0],
            box_side: (8, 44),
            min_aspect: 0.6,
            boxes_per_scene: (1, 4),
            background_max_cos: 0.3,
            box_jitter: 0.0,
            scenes: SplitSizes {
                train: 160,
                cal: 40,
                test: 300,
            },
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world.{m}")));
        if self.dim < 4 {
            return bad("dim must be at least 4");
        }
        for (k, a) in [
            ("nood_angle", self.nood_angle),
            ("food_min_angle", self.food_min_angle),
            ("known_cap_angle", self.known_cap_angle),
            ("food_cap_angle", self.food_cap_angle),
        ] {
            if !(a > 0.0 && a < std::f64::consts::PI) {
                return bad(&format!("{k} must lie in (0, pi)"));
            }
        }
        if self.known_cap_angle > FRAC_PI_2 || self.food_cap_angle > FRAC_PI_2 {
            return bad("cap angles must not exceed pi/2");
        }
        if self.n_nood > self.known_total() {
            return bad("n_nood exceeds the number of known classes");
        }
        if !(self.noise_sigma >= 0.0 && self.text_noise >= 0.0 && self.box_jitter >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.unknown_ratio) {
            return bad("unknown_ratio must lie in [0, 1]");
        }
        if self.pyramid.len() != self.level_bounds.len() {
            return bad("level_bounds needs one entry per pyramid layer");
        }
        LevelRule::new(self.level_bounds.clone())?;
        crate::pyramid::validate_geometry(&self.geometry())?;
        if self.box_side.0 == 0 || self.box_side.0 > self.box_side.1 || self.box_side.1 > self.image_size {
            return bad("box_side must be a non-empty range within the image");
        }
        if !(self.min_aspect > 0.0 && self.min_aspect <= 1.0) {
            return bad("min_aspect must lie in (0, 1]");
        }
        if self.boxes_per_scene.0 > self.boxes_per_scene.1 {
            return bad("boxes_per_scene range is empty");
        }
        if !(self.background_max_cos > -1.0 && self.background_max_cos <= 1.0) {
            return bad("background_max_cos must lie in (-1, 1]");
        }
        Ok(())
    }

    pub fn known_total(&self) -> usize {
        self.known_per_task.iter().sum()
    }

    pub fn geometry(&self) -> Vec<LayerGeometry> {
        self.pyramid
            .iter()
            .map(|&(h, w, s)| LayerGeometry::new(h, w, s))
            .collect()
    }

    pub fn level_rule(&self) -> Result<LevelRule> {
        LevelRule::new(self.level_bounds.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClassKind {
    Known { task: u32 },
    Nood { partner: String },
    Food,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldClass {
    pub name: String,
    #[serde(flatten)]
    pub kind: ClassKind,
    pub prototype: Vec<f64>,
}

impl WorldClass {
    pub fn is_known_eventually(&self) -> bool {
        matches!(self.kind, ClassKind::Known { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub seed: u64,
    pub classes: Vec<WorldClass>,
    /// Initial text embeddings of the known classes, in class order.
    pub text_embeddings: Vec<(String, Vec<f64>)>,
    pub generic_object: Vec<f64>,
    /// Generic prompts in [`GENERIC_PROMPTS`] order.
    pub generic_prompts: Vec<(String, Vec<f64>)>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Random unit vector orthogonal to `p` (unit).
fn tangent(rng: &mut ChaCha8Rng, p: &[f64]) -> Vec<f64> {
    loop {
        let mut t = gaussian(rng, p.len());
        let d = dot(&t, p);
        t.iter_mut().zip(p).for_each(|(x, q)| *x -= d * q);
        if norm(&t) > 1e-9 {
            return unit(t);
        }
    }
}

/// Rotates unit `p` by `angle` toward unit tangent `t`.
fn rotate(p: &[f64], t: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    unit(p.iter().zip(t).map(|(a, b)| c * a + s * b).collect())
}

/// Uniform sample from the cap of half-angle `beta` around `e_0`.
fn sample_cap(rng: &mut ChaCha8Rng, dim: usize, beta: f64) -> Vec<f64> {
    let mut pole = vec![0.0; dim];
    pole[0] = 1.0;
    let peak = beta.min(FRAC_PI_2).sin();
    let phi = loop {
        let phi = rng.random_range(0.0..beta);
        let u: f64 = rng.random();
        if u <= (phi.sin() / peak).powi(dim as i32 - 2) {
            break phi;
        }
    };
    let t = tangent(rng, &pole);
    rotate(&pole, &t, phi)
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos()
}

struct Layout {
    known: Vec<Vec<f64>>,
    partners: Vec<usize>,
    noods: Vec<Vec<f64>>,
    foods: Vec<Vec<f64>>,
}

fn sample_layout(rng: &mut ChaCha8Rng, spec: &WorldSpec, draws: &mut usize) -> Result<Layout> {
    let dim = spec.dim;
    let mut known: Vec<Vec<f64>> = Vec::new();
    let min_known = 2.0 * spec.nood_angle;
    while known.len() < spec.known_total() {
        *draws += 1;
        if *draws > MAX_DRAWS {
            return Err(Error::InfeasibleSpec(format!(
                "could not place {} known prototypes {min_known:.3} rad apart",
                spec.known_total()
            )));
        }
        let v = sample_cap(rng, dim, spec.known_cap_angle);
        if known.iter().all(|k| angle(&v, k) >= min_known) {
            known.push(v);
        }
    }
    let partners: Vec<usize> = {
        let mut p = index::sample(rng, known.len(), spec.n_nood).into_vec();
        p.sort_unstable();
        p
    };
    let noods: Vec<Vec<f64>> = partners
        .iter()
        .map(|&k| {
            let t = tangent(rng, &known[k]);
            rotate(&known[k], &t, spec.nood_angle)
        })
        .collect();
    let mut foods: Vec<Vec<f64>> = Vec::new();
    while foods.len() < spec.n_food {
        *draws += 1;
        if *draws > MAX_DRAWS {
            return Err(Error::InfeasibleSpec(format!(
                "could not place {} FOOD prototypes {:.3} rad from every known class",
                spec.n_food, spec.food_min_angle
            )));
        }
        let v = sample_cap(rng, dim, spec.food_cap_angle);
        if known.iter().all(|k| angle(&v, k) >= spec.food_min_angle) {
            foods.push(v);
        }
    }
    Ok(Layout {
        known,
        partners,
        noods,
        foods,
    })
}

impl Layout {
    fn all(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.known.iter().chain(&self.noods).chain(&self.foods)
    }

    /// Normalized mean of every prototype, if all prototypes lie in its open
    /// hemisphere.
    fn central_mean(&self, dim: usize) -> Option<Vec<f64>> {
        let mut mean = vec![0.0; dim];
        let mut any = false;
        for p in self.all() {
            any = true;
            mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
        }
        if !any {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            return Some(e);
        }
        if norm(&mean) < 1e-12 {
            return None;
        }
        let mean = unit(mean);
        self.all().all(|p| dot(&mean, p) > 0.0).then_some(mean)
    }
}

/// Builds prototypes, initial text embeddings and `w_0`. Layouts whose
/// prototypes do not share an open hemisphere with `w_0` are redrawn.
pub fn make_world(spec: &WorldSpec, seed: u64) -> Result<World> {
    spec.validate()?;
    let dim = spec.dim;
    let mut rng = rng_for(seed, "world/prototypes");
    let mut draws = 0usize;
    let (layout, generic_object) = loop {
        let layout = sample_layout(&mut rng, spec, &mut draws)?;
        if let Some(mean) = layout.central_mean(dim) {
            break (layout, mean);
        }
        draws += 1;
    };
    let Layout {
        known,
        partners,
        noods,
        foods,
    } = layout;

    let mut classes = Vec::new();
    let mut task = 1u32;
    let mut left_in_task = spec.known_per_task.first().copied().unwrap_or(0);
    let mut task_iter = spec.known_per_task.iter().skip(1);
    for (i, p) in known.iter().enumerate() {
        while left_in_task == 0 {
            task += 1;
            left_in_task = *task_iter.next().expect("counts cover every known class");
        }
        left_in_task -= 1;
        classes.push(WorldClass {
            name: format!("known{i:02}"),
            kind: ClassKind::Known { task },
            prototype: p.clone(),
        });
    }
    for (i, (p, &k)) in noods.iter().zip(&partners).enumerate() {
        classes.push(WorldClass {
            name: format!("nood{i:02}"),
            kind: ClassKind::Nood {
                partner: format!("known{k:02}"),
            },
            prototype: p.clone(),
        });
    }
    for (i, p) in foods.iter().enumerate() {
        classes.push(WorldClass {
            name: format!("food{i:02}"),
            kind: ClassKind::Food,
            prototype: p.clone(),
        });
    }

    let text_embeddings = known
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let noise = gaussian(&mut rng, dim);
            let d = dot(&noise, k);
            let v: Vec<f64> = k
                .iter()
                .zip(&noise)
                .map(|(p, n)| p + spec.text_noise * (n - d * p))
                .collect();
            (format!("known{i:02}"), unit(v))
        })
        .collect();

    let generic_prompts = GENERIC_PROMPTS
        .iter()
        .map(|&name| {
            if name == "object" {
                return (name.to_string(), generic_object.clone());
            }
            let mut r = rng_for(seed, &format!("world/prompt/{name}"));
            let t = tangent(&mut r, &generic_object);
            (name.to_string(), rotate(&generic_object, &t, GENERIC_PROMPT_ANGLE))
        })
        .collect();

    Ok(World {
        spec: spec.clone(),
        seed,
        classes,
        text_embeddings,
        generic_object,
        generic_prompts,
    })
}

impl World {
    pub fn schedule(&self) -> Result<TaskSchedule> {
        let n_tasks = self.spec.known_per_task.len();
        let mut tasks = vec![Vec::new(); n_tasks];
        for c in &self.classes {
            if let ClassKind::Known { task } = c.kind {
                tasks[task as usize - 1].push(c.name.clone());
            }
        }
        TaskSchedule::new(tasks)
    }

    pub fn class(&self, name: &str) -> Option<&WorldClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn unknown_classes(&self) -> impl Iterator<Item = &WorldClass> {
        self.classes.iter().filter(|c| !c.is_known_eventually())
    }

    pub fn known_classes(&self) -> impl Iterator<Item = &WorldClass> {
        self.classes.iter().filter(|c| c.is_known_eventually())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Cal,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Cal, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Cal => "cal",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "cal" => Ok(Split::Cal),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }

    pub fn size(self, sizes: &SplitSizes) -> usize {
        match self {
            Split::Train => sizes.train,
            Split::Cal => sizes.cal,
            Split::Test => sizes.test,
        }
    }
}

pub fn scene_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class_name: String,
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub split: Split,
    pub index: usize,
    pub pyramid: FeaturePyramid,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Per task, whether each object is unknown at that task.
    pub fn unknown_flags(&self, schedule: &TaskSchedule) -> Vec<Vec<bool>> {
        self.objects
            .iter()
            .map(|o| {
                (1..=schedule.num_tasks())
                    .map(|t| !schedule.is_known_at(&o.class_name, t))
                    .collect()
            })
            .collect()
    }
}

fn sample_box(rng: &mut ChaCha8Rng, spec: &WorldSpec) -> BBox {
    let long = rng.random_range(spec.box_side.0..=spec.box_side.1);
    let short_min = ((f64::from(long) * spec.min_aspect).ceil() as u32).clamp(1, long);
    let short = rng.random_range(short_min..=long);
    let (w, h) = if rng.random_bool(0.5) {
        (long, short)
    } else {
        (short, long)
    };
    let x = rng.random_range(0..=spec.image_size - w);
    let y = rng.random_range(0..=spec.image_size - h);
    BBox::new(f64::from(x), f64::from(y), f64::from(x + w), f64::from(y + h))
}

/// Deterministic scene `index` of `split`.
pub fn generate_scene(world: &World, split: Split, index: usize) -> Result<Scene> {
    let spec = &world.spec;
    let mut rng = rng_for(world.seed, &format!("world/scene/{}/{index}", split.name()));
    let geometry = spec.geometry();
    let rule = spec.level_rule()?;
    let dim = spec.dim;

    let n_boxes = rng.random_range(spec.boxes_per_scene.0..=spec.boxes_per_scene.1);
    let known: Vec<&WorldClass> = world.known_classes().collect();
    let unknown: Vec<&WorldClass> = world.unknown_classes().collect();
    let mut objects: Vec<SceneObject> = Vec::new();
    if !known.is_empty() || !unknown.is_empty() {
        for _ in 0..n_boxes {
            let placed = (0..MAX_BOX_TRIES).find_map(|_| {
                let b = sample_box(&mut rng, spec);
                let level = rule.level_of(&b)?;
                if objects.iter().any(|o| o.bbox.intersects(&b)) || geometry[level].cells_in(&b).is_empty() {
                    return None;
                }
                Some((b, level))
            });
            let Some((bbox, level)) = placed else { break };
            let pick_unknown = !unknown.is_empty() && (known.is_empty() || rng.random_bool(spec.unknown_ratio));
            let pool = if pick_unknown { &unknown } else { &known };
            let class = pool[rng.random_range(0..pool.len())];
            objects.push(SceneObject {
                bbox,
                class_name: class.name.clone(),
                level,
            });
        }
    }

    let prototypes: Vec<&[f64]> = world.classes.iter().map(|c| c.prototype.as_slice()).collect();
    let mut layers = Vec::with_capacity(geometry.len());
    for (j, g) in geometry.iter().enumerate() {
        let mut owner: Vec<Option<usize>> = vec![None; g.len()];
        for (k, o) in objects.iter().enumerate() {
            if o.level == j {
                for cell in g.cells_in(&o.bbox) {
                    owner[cell] = Some(k);
                }
            }
        }
        let mut features = Vec::with_capacity(g.len() * dim);
        let mut boxes = Vec::with_capacity(g.len());
        for (cell, own) in owner.iter().enumerate() {
            match own {
                Some(k) => {
                    let o = &objects[*k];
                    let proto = &world.class(&o.class_name).expect("scene class exists").prototype;
                    let v = unit(
                        proto
                            .iter()
                            .map(|p| {
                                let n: f64 = StandardNormal.sample(&mut rng);
                                p + spec.noise_sigma * n
                            })
                            .collect::<Vec<f64>>(),
                    );
                    features.extend(v.iter().map(|&x| x as f32));
                    boxes.push(jittered(&mut rng, &o.bbox, spec.box_jitter));
                }
                None => {
                    let mut tries = 0;
                    let v = loop {
                        tries += 1;
                        if tries > MAX_DRAWS {
                            return Err(Error::InfeasibleSpec(
                                "no background direction avoids every prototype".into(),
                            ));
                        }
                        let v = unit(gaussian(&mut rng, dim));
                        if prototypes.iter().all(|p| dot(p, &v) < spec.background_max_cos) {
                            break v;
                        }
                    };
                    features.extend(v.iter().map(|&x| x as f32));
                    let (cx, cy) = g.center_of(cell);
                    let half = f64::from(g.stride) / 8.0;
                    boxes.push([
                        (cx - half) as f32,
                        (cy - half) as f32,
                        (cx + half) as f32,
                        (cy + half) as f32,
                    ]);
                }
            }
        }
        layers.push(PyramidLayer::new(*g, dim, features, boxes)?);
    }
    Ok(Scene {
        scene_id: scene_id(split, index),
        split,
        index,
        pyramid: FeaturePyramid::new(dim, layers)?,
        objects,
    })
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, jitter: f64) -> [f32; 4] {
    if jitter == 0.0 {
        return [b.x1 as f32, b.y1 as f32, b.x2 as f32, b.y2 as f32];
    }
    let (w, h) = (b.width(), b.height());
    let mut d = |s: f64| rng.random_range(-jitter..=jitter) * s;
    let (x1, y1, x2, y2) = (b.x1 + d(w), b.y1 + d(h), b.x2 + d(w), b.y2 + d(h));
    // keep the jittered box well formed
    let (x1, x2) = if x1 < x2 { (x1, x2) } else { (b.x1, b.x2) };
    let (y1, y2) = if y1 < y2 { (y1, y2) } else { (b.y1, b.y2) };
    [x1 as f32, y1 as f32, x2 as f32, y2 as f32]
}

pub fn generate_split(world: &World, split: Split) -> Result<Vec<Scene>> {
    (0..split.size(&world.spec.scenes))
        .map(|i| generate_scene(world, split, i))
        .collect()
}
