//! Deterministic synthetic world generation.
//!
//! Class latents are isotropic Gaussians whose means sit on a sphere with a
//! pairwise-distance guarantee. Scenes hold a handful of objects with boxes;
//! proposals are jittered copies of the object boxes plus Poisson background
//! boxes, with objectness derived from the best overlap against any object.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::boxes::{iou, AnnotatedBox, BoundingBox};
use crate::cluster::FeatureVector;
use crate::protocol::{InstanceRecord, ProtocolError, TaskSchedule};
use crate::{ClassId, ImageId, UNKNOWN_CLASS};

/// Parameters of the synthetic world. The seed fixes everything.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldConfig {
    /// Latent feature dimension.
    pub dim: usize,
    /// Labelled training instances per current-task class.
    pub train_per_class: usize,
    /// Held-out validation instances per class (known and future).
    pub val_per_class: usize,
    /// Test instances per class (all scheduled classes).
    pub test_per_class: usize,
    /// Minimum pairwise distance between class means.
    pub separation: f64,
    /// Isotropic feature noise around the class mean.
    pub feature_noise: f64,
    /// Standard deviation of the proposal center jitter (scene units).
    pub box_jitter: f64,
    /// Expected background proposals per scene (Poisson).
    pub background_rate: f64,
    /// Side length of the square scene.
    pub scene_extent: f64,
    /// Upper bound on objects per scene.
    pub max_per_scene: usize,
    /// Unlabelled future-class objects mixed into training scenes, as a
    /// fraction of `train_per_class` per future class.
    pub unknown_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            dim: 8,
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 50,
            separation: 16.0,
            feature_noise: 0.6,
            box_jitter: 2.0,
            background_rate: 2.0,
            scene_extent: 100.0,
            max_per_scene: 3,
            unknown_rate: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidWorldConfig(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("train and test instances per class must be positive".into());
        }
        if self.separation.is_nan() || self.separation <= 0.0 {
            return bad(format!("separation must be > 0, got {}", self.separation));
        }
        if self.feature_noise.is_nan() || self.feature_noise <= 0.0 {
            return bad(format!("feature_noise must be > 0, got {}", self.feature_noise));
        }
        if self.box_jitter.is_nan() || self.box_jitter <= 0.0 {
            return bad(format!("box_jitter must be > 0, got {}", self.box_jitter));
        }
        if self.background_rate < 0.0 {
            return bad("background_rate must be >= 0".into());
        }
        if self.scene_extent.is_nan() || self.scene_extent <= 0.0 {
            return bad("scene_extent must be > 0".into());
        }
        if self.max_per_scene == 0 {
            return bad("max_per_scene must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.unknown_rate) {
            return bad(format!("unknown_rate must lie in [0, 1], got {}", self.unknown_rate));
        }
        Ok(())
    }
}

/// An object placed in a scene. `label` is the split-time label: 0 marks an
/// object that is unlabelled (training mix-ins) or unknown (val/test futures);
/// `true_class` is the generator-side identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub true_class: ClassId,
    pub label: ClassId,
    pub bbox: BoundingBox,
    pub feature: FeatureVector,
}

/// A region proposal with its objectness and the latent the backbone would
/// emit for the region.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneProposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub feature: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: ImageId,
    pub objects: Vec<SceneObject>,
    pub proposals: Vec<SceneProposal>,
}

impl Scene {
    /// Ground truths carrying a real (non-zero) label.
    pub fn labelled_gts(&self) -> Vec<AnnotatedBox> {
        self.objects
            .iter()
            .filter(|o| o.label != UNKNOWN_CLASS)
            .map(|o| AnnotatedBox {
                bbox: o.bbox,
                label: o.label,
            })
            .collect()
    }

    /// All ground truths with their split-time labels (0 for unknown).
    pub fn gts(&self) -> Vec<AnnotatedBox> {
        self.objects
            .iter()
            .map(|o| AnnotatedBox {
                bbox: o.bbox,
                label: o.label,
            })
            .collect()
    }

    /// Proposals stripped to box + objectness, for the auto-labelling ops.
    pub fn plain_proposals(&self) -> Vec<crate::boxes::Proposal> {
        self.proposals
            .iter()
            .map(|p| crate::boxes::Proposal {
                bbox: p.bbox,
                objectness: p.objectness,
            })
            .collect()
    }

    /// Labelled objects as training instances.
    pub fn labelled_instances(&self) -> Vec<InstanceRecord> {
        self.objects
            .iter()
            .filter(|o| o.label != UNKNOWN_CLASS)
            .map(|o| InstanceRecord {
                image_id: self.image_id,
                annotated: AnnotatedBox {
                    bbox: o.bbox,
                    label: o.label,
                },
                feature: o.feature.clone(),
            })
            .collect()
    }
}

/// Train, validation, and test scenes of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Scene>,
    pub validation: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// The generated world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub tasks: Vec<TaskData>,
    pub class_means: BTreeMap<ClassId, FeatureVector>,
    pub config: SyntheticWorldConfig,
}

/// Place one mean per class on a sphere of radius `separation`, enforcing the
/// pairwise-distance floor by rejection; the radius grows if placement stalls.
///
/// Pairs are also kept away from antipodal alignment (pairwise angles at most
/// 120 degrees), which keeps every class in the quasi-orthogonal regime a
/// linear one-vs-rest head handles cleanly.
fn place_class_means(
    classes: &[ClassId],
    cfg: &SyntheticWorldConfig,
    rng: &mut ChaCha12Rng,
) -> Result<BTreeMap<ClassId, FeatureVector>, ProtocolError> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut means: BTreeMap<ClassId, FeatureVector> = BTreeMap::new();
    let mut radius = cfg.separation.max(1e-9);
    let mut attempts_at_radius = 0usize;
    let mut total_attempts = 0usize;
    for &c in classes {
        loop {
            total_attempts += 1;
            if total_attempts > 1_000_000 {
                return Err(ProtocolError::InvalidWorldConfig(format!(
                    "cannot place {} class means at separation {} in dimension {}",
                    classes.len(),
                    cfg.separation,
                    cfg.dim
                )));
            }
            let mut dir: Vec<f64> = (0..cfg.dim).map(|_| normal.sample(rng)).collect();
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            dir.iter_mut().for_each(|v| *v *= radius / norm);
            let candidate = FeatureVector::new(dir);
            // Angle window: cos within [-0.5, 1 - separation^2 / (2 radius^2)].
            let max_dist_sq = 3.0 * radius * radius;
            let ok = means.values().all(|m| {
                let d = crate::cluster::euclidean_distance(m, &candidate).unwrap();
                d >= cfg.separation && d * d <= max_dist_sq
            });
            if ok {
                means.insert(c, candidate);
                attempts_at_radius = 0;
                break;
            }
            attempts_at_radius += 1;
            if attempts_at_radius > 2_000 {
                radius *= 1.25;
                attempts_at_radius = 0;
            }
        }
    }
    Ok(means)
}

/// One entry of a split's instance budget.
struct PoolItem {
    true_class: ClassId,
    label: ClassId,
}

struct SceneFactory<'a> {
    cfg: &'a SyntheticWorldConfig,
    means: &'a BTreeMap<ClassId, FeatureVector>,
    next_image: ImageId,
}

impl<'a> SceneFactory<'a> {
    fn sample_feature(&self, class: ClassId, rng: &mut ChaCha12Rng) -> FeatureVector {
        let normal = Normal::new(0.0, self.cfg.feature_noise).unwrap();
        let mean = &self.means[&class];
        FeatureVector::new(
            mean.values()
                .iter()
                .map(|m| m + normal.sample(rng))
                .collect(),
        )
    }

    fn background_feature(&self, rng: &mut ChaCha12Rng) -> FeatureVector {
        let normal = Normal::new(0.0, self.cfg.feature_noise).unwrap();
        FeatureVector::new((0..self.cfg.dim).map(|_| normal.sample(rng)).collect())
    }

    fn sample_box(&self, rng: &mut ChaCha12Rng) -> BoundingBox {
        let e = self.cfg.scene_extent;
        BoundingBox::new(
            rng.gen_range(0.15 * e..0.85 * e),
            rng.gen_range(0.15 * e..0.85 * e),
            rng.gen_range(0.08 * e..0.25 * e),
            rng.gen_range(0.08 * e..0.25 * e),
        )
    }

    fn objectness(&self, bbox: &BoundingBox, objects: &[SceneObject], rng: &mut ChaCha12Rng) -> f64 {
        let best = objects
            .iter()
            .map(|o| iou(bbox, &o.bbox))
            .fold(0.0f64, f64::max);
        let noise = Normal::new(0.0, 0.02).unwrap().sample(rng);
        (best + noise).clamp(0.0, 1.0)
    }

    /// Group a shuffled pool into scenes and attach proposals.
    fn build_scenes(&mut self, mut pool: Vec<PoolItem>, rng: &mut ChaCha12Rng) -> Vec<Scene> {
        // Fisher-Yates with explicit draws keeps the stream layout obvious.
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        let mut scenes = Vec::new();
        let mut cursor = 0;
        while cursor < pool.len() {
            let size = rng
                .gen_range(1..=self.cfg.max_per_scene)
                .min(pool.len() - cursor);
            let image_id = self.next_image;
            self.next_image += 1;

            let mut objects = Vec::with_capacity(size);
            for item in &pool[cursor..cursor + size] {
                objects.push(SceneObject {
                    true_class: item.true_class,
                    label: item.label,
                    bbox: self.sample_box(rng),
                    feature: self.sample_feature(item.true_class, rng),
                });
            }
            cursor += size;

            let mut proposals = Vec::new();
            let jitter = Normal::new(0.0, self.cfg.box_jitter).unwrap();
            let scale_jitter = Normal::new(0.0, 0.05).unwrap();
            for o in &objects {
                let bbox = BoundingBox::new(
                    o.bbox.cx + jitter.sample(rng),
                    o.bbox.cy + jitter.sample(rng),
                    (o.bbox.w * (1.0 + scale_jitter.sample(rng))).max(1e-3),
                    (o.bbox.h * (1.0 + scale_jitter.sample(rng))).max(1e-3),
                );
                proposals.push(SceneProposal {
                    objectness: self.objectness(&bbox, &objects, rng),
                    feature: o.feature.clone(),
                    bbox,
                });
            }
            let n_background = if self.cfg.background_rate > 0.0 {
                Poisson::new(self.cfg.background_rate).unwrap().sample(rng) as usize
            } else {
                0
            };
            for _ in 0..n_background {
                let bbox = self.sample_box(rng);
                proposals.push(SceneProposal {
                    objectness: self.objectness(&bbox, &objects, rng),
                    feature: self.background_feature(rng),
                    bbox,
                });
            }
            scenes.push(Scene {
                image_id,
                objects,
                proposals,
            });
        }
        scenes
    }
}

/// Generate per-task train/validation/test scenes, deterministically in the
/// seed.
///
/// Training scenes label only the current task's classes; future-class objects
/// are mixed in unlabelled so that auto-labelling has real unknowns to find.
/// Validation and test scenes label every class introduced so far and mark
/// future-task objects as unknown (label 0).
pub fn generate_world(
    cfg: &SyntheticWorldConfig,
    schedule: &TaskSchedule,
) -> Result<World, ProtocolError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let classes: Vec<ClassId> = schedule.all_classes().into_iter().collect();
    let class_means = place_class_means(&classes, cfg, &mut rng)?;

    let mut factory = SceneFactory {
        cfg,
        means: &class_means,
        next_image: 0,
    };

    let unknown_per_class = (cfg.unknown_rate * cfg.train_per_class as f64).round() as usize;
    let mut tasks = Vec::with_capacity(schedule.n_tasks());
    for t in 0..schedule.n_tasks() {
        let current = schedule.task_classes(t);
        let known = schedule.known_through(t);
        let future = schedule.future_classes(t);

        let mut train_pool = Vec::new();
        for &c in current {
            for _ in 0..cfg.train_per_class {
                train_pool.push(PoolItem {
                    true_class: c,
                    label: c,
                });
            }
        }
        for &u in &future {
            for _ in 0..unknown_per_class {
                train_pool.push(PoolItem {
                    true_class: u,
                    label: UNKNOWN_CLASS,
                });
            }
        }

        let mut val_pool = Vec::new();
        for &c in &known {
            for _ in 0..cfg.val_per_class {
                val_pool.push(PoolItem {
                    true_class: c,
                    label: c,
                });
            }
        }
        for &u in &future {
            for _ in 0..cfg.val_per_class {
                val_pool.push(PoolItem {
                    true_class: u,
                    label: UNKNOWN_CLASS,
                });
            }
        }

        let mut test_pool = Vec::new();
        for &c in &known {
            for _ in 0..cfg.test_per_class {
                test_pool.push(PoolItem {
                    true_class: c,
                    label: c,
                });
            }
        }
        for &u in &future {
            for _ in 0..cfg.test_per_class {
                test_pool.push(PoolItem {
                    true_class: u,
                    label: UNKNOWN_CLASS,
                });
            }
        }

        tasks.push(TaskData {
            train: factory.build_scenes(train_pool, &mut rng),
            validation: factory.build_scenes(val_pool, &mut rng),
            test: factory.build_scenes(test_pool, &mut rng),
        });
    }

    Ok(World {
        tasks,
        class_means,
        config: cfg.clone(),
    })
}
