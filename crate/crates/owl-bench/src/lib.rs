//! Shared input generators for the criterion benches.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use owl_core::boxes::AnnotatedBox;
use owl_core::boxes::BoundingBox;
use owl_core::cluster::{FeatureVector, PrototypeSet};
use owl_core::eval::DetectionRecord;
use owl_core::{ClassId, ImageId};

/// Random prototypes and a query feature for clustering benches.
pub fn clustering_inputs(
    dim: usize,
    classes: u32,
    seed: u64,
) -> (FeatureVector, ClassId, PrototypeSet) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut protos = PrototypeSet::new();
    for c in 0..=classes {
        let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
        protos.set(c, FeatureVector::new(p));
    }
    let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
    (FeatureVector::new(f), rng.gen_range(0..=classes), protos)
}

/// Inverse-CDF Weibull samples for the fitting bench.
pub fn weibull_samples(shape: f64, scale: f64, location: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(0.0..1.0);
            location + scale * (-(1.0 - u).ln()).powf(1.0 / shape)
        })
        .collect()
}

/// Random detections and ground truths spread over many images.
pub fn detection_scene(
    n_images: usize,
    dets_per_image: usize,
    gts_per_image: usize,
    classes: u32,
    seed: u64,
) -> (
    Vec<DetectionRecord>,
    std::collections::BTreeMap<ImageId, Vec<AnnotatedBox>>,
) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut dets = Vec::new();
    let mut gts = std::collections::BTreeMap::new();
    for image_id in 0..n_images as ImageId {
        let mut image_gts = Vec::new();
        for _ in 0..gts_per_image {
            image_gts.push(AnnotatedBox {
                bbox: random_box(&mut rng),
                label: rng.gen_range(1..=classes),
            });
        }
        for _ in 0..dets_per_image {
            let on_gt = rng.gen_bool(0.7) && !image_gts.is_empty();
            let (bbox, label) = if on_gt {
                let gt = image_gts[rng.gen_range(0..image_gts.len())];
                let mut b = gt.bbox;
                b.cx += rng.gen_range(-0.5..0.5);
                b.cy += rng.gen_range(-0.5..0.5);
                (b, gt.label)
            } else {
                (random_box(&mut rng), rng.gen_range(1..=classes))
            };
            dets.push(DetectionRecord {
                image_id,
                bbox,
                label,
                confidence: rng.gen_range(0.0..1.0),
            });
        }
        gts.insert(image_id, image_gts);
    }
    (dets, gts)
}

fn random_box(rng: &mut ChaCha12Rng) -> BoundingBox {
    BoundingBox::new(
        rng.gen_range(5.0..95.0),
        rng.gen_range(5.0..95.0),
        rng.gen_range(2.0..20.0),
        rng.gen_range(2.0..20.0),
    )
}
