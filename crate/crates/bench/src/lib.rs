//! Seeded random inputs shared by the benchmarks.

use ckafscil::losses::{ClassifierWeights, TrainableMask};
use ckafscil::primitives::DonorMap;
use ckafscil::rng::substream;
use ckafscil::{ClassId, FeatureMap, Matrix, PrimitiveBank};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let n = Normal::new(0.0, 1.0).unwrap();
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| n.sample(rng)).collect(),
    )
    .unwrap()
}

/// Non-negative maps, like post-activation patch features.
pub fn feature_maps(
    seed: u64,
    count: usize,
    patches: usize,
    dim: usize,
    classes: usize,
) -> Vec<FeatureMap> {
    let mut rng = substream(seed, "bench-maps", 0);
    (0..count)
        .map(|i| {
            let m = normal_matrix(&mut rng, patches, dim);
            let x = Matrix::new(patches, dim, m.data().iter().map(|v| v.abs()).collect()).unwrap();
            let label = ClassId((i % classes) as u32);
            FeatureMap::new(format!("b{i}"), label, 0, x).unwrap()
        })
        .collect()
}

/// A trainable bank and prototype rows for `classes` classes, with base-pool donors.
pub struct Model {
    pub bank: PrimitiveBank,
    pub weights: ClassifierWeights,
    pub donors: DonorMap,
    pub mask: TrainableMask,
}

pub fn model(seed: u64, classes: usize, n_prims: usize, dim: usize) -> Model {
    let mut rng = substream(seed, "bench-bank", 0);
    let ids: Vec<ClassId> = (0..classes as u32).map(ClassId).collect();
    let blocks = (0..classes)
        .map(|_| normal_matrix(&mut rng, n_prims, dim))
        .collect();
    let bank = PrimitiveBank::new(ids.clone(), blocks, vec![false; classes]).unwrap();
    let weights = ClassifierWeights::new(
        ids,
        normal_matrix(&mut rng, classes, dim),
        vec![false; classes],
    )
    .unwrap();
    let mask = TrainableMask::from_frozen(&bank, &weights);
    Model {
        bank,
        weights,
        donors: DonorMap::base_pool(&vec![true; classes]),
        mask,
    }
}
