//! Synthetic compositional feature maps with known primitive structure.
//!
//! A pool of `M` nonnegative vectors plays the role of true primitives.
//! Each class owns `m` of them; each of its samples has `shared` patches
//! that are noisy copies of the class's vectors and `distractors` patches
//! that are either noisy copies of other pool vectors or pure noise. Base
//! and incremental classes draw from the same pool, so primitives are
//! reusable across sessions by construction.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{
    Annotations, ClassEntry, ClassPrimitives, Dataset, Manifest, SampleAnnotation, SampleRecord,
    Split,
};
use crate::cka::FeatureMap;
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rng::substream;
use crate::ClassId;

pub const POOL_FILE: &str = "pool.ckat";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Pool size `M`.
    pub pool_size: usize,
    /// True primitives per class `m`.
    pub prims_per_class: usize,
    pub shared: usize,
    pub distractors: usize,
    /// Per-channel noise standard deviation.
    pub sigma: f64,
    pub dim: usize,
    pub base_classes: usize,
    pub sessions: usize,
    pub classes_per_session: usize,
    /// Training samples per novel class.
    pub shots: usize,
    /// Training samples per base class.
    pub base_train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pool_size: 30,
            prims_per_class: 4,
            shared: 10,
            distractors: 6,
            sigma: 0.1,
            dim: 32,
            base_classes: 20,
            sessions: 2,
            classes_per_session: 5,
            shots: 5,
            base_train_per_class: 50,
            test_per_class: 50,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn patches(&self) -> usize {
        self.shared + self.distractors
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.sessions * self.classes_per_session
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("synthetic config: {msg}")));
        if self.prims_per_class == 0 || self.prims_per_class > self.pool_size {
            return bad("need 1 <= prims_per_class <= pool_size");
        }
        if self.patches() == 0 {
            return bad("need at least one patch per sample");
        }
        if self.shared == 0 {
            return bad("need at least one shared patch per sample");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be non-negative");
        }
        if self.base_classes == 0 {
            return bad("need at least one base class");
        }
        if self.sessions > 0 && self.classes_per_session == 0 {
            return bad("incremental sessions need classes");
        }
        if self.shots == 0 || self.base_train_per_class == 0 {
            return bad("need at least one training sample per class");
        }
        Ok(())
    }
}

struct Patch {
    values: Vec<f64>,
    shared: bool,
    source: Option<usize>,
}

fn noisy_copy<R: Rng>(v: &[f64], noise: &Normal<f64>, sigma: f64, rng: &mut R) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let e = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (x + e).abs()
        })
        .collect()
}

/// Generates the dataset, its ground-truth annotations and the pool matrix.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, Matrix)> {
    cfg.validate()?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, cfg.sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let mut rng = substream(cfg.seed, "synth-pool", 0);
    let pool_data: Vec<f64> = (0..cfg.pool_size * cfg.dim)
        .map(|_| f64::abs(std_normal.sample(&mut rng)))
        .collect();
    let pool = Matrix::new(cfg.pool_size, cfg.dim, pool_data)?;

    let mut classes = Vec::with_capacity(cfg.total_classes());
    let mut class_prims: Vec<Vec<usize>> = Vec::with_capacity(cfg.total_classes());
    let mut base_union = vec![false; cfg.pool_size];
    for c in 0..cfg.total_classes() {
        let session = if c < cfg.base_classes {
            0
        } else {
            1 + (c - cfg.base_classes) / cfg.classes_per_session
        };
        let mut rng = substream(cfg.seed, "synth-class", c as u64);
        let mut prims = sample(&mut rng, cfg.pool_size, cfg.prims_per_class).into_vec();
        if session == 0 {
            prims.iter().for_each(|&p| base_union[p] = true);
        } else if !prims.iter().any(|&p| base_union[p]) {
            let shared: Vec<usize> = (0..cfg.pool_size)
                .filter(|&p| base_union[p] && !prims.contains(&p))
                .collect();
            let slot = rng.random_range(0..prims.len());
            prims[slot] = shared[rng.random_range(0..shared.len())];
        }
        prims.sort_unstable();
        classes.push(ClassEntry {
            id: ClassId(c as u32),
            session: session as u32,
        });
        class_prims.push(prims);
    }

    let mut records = Vec::new();
    let mut maps = Vec::new();
    let mut notes = Vec::new();
    let mut counters = std::collections::BTreeMap::<(Split, u32), usize>::new();
    let mut sample_no = 0u64;
    for split in [Split::Train, Split::Test] {
        for (c, entry) in classes.iter().enumerate() {
            let count = match (split, entry.session) {
                (Split::Test, _) => cfg.test_per_class,
                (Split::Train, 0) => cfg.base_train_per_class,
                (Split::Train, _) => cfg.shots,
            };
            let own = &class_prims[c];
            let others: Vec<usize> = (0..cfg.pool_size).filter(|p| !own.contains(p)).collect();
            for i in 0..count {
                let mut rng = substream(cfg.seed, "synth-sample", sample_no);
                sample_no += 1;
                let mut patches: Vec<Patch> = Vec::with_capacity(cfg.patches());
                for _ in 0..cfg.shared {
                    let p = own[rng.random_range(0..own.len())];
                    patches.push(Patch {
                        values: noisy_copy(pool.row(p), &noise, cfg.sigma, &mut rng),
                        shared: true,
                        source: Some(p),
                    });
                }
                for _ in 0..cfg.distractors {
                    let from_pool = !others.is_empty() && rng.random_bool(0.5);
                    patches.push(if from_pool {
                        let p = others[rng.random_range(0..others.len())];
                        Patch {
                            values: noisy_copy(pool.row(p), &noise, cfg.sigma, &mut rng),
                            shared: false,
                            source: Some(p),
                        }
                    } else {
                        Patch {
                            values: (0..cfg.dim)
                                .map(|_| f64::abs(std_normal.sample(&mut rng)))
                                .collect(),
                            shared: false,
                            source: None,
                        }
                    });
                }
                patches.shuffle(&mut rng);
                let id = format!("{}-c{}-{i}", split.name(), entry.id);
                let slot = counters.entry((split, entry.session)).or_insert(0);
                records.push(SampleRecord {
                    id: id.clone(),
                    path: Manifest::tensor_path(split, entry.session),
                    index: *slot,
                    label: entry.id,
                    session: entry.session,
                    split,
                });
                *slot += 1;
                notes.push(SampleAnnotation {
                    id: id.clone(),
                    shared: patches.iter().map(|p| p.shared).collect(),
                    source: patches.iter().map(|p| p.source).collect(),
                });
                let x = Matrix::new(
                    cfg.patches(),
                    cfg.dim,
                    patches.into_iter().flat_map(|p| p.values).collect(),
                )?;
                maps.push(FeatureMap::new(id, entry.id, entry.session, x)?);
            }
        }
    }

    let manifest = Manifest {
        samples: records,
        annotations: Some(Annotations {
            pool_path: POOL_FILE.into(),
            class_primitives: classes
                .iter()
                .zip(&class_prims)
                .map(|(c, p)| ClassPrimitives {
                    class: c.id,
                    pool: p.clone(),
                })
                .collect(),
            samples: notes,
        }),
        classes,
    };
    Ok((Dataset::new(manifest, maps)?, pool))
}

/// Saves a generated dataset together with its pool tensor.
pub fn save_synth(dir: &std::path::Path, ds: &Dataset, pool: &Matrix) -> Result<()> {
    ds.save(dir)?;
    super::tensor::write_tensor(
        &dir.join(POOL_FILE),
        &super::tensor::Tensor::from_matrix(pool),
    )
}
