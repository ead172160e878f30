//! Per-class primitive sets and the two ways of rebuilding a class's
//! primitives from other classes: soft attention over donor primitives
//! (differentiable, used in training) and hard nearest-donor overwrite (used
//! to probe how reusable learned primitives are).

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cka::FeatureMap;
use crate::error::{Error, Result};
use crate::numkit::{dot, squared_distance, stable_softmax, Matrix};
use crate::rng::substream;
use crate::ClassId;

/// How a fresh class block is filled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitScheme {
    /// I.i.d. `normal(0, σ²)` entries.
    Gaussian { sigma: f64 },
    /// Cluster centers of the class's pooled patch rows.
    #[default]
    Kmeans,
}

/// Primitive sets for every registered class, all `n_prims × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveBank {
    classes: Vec<ClassId>,
    blocks: Vec<Matrix>,
    frozen: Vec<bool>,
    n_prims: usize,
    dim: usize,
}

impl PrimitiveBank {
    pub fn new(classes: Vec<ClassId>, blocks: Vec<Matrix>, frozen: Vec<bool>) -> Result<Self> {
        if classes.len() != blocks.len() || classes.len() != frozen.len() {
            return Err(Error::invalid(
                "class, block and frozen lists differ in length",
            ));
        }
        let first = blocks
            .first()
            .ok_or_else(|| Error::invalid("a primitive bank needs at least one class"))?;
        let (n_prims, dim) = (first.rows(), first.cols());
        if blocks
            .iter()
            .any(|b| b.rows() != n_prims || b.cols() != dim)
        {
            return Err(Error::invalid("class blocks differ in shape"));
        }
        let mut seen = classes.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate class id"));
        }
        Ok(Self {
            classes,
            blocks,
            frozen,
            n_prims,
            dim,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn n_prims(&self) -> usize {
        self.n_prims
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == id)
    }

    pub fn block(&self, idx: usize) -> &Matrix {
        &self.blocks[idx]
    }

    pub fn block_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.blocks[idx]
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn block_for(&self, id: ClassId) -> Option<&Matrix> {
        self.index_of(id).map(|i| &self.blocks[i])
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        self.frozen[idx]
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    /// Row `k` of class `idx`'s block.
    pub fn primitive(&self, idx: usize, k: usize) -> &[f64] {
        self.blocks[idx].row(k)
    }

    /// All blocks flattened `class, primitive, channel` (the `|Y|×N×d` tensor layout).
    pub fn flat(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.data().iter().copied())
            .collect()
    }
}

fn pooled_rows(samples: &[FeatureMap], class: ClassId, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for s in samples.iter().filter(|s| s.label == class) {
        if s.channels() != dim {
            return Err(Error::invalid(format!(
                "sample {} has {} channels, bank expects {dim}",
                s.sample_id,
                s.channels()
            )));
        }
        rows.extend(s.x().row_iter().map(<[f64]>::to_vec));
    }
    Ok(rows)
}

fn init_block(
    class: ClassId,
    n_prims: usize,
    dim: usize,
    scheme: &InitScheme,
    samples: &[FeatureMap],
    seed: u64,
) -> Result<Matrix> {
    let mut rng = substream(seed, "init-primitives", u64::from(class.0));
    match *scheme {
        InitScheme::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::invalid(format!("gaussian init: {e}")))?;
            let data = (0..n_prims * dim)
                .map(|_| normal.sample(&mut rng))
                .collect();
            Matrix::new(n_prims, dim, data)
        }
        InitScheme::Kmeans => {
            let rows = pooled_rows(samples, class, dim)?;
            kmeans(&rows, n_prims, &mut rng).map_err(|e| match e {
                Error::InsufficientData(msg) => {
                    Error::InsufficientData(format!("class {class}: {msg}"))
                }
                other => other,
            })
        }
    }
}

/// Builds a bank with one freshly initialized, unfrozen block per class.
/// `samples` is only consulted by the k-means scheme.
pub fn init_primitive_bank(
    classes: &[ClassId],
    n_prims: usize,
    dim: usize,
    scheme: &InitScheme,
    samples: &[FeatureMap],
    seed: u64,
) -> Result<PrimitiveBank> {
    if n_prims == 0 {
        return Err(Error::invalid("need at least one primitive per class"));
    }
    if dim < 2 {
        return Err(Error::invalid("primitives need at least 2 channels"));
    }
    let blocks = classes
        .iter()
        .map(|&c| init_block(c, n_prims, dim, scheme, samples, seed))
        .collect::<Result<Vec<_>>>()?;
    PrimitiveBank::new(classes.to_vec(), blocks, vec![false; classes.len()])
}

/// Freezes every existing block and appends fresh blocks for `new_classes`.
pub fn extend_bank(
    bank: &PrimitiveBank,
    new_classes: &[ClassId],
    scheme: &InitScheme,
    shots: &[FeatureMap],
    seed: u64,
) -> Result<PrimitiveBank> {
    let mut out = bank.clone();
    for (i, &c) in new_classes.iter().enumerate() {
        if bank.index_of(c).is_some() || new_classes[..i].contains(&c) {
            return Err(Error::invalid(format!("class {c} is already registered")));
        }
    }
    if new_classes.is_empty() {
        return Ok(out);
    }
    out.freeze_all();
    for &c in new_classes {
        let block = init_block(c, bank.n_prims, bank.dim, scheme, shots, seed)?;
        out.classes.push(c);
        out.blocks.push(block);
        out.frozen.push(false);
    }
    Ok(out)
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Points are sorted before clustering so the result does not depend on the
/// order they were supplied in. Ties go to the lowest index; empty clusters
/// are re-seeded with the point farthest from its current center.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Matrix> {
    const MAX_ITERS: usize = 100;
    if points.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} points for {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut pts: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    pts.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(pts[rng.random_range(0..pts.len())].to_vec());
    let mut d2: Vec<f64> = pts
        .iter()
        .map(|p| squared_distance(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            // Every point coincides with a center: duplicates are all that is left.
            centers.len() % pts.len()
        };
        centers.push(pts[pick].to_vec());
        for (w, p) in d2.iter_mut().zip(&pts) {
            *w = w.min(squared_distance(p, &centers[centers.len() - 1]));
        }
    }

    let nearest = |p: &[f64], centers: &[Vec<f64>]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, ctr) in centers.iter().enumerate() {
            let d = squared_distance(p, ctr);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };

    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        let mut dist = vec![0.0; pts.len()];
        for (i, p) in pts.iter().enumerate() {
            let (c, d) = nearest(p, &centers);
            dist[i] = d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in pts.iter().zip(&assign) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far =
                    (0..pts.len()).fold(0, |best, i| if dist[i] > dist[best] { i } else { best });
                centers[c] = pts[far].to_vec();
                dist[far] = 0.0;
                assign[far] = c;
                changed = true;
            } else {
                let n = counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s / n).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Matrix::new(k, dim, centers.concat())
}

/// A class's primitives rebuilt as attention-weighted mixtures of donor primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacedEntry {
    pub replaced: Matrix,
    /// One probability vector over the flattened donor pool per primitive.
    pub attention: Vec<Vec<f64>>,
}

/// Replaced primitive sets for every class of a bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacedBank {
    pub entries: Vec<ReplacedEntry>,
}

impl ReplacedBank {
    pub fn blocks(&self) -> impl Iterator<Item = &Matrix> {
        self.entries.iter().map(|e| &e.replaced)
    }
}

/// Donor class indices (into the bank) for every class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DonorMap(pub Vec<Vec<usize>>);

impl DonorMap {
    /// Every class draws from all base classes other than itself.
    /// `is_base[i]` marks base-session classes by bank index.
    pub fn base_pool(is_base: &[bool]) -> Self {
        let base: Vec<usize> = (0..is_base.len()).filter(|&i| is_base[i]).collect();
        DonorMap(
            (0..is_base.len())
                .map(|c| base.iter().copied().filter(|&b| b != c).collect())
                .collect(),
        )
    }

    pub fn for_class(&self, idx: usize) -> &[usize] {
        &self.0[idx]
    }
}

fn check_donors(bank: &PrimitiveBank, target: usize, donors: &[usize], gamma: f64) -> Result<()> {
    if donors.is_empty() {
        return Err(Error::invalid(format!(
            "class {} has an empty donor pool",
            bank.classes[target]
        )));
    }
    if donors.contains(&target) {
        return Err(Error::invalid("a class cannot donate to itself"));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(())
}

/// Donor classes' primitives stacked row-wise, in donor order.
pub(crate) fn donor_pool(bank: &PrimitiveBank, donors: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(donors.len() * bank.n_prims * bank.dim);
    for &c in donors {
        data.extend_from_slice(bank.blocks[c].data());
    }
    Matrix::from_raw(donors.len() * bank.n_prims, bank.dim, data)
}

/// Rebuilds every primitive of class `target` as
/// `Σ_k softmax(−γ‖P − Q_k‖²)_k · Q_k` over the donor pool `Q`.
pub fn attention_replace(
    bank: &PrimitiveBank,
    target: usize,
    donors: &[usize],
    gamma: f64,
) -> Result<ReplacedEntry> {
    check_donors(bank, target, donors, gamma)?;
    let pool: Vec<&[f64]> = donors
        .iter()
        .flat_map(|&c| bank.blocks[c].row_iter())
        .collect();
    let mut replaced = Matrix::zeros(bank.n_prims, bank.dim);
    let mut attention = Vec::with_capacity(bank.n_prims);
    for i in 0..bank.n_prims {
        let p = bank.primitive(target, i);
        let sims: Vec<f64> = pool.iter().map(|q| -squared_distance(p, q)).collect();
        let att = stable_softmax(&sims, gamma)?;
        let out = replaced.row_mut(i);
        for (a, q) in att.iter().zip(&pool) {
            out.iter_mut().zip(q.iter()).for_each(|(o, v)| *o += a * v);
        }
        attention.push(att);
    }
    Ok(ReplacedEntry {
        replaced,
        attention,
    })
}

/// [`attention_replace`] for every class, computed through matrix products:
/// the logits use `‖Q_k‖² − 2 P·Q_k`, which differs from the squared
/// distance by a per-row constant that softmax ignores.
pub fn replace_all(bank: &PrimitiveBank, donors: &DonorMap, gamma: f64) -> Result<ReplacedBank> {
    let entries = (0..bank.len())
        .map(|c| {
            let pool_ids = donors.for_class(c);
            check_donors(bank, c, pool_ids, gamma)?;
            let pool = donor_pool(bank, pool_ids);
            let qn: Vec<f64> = pool.row_iter().map(|q| dot(q, q)).collect();
            let cross = bank.blocks[c].matmul_t(&pool);
            let mut att = Matrix::zeros(bank.n_prims, pool.rows());
            let mut attention = Vec::with_capacity(bank.n_prims);
            for i in 0..bank.n_prims {
                let logits: Vec<f64> = cross
                    .row(i)
                    .iter()
                    .zip(&qn)
                    .map(|(x, q)| 2.0 * x - q)
                    .collect();
                let a = stable_softmax(&logits, gamma)?;
                att.row_mut(i).copy_from_slice(&a);
                attention.push(a);
            }
            Ok(ReplacedEntry {
                replaced: att.matmul(&pool),
                attention,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReplacedBank { entries })
}

/// Overwrites `⌈ratio·N⌉` randomly chosen primitives of each target class
/// with their Euclidean-nearest primitive among the donor classes.
pub fn hard_nearest_replace(
    bank: &PrimitiveBank,
    targets: &[ClassId],
    donors: &[ClassId],
    ratio: f64,
    seed: u64,
) -> Result<PrimitiveBank> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("ratio {ratio} outside [0, 1]")));
    }
    if targets.iter().any(|t| donors.contains(t)) {
        return Err(Error::invalid("donor and target classes overlap"));
    }
    let lookup = |c: &ClassId| {
        bank.index_of(*c)
            .ok_or_else(|| Error::invalid(format!("unknown class {c}")))
    };
    let donor_idx = donors.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    let pool: Vec<&[f64]> = donor_idx
        .iter()
        .flat_map(|&c| bank.blocks[c].row_iter())
        .collect();
    let count = ((ratio * bank.n_prims as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut out = bank.clone();
    if count == 0 || targets.is_empty() {
        return Ok(out);
    }
    if pool.is_empty() {
        return Err(Error::invalid("empty donor pool"));
    }
    for t in targets {
        let ti = lookup(t)?;
        let mut rng = substream(seed, "hard-replace", u64::from(t.0));
        let mut chosen = sample(&mut rng, bank.n_prims, count).into_vec();
        chosen.sort_unstable();
        for k in chosen {
            let p = bank.primitive(ti, k);
            let mut best = (0, f64::INFINITY);
            for (j, q) in pool.iter().enumerate() {
                let d = squared_distance(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            out.blocks[ti].row_mut(k).copy_from_slice(pool[best.0]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(blocks: Vec<Vec<Vec<f64>>>) -> PrimitiveBank {
        let n = blocks.len();
        PrimitiveBank::new(
            (0..n as u32).map(ClassId).collect(),
            blocks
                .iter()
                .map(|b| Matrix::from_rows(b).unwrap())
                .collect(),
            vec![false; n],
        )
        .unwrap()
    }

    fn sample_with_rows(id: &str, label: u32, rows: &[Vec<f64>]) -> FeatureMap {
        FeatureMap::new(id, ClassId(label), 0, Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn same_row_set(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.row_iter().all(|r| {
            b.row_iter()
                .any(|s| r.iter().zip(s).all(|(x, y)| (x - y).abs() <= tol))
        }) && a.rows() == b.rows()
    }

    #[test]
    fn gaussian_init_is_deterministic() {
        let ids = [ClassId(0), ClassId(5)];
        let scheme = InitScheme::Gaussian { sigma: 0.1 };
        let a = init_primitive_bank(&ids, 4, 3, &scheme, &[], 11).unwrap();
        let b = init_primitive_bank(&ids, 4, 3, &scheme, &[], 11).unwrap();
        assert_eq!(a, b);
        let c = init_primitive_bank(&ids, 4, 3, &scheme, &[], 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn kmeans_on_exactly_k_points_returns_them() {
        let rows = vec![
            vec![0.0, 1.0],
            vec![5.0, 2.0],
            vec![-3.0, 0.5],
            vec![1.0, 1.0],
        ];
        let s = sample_with_rows("a", 0, &rows);
        let b = init_primitive_bank(&[ClassId(0)], 4, 2, &InitScheme::Kmeans, &[s], 3).unwrap();
        assert!(same_row_set(
            b.block(0),
            &Matrix::from_rows(&rows).unwrap(),
            0.0
        ));
    }

    #[test]
    fn kmeans_on_separated_pairs_returns_midpoints() {
        // Brute force: with pairs 100 apart and width 0.2, the only optimal
        // 3-clustering groups each pair, so centers are the pair midpoints.
        let mids = [[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]];
        let mut rows = Vec::new();
        for m in &mids {
            rows.push(vec![m[0] - 0.1, m[1]]);
            rows.push(vec![m[0] + 0.1, m[1]]);
        }
        let s = sample_with_rows("a", 0, &rows);
        for seed in 0..5 {
            let b = init_primitive_bank(
                &[ClassId(0)],
                3,
                2,
                &InitScheme::Kmeans,
                std::slice::from_ref(&s),
                seed,
            )
            .unwrap();
            assert!(same_row_set(
                b.block(0),
                &Matrix::from_rows(&mids).unwrap(),
                1e-12
            ));
        }
    }

    #[test]
    fn kmeans_needs_enough_points() {
        let s = sample_with_rows("a", 0, &[vec![0.0, 1.0]]);
        let err = init_primitive_bank(&[ClassId(0)], 2, 2, &InitScheme::Kmeans, &[s], 0);
        assert!(matches!(err, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn extend_preserves_and_freezes_old_blocks() {
        let b = bank(vec![vec![vec![1.0, 2.0], vec![3.0, 0.0]]]);
        let same = extend_bank(&b, &[], &InitScheme::Kmeans, &[], 0).unwrap();
        assert_eq!(same, b);

        let shot = sample_with_rows("s", 7, &[vec![0.0, 1.0], vec![2.0, 2.0], vec![4.0, 1.0]]);
        let ext = extend_bank(&b, &[ClassId(7)], &InitScheme::Kmeans, &[shot], 0).unwrap();
        assert_eq!(ext.block(0), b.block(0));
        assert_eq!(ext.frozen(), &[true, false]);
        assert_eq!(ext.classes(), &[ClassId(0), ClassId(7)]);

        let dup = extend_bank(&b, &[ClassId(0)], &InitScheme::Kmeans, &[], 0);
        assert!(matches!(dup, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn extend_kmeans_ignores_shot_order() {
        let mut rng = substream(1, "test", 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let shots: Vec<FeatureMap> = (0..5)
            .map(|s| {
                let rows: Vec<Vec<f64>> = (0..16)
                    .map(|_| (0..4).map(|_| normal.sample(&mut rng)).collect())
                    .collect();
                sample_with_rows(&format!("s{s}"), 9, &rows)
            })
            .collect();
        let base = bank(vec![vec![vec![1.0, 0.0, 0.0, 0.0]; 3]]);
        let a = extend_bank(&base, &[ClassId(9)], &InitScheme::Kmeans, &shots, 4).unwrap();
        let mut rev = shots.clone();
        rev.reverse();
        let b = extend_bank(&base, &[ClassId(9)], &InitScheme::Kmeans, &rev, 4).unwrap();
        assert_eq!(a.block(1).rows(), 3);
        assert!(same_row_set(a.block(1), b.block(1), 0.0));
    }

    #[test]
    fn attention_replace_examples() {
        let b = bank(vec![
            vec![vec![0.0, 0.0]],
            vec![vec![1.0, 0.0]],
            vec![vec![3.0, 0.0]],
        ]);
        let single = attention_replace(&b, 0, &[1], 0.3).unwrap();
        assert_eq!(single.replaced.row(0), &[1.0, 0.0]);

        let e = attention_replace(&b, 0, &[1, 2], 1.0).unwrap();
        // softmax(-1, -9): e^-1 / (e^-1 + e^-9)
        let a0 = 1.0 / (1.0 + (-8f64).exp());
        assert!((e.attention[0][0] - a0).abs() < 1e-12);
        assert!((e.attention[0][0] - 0.999665).abs() < 1e-6);
        assert!((e.attention[0][1] - 0.000335).abs() < 1e-6);
        assert!((e.replaced.get(0, 0) - (a0 + 3.0 * (1.0 - a0))).abs() < 1e-12);
        assert!((e.replaced.get(0, 0) - 1.000670).abs() < 1e-6);

        let sharp = attention_replace(&b, 0, &[1, 2], 64.0).unwrap();
        assert!((sharp.replaced.get(0, 0) - 1.0).abs() < 1e-9);

        assert!(matches!(
            attention_replace(&b, 0, &[], 1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn batched_replacement_matches_reference() {
        let mut rng = substream(11, "batched", 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let blocks: Vec<Matrix> = (0..4)
            .map(|_| Matrix::new(3, 5, (0..15).map(|_| normal.sample(&mut rng)).collect()).unwrap())
            .collect();
        let bank =
            PrimitiveBank::new((0..4).map(ClassId).collect(), blocks, vec![false; 4]).unwrap();
        let donors = DonorMap::base_pool(&[true, true, true, false]);
        for gamma in [0.5, 4.0, 64.0] {
            let fast = replace_all(&bank, &donors, gamma).unwrap();
            for c in 0..4 {
                let slow = attention_replace(&bank, c, donors.for_class(c), gamma).unwrap();
                let e = &fast.entries[c];
                for (a, b) in e.replaced.data().iter().zip(slow.replaced.data()) {
                    assert!((a - b).abs() < 1e-10);
                }
                for (a, b) in e
                    .attention
                    .iter()
                    .flatten()
                    .zip(slow.attention.iter().flatten())
                {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn base_pool_excludes_self_and_novel() {
        let d = DonorMap::base_pool(&[true, true, true, false]);
        assert_eq!(d.for_class(0), &[1, 2]);
        assert_eq!(d.for_class(2), &[0, 1]);
        assert_eq!(d.for_class(3), &[0, 1, 2]);
    }

    #[test]
    fn hard_replace_examples() {
        let b = bank(vec![
            vec![
                vec![0.0, 0.0],
                vec![1.0, 1.0],
                vec![2.0, 0.0],
                vec![0.0, 3.0],
            ],
            vec![
                vec![9.0, 9.0],
                vec![-1.0, 0.0],
                vec![5.0, 5.0],
                vec![0.0, 7.0],
            ],
        ]);
        let r0 = hard_nearest_replace(&b, &[ClassId(0)], &[ClassId(1)], 0.0, 1).unwrap();
        assert_eq!(r0, b);

        let r = hard_nearest_replace(&b, &[ClassId(0)], &[ClassId(1)], 0.5, 1).unwrap();
        let changed = (0..4)
            .filter(|&k| r.primitive(0, k) != b.primitive(0, k))
            .count();
        let donors: Vec<&[f64]> = b.block(1).row_iter().collect();
        let mut replaced_or_kept = 0;
        for k in 0..4 {
            if donors.contains(&r.primitive(0, k)) {
                replaced_or_kept += 1;
            }
        }
        assert_eq!((changed, replaced_or_kept), (2, 2));
        assert_eq!(r.block(1), b.block(1));

        let one = bank(vec![
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            vec![vec![4.0, 4.0], vec![4.0, 4.0]],
        ]);
        let r = hard_nearest_replace(&one, &[ClassId(0)], &[ClassId(1)], 1.0, 0).unwrap();
        assert!(r.block(0).row_iter().all(|row| row == [4.0, 4.0]));

        assert!(hard_nearest_replace(&b, &[ClassId(0)], &[ClassId(0)], 0.5, 0).is_err());
    }

    fn arb_bank() -> impl Strategy<Value = (Vec<Vec<Vec<f64>>>, Vec<f64>)> {
        (2usize..4, 1usize..4, 2usize..5).prop_flat_map(|(k, n, d)| {
            (
                prop::collection::vec(
                    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
                    k,
                ),
                prop::collection::vec(-10.0f64..10.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn attention_is_convex_and_translation_equivariant(
            (blocks, shift) in arb_bank(),
            gamma in 0.1f64..64.0,
        ) {
            let b = bank(blocks.clone());
            let donors: Vec<usize> = (1..b.len()).collect();
            let e = attention_replace(&b, 0, &donors, gamma).unwrap();
            for att in &e.attention {
                prop_assert!(att.iter().all(|&a| a >= 0.0));
                prop_assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let moved: Vec<Vec<Vec<f64>>> = blocks
                .iter()
                .map(|blk| blk.iter().map(|r| r.iter().zip(&shift).map(|(a, s)| a + s).collect()).collect())
                .collect();
            let em = attention_replace(&bank(moved), 0, &donors, gamma).unwrap();
            for i in 0..e.replaced.rows() {
                for (j, s) in shift.iter().enumerate() {
                    let want = e.replaced.get(i, j) + s;
                    prop_assert!((em.replaced.get(i, j) - want).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn hard_replace_only_copies_donor_rows(
            (blocks, _shift) in arb_bank(),
            ratio in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            let b = bank(blocks);
            let r = hard_nearest_replace(&b, &[ClassId(0)], &[ClassId(1)], ratio, seed).unwrap();
            let donors: Vec<&[f64]> = b.block(1).row_iter().collect();
            for k in 0..b.n_prims() {
                let row = r.primitive(0, k);
                prop_assert!(row == b.primitive(0, k) || donors.contains(&row));
            }
        }
    }
}
