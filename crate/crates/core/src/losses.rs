//! Training objective: cosine prototype loss, composition loss, composition
//! loss on attention-replaced primitives, their weighted sum, and analytic
//! gradients for the primitive bank and the prototype rows.
//!
//! The per-sample functions ([`loss_cls`], [`loss_cmp`], [`loss_rcmp`]) are
//! straightforward forward evaluations. [`total_loss_and_grad`] computes the
//! same quantity batched, together with its gradient; the two are checked
//! against each other and against central differences in the tests.
//!
//! Gradient of one composition score with respect to the centered block
//! `B = Z J` (`J` the row-centering projector), with `A` the centered sample,
//! `M = A Bᵀ`, `G = B Bᵀ`, `a = ‖A Aᵀ‖`, `b = ‖G‖`:
//!
//! ```text
//! ∂s/∂B = 2 Mᵀ A / (a b) − 2 s G B / b²,      ∂s/∂Z = (∂s/∂B) J
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cka::{center_rows, power_transform};
use crate::cka::{composition_score, CenteredSet, FeatureMap};
use crate::error::{Error, Result};
use crate::numkit::{dot, log_sum_exp, norm, softmax_xent, Matrix};
use crate::primitives::{
    attention_replace, donor_pool, replace_all, DonorMap, InitScheme, PrimitiveBank, ReplacedBank,
};
use crate::ClassId;

/// Cosine-classifier prototype rows, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    classes: Vec<ClassId>,
    rows: Matrix,
    frozen: Vec<bool>,
}

impl ClassifierWeights {
    pub fn new(classes: Vec<ClassId>, rows: Matrix, frozen: Vec<bool>) -> Result<Self> {
        if classes.len() != rows.rows() || classes.len() != frozen.len() {
            return Err(Error::invalid("class list does not match weight rows"));
        }
        Ok(Self {
            classes,
            rows,
            frozen,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Matrix {
        &mut self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    /// Mean of the L2-normalized pooled features of each class's samples.
    pub fn class_means(classes: &[ClassId], samples: &[FeatureMap]) -> Result<Self> {
        let dim = samples
            .first()
            .map(FeatureMap::channels)
            .ok_or_else(|| Error::invalid("no samples to build prototypes from"))?;
        let mut data = Vec::with_capacity(classes.len() * dim);
        for &c in classes {
            let mut acc = vec![0.0; dim];
            let mut count = 0;
            for s in samples.iter().filter(|s| s.label == c) {
                let f = s.pooled();
                let n = norm(&f);
                if n == 0.0 {
                    return Err(Error::DegenerateInput(format!(
                        "sample {} pools to the zero vector",
                        s.sample_id
                    )));
                }
                acc.iter_mut().zip(&f).for_each(|(a, v)| *a += v / n);
                count += 1;
            }
            if count == 0 {
                return Err(Error::invalid(format!("no samples for class {c}")));
            }
            data.extend(acc.into_iter().map(|v| v / count as f64));
        }
        Self::new(
            classes.to_vec(),
            Matrix::new(classes.len(), dim, data)?,
            vec![false; classes.len()],
        )
    }

    /// Freezes existing rows and appends `other`'s rows unfrozen.
    pub fn extend(&self, other: &ClassifierWeights) -> Result<Self> {
        if other.rows.cols() != self.rows.cols() {
            return Err(Error::invalid("weight widths differ"));
        }
        if other.classes.iter().any(|c| self.classes.contains(c)) {
            return Err(Error::invalid("class already has a prototype row"));
        }
        let mut classes = self.classes.clone();
        classes.extend_from_slice(&other.classes);
        let mut data = self.rows.data().to_vec();
        data.extend_from_slice(other.rows.data());
        let mut frozen = vec![true; self.classes.len()];
        frozen.extend(std::iter::repeat_n(false, other.classes.len()));
        Self::new(
            classes.clone(),
            Matrix::new(classes.len(), self.rows.cols(), data)?,
            frozen,
        )
    }
}

/// Named hyperparameter profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// λ1 = λ2 = 2.0, α = 0.8
    MiniimagenetLike,
    /// λ1 = λ2 = 2.0, α = 0.6
    CifarLike,
    /// λ1 = λ2 = 0.01, α = 0.5
    CubLike,
}

impl Preset {
    pub fn apply(self, hp: &mut Hyperparams) {
        let (lambda, alpha) = match self {
            Preset::MiniimagenetLike => (2.0, 0.8),
            Preset::CifarLike => (2.0, 0.6),
            Preset::CubLike => (0.01, 0.5),
        };
        hp.lambda1 = lambda;
        hp.lambda2 = lambda;
        hp.alpha = alpha;
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::MiniimagenetLike => "miniimagenet-like",
            Preset::CifarLike => "cifar-like",
            Preset::CubLike => "cub-like",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [Preset::MiniimagenetLike, Preset::CifarLike, Preset::CubLike]
            .into_iter()
            .find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Logit scale shared by all three losses.
    pub tau: f64,
    /// Power applied to feature maps before scoring.
    pub alpha: f64,
    /// Attention sharpness for primitive replacement.
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Primitives per class.
    pub n_prims: usize,
    pub lr: f64,
    pub momentum: f64,
    pub base_epochs: usize,
    pub inc_epochs: usize,
    /// Mini-batch size in the base session; incremental sessions use the full shot set.
    pub batch_size: usize,
    pub seed: u64,
    pub init: InitScheme,
    /// Treat attention weights as constants when back-propagating the replacement loss.
    pub stop_attention_grad: bool,
    /// Keep the prototype loss (and train novel prototype rows) in incremental sessions.
    pub cls_in_incremental: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            tau: 16.0,
            alpha: 0.8,
            gamma: 64.0,
            lambda1: 2.0,
            lambda2: 2.0,
            n_prims: 16,
            lr: 0.01,
            momentum: 0.9,
            base_epochs: 100,
            inc_epochs: 50,
            batch_size: 64,
            seed: 0,
            init: InitScheme::Kmeans,
            stop_attention_grad: false,
            cls_in_incremental: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("hyperparameter {what}")));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1/lambda2 must be non-negative");
        }
        if self.n_prims == 0 {
            return bad("n_prims must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if let InitScheme::Gaussian { sigma } = self.init {
            if !(sigma > 0.0) {
                return bad("gaussian init sigma must be positive");
            }
        }
        Ok(())
    }
}

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub cmp: f64,
    pub rcmp: f64,
}

impl LossWeights {
    pub fn from_hyperparams(hp: &Hyperparams) -> Self {
        Self {
            cls: 1.0,
            cmp: hp.lambda1,
            rcmp: hp.lambda2,
        }
    }
}

/// Which parameter rows receive gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableMask {
    /// Per class, per primitive row.
    pub z: Vec<Vec<bool>>,
    pub w: Vec<bool>,
}

impl TrainableMask {
    /// Everything not marked frozen is trainable.
    pub fn from_frozen(bank: &PrimitiveBank, w: &ClassifierWeights) -> Self {
        Self {
            z: bank
                .frozen()
                .iter()
                .map(|&f| vec![!f; bank.n_prims()])
                .collect(),
            w: w.frozen().iter().map(|&f| !f).collect(),
        }
    }

    pub fn none(bank: &PrimitiveBank, w: &ClassifierWeights) -> Self {
        Self {
            z: vec![vec![false; bank.n_prims()]; bank.len()],
            w: vec![false; w.len()],
        }
    }

    pub fn any(&self) -> bool {
        self.w.iter().any(|&t| t) || self.z.iter().flatten().any(|&t| t)
    }
}

/// Gradients for every bank block and prototype row (frozen ones are zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub z: Vec<Matrix>,
    pub w: Matrix,
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .z
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect();
        v.extend_from_slice(self.w.data());
        v
    }
}

/// Bank blocks followed by prototype rows, row-major.
pub fn flatten_params(bank: &PrimitiveBank, w: &ClassifierWeights) -> Vec<f64> {
    let mut v = bank.flat();
    v.extend_from_slice(w.rows().data());
    v
}

/// Inverse of [`flatten_params`], reusing the templates' shapes, ids and flags.
pub fn unflatten_params(
    theta: &[f64],
    bank: &PrimitiveBank,
    w: &ClassifierWeights,
) -> Result<(PrimitiveBank, ClassifierWeights)> {
    let block = bank.n_prims() * bank.dim();
    let zlen = block * bank.len();
    if theta.len() != zlen + w.rows().data().len() {
        return Err(Error::invalid("parameter vector has the wrong length"));
    }
    let mut b = bank.clone();
    for c in 0..bank.len() {
        b.block_mut(c)
            .data_mut()
            .copy_from_slice(&theta[c * block..(c + 1) * block]);
    }
    let mut wt = w.clone();
    wt.rows_mut().data_mut().copy_from_slice(&theta[zlen..]);
    Ok((b, wt))
}

fn label_index(classes: &[ClassId], label: ClassId) -> Result<usize> {
    classes
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| Error::invalid(format!("label {label} is not a registered class")))
}

fn cosine_logits(f: &[f64], w: &ClassifierWeights) -> Result<Vec<f64>> {
    let fnorm = norm(f);
    if fnorm == 0.0 {
        return Err(Error::DegenerateInput(
            "pooled feature has zero norm".into(),
        ));
    }
    (0..w.len())
        .map(|c| {
            let wn = norm(w.row(c));
            if wn == 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "prototype row for class {} has zero norm",
                    w.classes[c]
                )));
            }
            Ok(dot(f, w.row(c)) / (fnorm * wn))
        })
        .collect()
}

/// Cross-entropy over `τ · cos(f(x), W_c)` with `f(x)` the patch mean.
pub fn loss_cls(x: &FeatureMap, w: &ClassifierWeights, tau: f64) -> Result<f64> {
    let y = label_index(&w.classes, x.label)?;
    let logits = cosine_logits(&x.pooled(), w)?;
    Ok(xent(&logits, tau, y))
}

fn xent(scores: &[f64], tau: f64, y: usize) -> f64 {
    let scaled: Vec<f64> = scores.iter().map(|s| s * tau).collect();
    log_sum_exp(&scaled) - scaled[y]
}

/// Cross-entropy over `τ · cka(X^α, Z^c)` across all classes of the bank.
pub fn loss_cmp(x: &FeatureMap, bank: &PrimitiveBank, tau: f64, alpha: f64) -> Result<f64> {
    let y = label_index(bank.classes(), x.label)?;
    let scores = (0..bank.len())
        .map(|c| {
            composition_score(x, bank.block(c), alpha)
                .map(|s| s.value())
                .map_err(|e| e.for_class(bank.classes()[c]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(xent(&scores, tau, y))
}

/// [`loss_cmp`] evaluated on primitives rebuilt by attention over donors.
pub fn loss_rcmp(
    x: &FeatureMap,
    bank: &PrimitiveBank,
    donors: &DonorMap,
    tau: f64,
    alpha: f64,
    gamma: f64,
) -> Result<f64> {
    let y = label_index(bank.classes(), x.label)?;
    let scores = (0..bank.len())
        .map(|c| {
            let e = attention_replace(bank, c, donors.for_class(c), gamma)?;
            composition_score(x, &e.replaced, alpha)
                .map(|s| s.value())
                .map_err(|err| err.for_class(bank.classes()[c]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(xent(&scores, tau, y))
}

/// Per-sample quantities reused by both composition passes.
struct SampleCache {
    centered: Matrix,
    gram_norm: f64,
    /// `AᵀA`, only when the Gram route is used.
    gram: Option<Matrix>,
}

/// Whether to score through `d×d` Gram matrices rather than `n×N` cross products.
fn use_gram_route(max_patches: usize, n_prims: usize, dim: usize, classes: usize) -> bool {
    dim <= max_patches * n_prims && classes * dim * dim <= 1 << 22
}

/// Mean cross-entropy over composition scores against `blocks`, plus the
/// gradient with respect to each (uncentered) block, scaled by `weight`.
fn composition_pass(
    cache: &[&SampleCache],
    labels: &[usize],
    blocks: &[&Matrix],
    classes: &[ClassId],
    tau: f64,
    weight: f64,
    gram_route: bool,
) -> Result<(Vec<f64>, Vec<Matrix>)> {
    let n_samples = cache.len();
    let k = blocks.len();
    let sets = blocks
        .iter()
        .zip(classes)
        .map(|(b, &c)| CenteredSet::new(b).map_err(|e| e.for_class(c)))
        .collect::<Result<Vec<_>>>()?;
    let n_prims = blocks[0].rows();
    let dim = blocks[0].cols();

    // Numerators ‖A_s B_cᵀ‖² for every (sample, class).
    let mut nums = vec![vec![0.0; k]; n_samples];
    let mut cross: Vec<Matrix> = Vec::new();
    let (gx_stack, bb) = if gram_route {
        let mut gx = Vec::with_capacity(n_samples * dim * dim);
        for s in cache {
            gx.extend_from_slice(s.gram.as_ref().expect("gram route").data());
        }
        let gx = Matrix::from_raw(n_samples, dim * dim, gx);
        let mut bb = Vec::with_capacity(k * dim * dim);
        for set in &sets {
            bb.extend_from_slice(set.centered.t_matmul(&set.centered).data());
        }
        let bb = Matrix::from_raw(k, dim * dim, bb);
        let prod = gx.matmul_t(&bb);
        for (s, row) in nums.iter_mut().enumerate() {
            row.copy_from_slice(prod.row(s));
        }
        (Some(gx), None::<Matrix>)
    } else {
        let mut stacked = Vec::with_capacity(k * n_prims * dim);
        for set in &sets {
            stacked.extend_from_slice(set.centered.data());
        }
        let stacked = Matrix::from_raw(k * n_prims, dim, stacked);
        cross = cache
            .par_iter()
            .map(|s| s.centered.matmul_t(&stacked))
            .collect();
        for (m, row) in cross.iter().zip(nums.iter_mut()) {
            for (c, slot) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for r in m.row_iter() {
                    let blk = &r[c * n_prims..(c + 1) * n_prims];
                    acc += dot(blk, blk);
                }
                *slot = acc;
            }
        }
        (None, Some(stacked))
    };

    let mut losses = Vec::with_capacity(n_samples);
    // coef[s][c] = u_sc / a_s, t[c] = Σ_s u_sc s_sc
    let mut coef = vec![vec![0.0; k]; n_samples];
    let mut t = vec![0.0; k];
    for s in 0..n_samples {
        let scores: Vec<f64> = (0..k)
            .map(|c| nums[s][c] / (cache[s].gram_norm * sets[c].gram_norm))
            .collect();
        let (loss, dlogits) = softmax_xent(&scores, tau, labels[s]);
        losses.push(loss);
        for c in 0..k {
            let u = weight / n_samples as f64 * dlogits[c];
            coef[s][c] = u / cache[s].gram_norm;
            t[c] += u * scores[c];
        }
    }

    // First term, summed over samples, per class: Σ_s coef_sc M_scᵀ A_s.
    let mut first: Vec<Matrix> = vec![Matrix::zeros(n_prims, dim); k];
    match (gx_stack, bb) {
        (Some(gx), _) => {
            let coef_t = Matrix::from_raw(
                k,
                n_samples,
                (0..k)
                    .flat_map(|c| coef.iter().map(move |row| row[c]))
                    .collect(),
            );
            let weighted = coef_t.matmul(&gx);
            for c in 0..k {
                let cm = Matrix::from_raw(dim, dim, weighted.row(c).to_vec());
                first[c] = sets[c].centered.matmul(&cm);
            }
        }
        (None, Some(_stacked)) => {
            let per_sample: Vec<Matrix> = cross
                .par_iter()
                .zip(cache.par_iter())
                .zip(coef.par_iter())
                .map(|((m, s), cf)| {
                    let mut mw = m.clone();
                    for i in 0..mw.rows() {
                        let row = mw.row_mut(i);
                        for (c, f) in cf.iter().enumerate() {
                            row[c * n_prims..(c + 1) * n_prims]
                                .iter_mut()
                                .for_each(|v| *v *= f);
                        }
                    }
                    mw.t_matmul(&s.centered)
                })
                .collect();
            let mut total = Matrix::zeros(k * n_prims, dim);
            for g in &per_sample {
                total
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
            for (c, f) in first.iter_mut().enumerate() {
                f.data_mut()
                    .copy_from_slice(&total.data()[c * n_prims * dim..(c + 1) * n_prims * dim]);
            }
        }
        _ => unreachable!(),
    }

    let mut grads = Vec::with_capacity(k);
    for (c, set) in sets.iter().enumerate() {
        let b = &set.centered;
        let bn = set.gram_norm;
        let gb = b.matmul(&b.t_matmul(b));
        let data = first[c]
            .data()
            .iter()
            .zip(gb.data())
            .map(|(f, g)| 2.0 * f / bn - 2.0 * t[c] * g / (bn * bn))
            .collect();
        let grad_b = Matrix::from_raw(n_prims, dim, data);
        grads.push(center_rows(&grad_b)?);
    }
    Ok((losses, grads))
}

/// Pushes gradients on the replaced blocks back onto the bank. With `A`
/// the attention matrix, `Q` the stacked donor pool, `P` the class's block,
/// `G` the upstream gradient and `H = A ∘ (G Qᵀ − rowsum(A ∘ G Qᵀ))`:
///
/// ```text
/// ∂L/∂Q = AᵀG + 2γ (HᵀP − diag(colsum H) Q)
/// ∂L/∂P = 2γ (H Q − diag(rowsum H) P)
/// ```
fn backprop_replacement(
    bank: &PrimitiveBank,
    donors: &DonorMap,
    replaced: &ReplacedBank,
    upstream: &[Matrix],
    gamma: f64,
    stop_attention: bool,
    out: &mut [Matrix],
) {
    let n = bank.n_prims();
    let dim = bank.dim();
    for (y, entry) in replaced.entries.iter().enumerate() {
        let pool_ids = donors.for_class(y);
        let pool = donor_pool(bank, pool_ids);
        let g = &upstream[y];
        let att = Matrix::from_raw(n, pool.rows(), entry.attention.concat());
        let mut dpool = att.t_matmul(g);
        if !stop_attention {
            let gq = g.matmul_t(&pool);
            let mut h = Matrix::zeros(n, pool.rows());
            for i in 0..n {
                let (a, v) = (att.row(i), gq.row(i));
                let mean = dot(a, v);
                h.row_mut(i)
                    .iter_mut()
                    .zip(a.iter().zip(v))
                    .for_each(|(hv, (a, v))| *hv = a * (v - mean));
            }
            let p = bank.block(y);
            let htp = h.t_matmul(p);
            for k in 0..pool.rows() {
                let col: f64 = (0..n).map(|i| h.get(i, k)).sum();
                let (q, row) = (pool.row(k), htp.row(k));
                dpool
                    .row_mut(k)
                    .iter_mut()
                    .zip(row.iter().zip(q))
                    .for_each(|(d, (hp, qv))| *d += 2.0 * gamma * (hp - col * qv));
            }
            let hq = h.matmul(&pool);
            let dp = out[y].data_mut();
            for i in 0..n {
                let rs: f64 = h.row(i).iter().sum();
                for d in 0..dim {
                    dp[i * dim + d] += 2.0 * gamma * (hq.get(i, d) - rs * p.get(i, d));
                }
            }
        }
        for (j, &c) in pool_ids.iter().enumerate() {
            out[c]
                .data_mut()
                .iter_mut()
                .zip(&dpool.data()[j * n * dim..(j + 1) * n * dim])
                .for_each(|(o, v)| *o += v);
        }
    }
}

/// A training sample with everything that does not depend on parameters
/// computed once.
pub(crate) struct PreparedSample {
    label: ClassId,
    pooled: Vec<f64>,
    comp: Option<SampleCache>,
}

/// Whether composition passes over `n_samples` maps against `bank` should
/// go through cached `d×d` Gram matrices.
pub(crate) fn gram_route(bank: &PrimitiveBank, max_patches: usize, n_samples: usize) -> bool {
    let d = bank.dim();
    use_gram_route(max_patches, bank.n_prims(), d, bank.len()) && n_samples * d * d <= 1 << 25
}

/// Pooled features always; power-transformed centered maps (and their Gram
/// matrices when `gram`) only when `composition` is set.
pub(crate) fn prepare(
    batch: &[&FeatureMap],
    alpha: f64,
    composition: bool,
    gram: bool,
) -> Result<Vec<PreparedSample>> {
    batch
        .par_iter()
        .map(|x| {
            let comp = if composition {
                let set = CenteredSet::new(&power_transform(x.x(), alpha))
                    .map_err(|e| e.for_class(x.label))?;
                let g = gram.then(|| set.centered.t_matmul(&set.centered));
                Some(SampleCache {
                    centered: set.centered,
                    gram_norm: set.gram_norm,
                    gram: g,
                })
            } else {
                None
            };
            Ok(PreparedSample {
                label: x.label,
                pooled: x.pooled(),
                comp,
            })
        })
        .collect()
}

/// Mean over the batch of `w.cls·L_cls + w.cmp·L_cmp + w.rcmp·L_rcmp`, and its
/// gradient with respect to every row the mask marks trainable.
pub fn weighted_loss_and_grad(
    batch: &[&FeatureMap],
    bank: &PrimitiveBank,
    w: &ClassifierWeights,
    donors: &DonorMap,
    hp: &Hyperparams,
    mask: &TrainableMask,
    weights: LossWeights,
) -> Result<(f64, Grads)> {
    if batch.iter().any(|x| x.channels() != bank.dim()) {
        return Err(Error::invalid("sample width differs from primitive width"));
    }
    let composition = weights.cmp != 0.0 || weights.rcmp != 0.0;
    let max_patches = batch.iter().map(|x| x.patches()).max().unwrap_or(1);
    let gram = gram_route(bank, max_patches, batch.len());
    let prepared = prepare(batch, hp.alpha, composition, gram)?;
    let refs: Vec<&PreparedSample> = prepared.iter().collect();
    loss_and_grad_prepared(&refs, bank, w, donors, hp, mask, weights)
}

pub(crate) fn loss_and_grad_prepared(
    batch: &[&PreparedSample],
    bank: &PrimitiveBank,
    w: &ClassifierWeights,
    donors: &DonorMap,
    hp: &Hyperparams,
    mask: &TrainableMask,
    weights: LossWeights,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if bank.classes() != w.classes() {
        return Err(Error::invalid(
            "bank and prototype rows cover different classes",
        ));
    }
    let k = bank.len();
    let dim = bank.dim();
    let bsz = batch.len() as f64;
    let labels = batch
        .iter()
        .map(|x| label_index(bank.classes(), x.label))
        .collect::<Result<Vec<_>>>()?;

    let mut total = 0.0;
    let mut gz: Vec<Matrix> = vec![Matrix::zeros(bank.n_prims(), dim); k];
    let mut gw = Matrix::zeros(k, dim);

    if weights.cls != 0.0 {
        let per_sample = batch
            .par_iter()
            .zip(labels.par_iter())
            .map(|(x, &y)| -> Result<(f64, Vec<f64>)> {
                let logits = cosine_logits(&x.pooled, w)?;
                Ok(softmax_xent(&logits, hp.tau, y))
            })
            .collect::<Result<Vec<_>>>()?;
        let wnorms: Vec<f64> = (0..k).map(|c| norm(w.row(c))).collect();
        for ((loss, dl), x) in per_sample.iter().zip(batch) {
            total += weights.cls * loss / bsz;
            let f = &x.pooled;
            let fnorm = norm(f);
            for c in 0..k {
                let wr = w.row(c);
                let wn = wnorms[c];
                let cos = dot(f, wr) / (fnorm * wn);
                let u = weights.cls / bsz * dl[c];
                gw.row_mut(c)
                    .iter_mut()
                    .zip(f.iter().zip(wr))
                    .for_each(|(g, (fv, wv))| *g += u * (fv / (fnorm * wn) - cos * wv / (wn * wn)));
            }
        }
    }

    if weights.cmp != 0.0 || weights.rcmp != 0.0 {
        let cache = batch
            .iter()
            .map(|x| {
                x.comp
                    .as_ref()
                    .ok_or_else(|| Error::invalid("sample was prepared without composition data"))
            })
            .collect::<Result<Vec<_>>>()?;
        let gram = cache.iter().all(|c| c.gram.is_some());

        if weights.cmp != 0.0 {
            let blocks: Vec<&Matrix> = bank.blocks().iter().collect();
            let (losses, grads) = composition_pass(
                &cache,
                &labels,
                &blocks,
                bank.classes(),
                hp.tau,
                weights.cmp,
                gram,
            )?;
            total += weights.cmp * losses.iter().sum::<f64>() / bsz;
            for (acc, g) in gz.iter_mut().zip(&grads) {
                acc.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
        if weights.rcmp != 0.0 {
            let replaced = replace_all(bank, donors, hp.gamma)?;
            let blocks: Vec<&Matrix> = replaced.blocks().collect();
            let (losses, upstream) = composition_pass(
                &cache,
                &labels,
                &blocks,
                bank.classes(),
                hp.tau,
                weights.rcmp,
                gram,
            )?;
            total += weights.rcmp * losses.iter().sum::<f64>() / bsz;
            backprop_replacement(
                bank,
                donors,
                &replaced,
                &upstream,
                hp.gamma,
                hp.stop_attention_grad,
                &mut gz,
            );
        }
    }

    for (c, g) in gz.iter_mut().enumerate() {
        for (i, &train) in mask.z[c].iter().enumerate() {
            if !train {
                g.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    for (c, &train) in mask.w.iter().enumerate() {
        if !train {
            gw.row_mut(c).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok((total, Grads { z: gz, w: gw }))
}

/// `L = L_cls + λ1·L_cmp + λ2·L_rcmp`, averaged over the batch, with gradients.
pub fn total_loss_and_grad(
    batch: &[&FeatureMap],
    bank: &PrimitiveBank,
    w: &ClassifierWeights,
    donors: &DonorMap,
    hp: &Hyperparams,
    mask: &TrainableMask,
) -> Result<(f64, Grads)> {
    if !mask.any() {
        return Err(Error::invalid("no trainable parameters"));
    }
    weighted_loss_and_grad(
        batch,
        bank,
        w,
        donors,
        hp,
        mask,
        LossWeights::from_hyperparams(hp),
    )
}

/// Forward-only reference for [`weighted_loss_and_grad`]'s loss value, built
/// from the per-sample loss functions.
pub fn weighted_loss(
    batch: &[&FeatureMap],
    bank: &PrimitiveBank,
    w: &ClassifierWeights,
    donors: &DonorMap,
    hp: &Hyperparams,
    weights: LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for x in batch {
        let mut l = 0.0;
        if weights.cls != 0.0 {
            l += weights.cls * loss_cls(x, w, hp.tau)?;
        }
        if weights.cmp != 0.0 {
            l += weights.cmp * loss_cmp(x, bank, hp.tau, hp.alpha)?;
        }
        if weights.rcmp != 0.0 {
            l += weights.rcmp * loss_rcmp(x, bank, donors, hp.tau, hp.alpha, hp.gamma)?;
        }
        total += l;
    }
    Ok(total / batch.len() as f64)
}
