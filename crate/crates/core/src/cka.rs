//! Set-similarity kernels between a sample's patch features and a class's
//! primitives.
//!
//! The central quantity is linear CKA with the roles of the usual
//! representation-comparison setting transposed: patches (rows) play the
//! role of features and channels (columns) play the role of examples, so
//! centering happens along each row.
//!
//! ```text
//! cka(X, Z) = ‖X̃ Z̃ᵀ‖²_F / (‖X̃ X̃ᵀ‖_F · ‖Z̃ Z̃ᵀ‖_F),   X̃ = X − rowmean(X)
//! ```
//!
//! The numerator splits into per-(patch, primitive) terms, which gives both
//! the match weights and the per-patch importance used for filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, frobenius_norm, norm, Matrix};
use crate::ClassId;

/// Relative size below which a centered set counts as all-constant.
const DEGENERATE_RTOL: f64 = 1e-10;

/// One sample: its patch features (n patches × d channels) plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub sample_id: String,
    pub label: ClassId,
    pub session: u32,
    x: Matrix,
}

impl FeatureMap {
    pub fn new(
        sample_id: impl Into<String>,
        label: ClassId,
        session: u32,
        x: Matrix,
    ) -> Result<Self> {
        if x.cols() < 2 {
            return Err(Error::DegenerateInput(
                "feature maps need at least 2 channels".into(),
            ));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            label,
            session,
            x,
        })
    }

    #[inline]
    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn patches(&self) -> usize {
        self.x.rows()
    }

    pub fn channels(&self) -> usize {
        self.x.cols()
    }

    /// Global-average-pooled feature: the mean of the patch rows.
    pub fn pooled(&self) -> Vec<f64> {
        let n = self.x.rows() as f64;
        let mut f = vec![0.0; self.x.cols()];
        for row in self.x.row_iter() {
            f.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        f.iter_mut().for_each(|v| *v /= n);
        f
    }
}

/// Power-transformed linear CKA between a sample and a primitive set, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompositionScore(f64);

impl CompositionScore {
    pub(crate) fn new(v: f64) -> Self {
        debug_assert!(v > -1e-12 && v < 1.0 + 1e-9, "score out of range: {v}");
        Self(v.clamp(0.0, 1.0))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Per-(patch, primitive) weights `W^A` (n × N) that factor the CKA score.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchWeights {
    pub weights: Matrix,
}

/// Subtracts each row's mean across channels.
pub fn center_rows(x: &Matrix) -> Result<Matrix> {
    if x.cols() < 2 {
        return Err(Error::DegenerateInput(
            "row centering needs at least 2 channels".into(),
        ));
    }
    let d = x.cols() as f64;
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(out)
}

/// `‖M Mᵀ‖_F`, computed through whichever Gram matrix is smaller.
pub(crate) fn gram_norm(m: &Matrix) -> f64 {
    if m.rows() <= m.cols() {
        frobenius_norm(&m.matmul_t(m))
    } else {
        frobenius_norm(&m.t_matmul(m))
    }
}

/// A row-centered set together with `‖X̃ X̃ᵀ‖_F`.
#[derive(Debug, Clone)]
pub(crate) struct CenteredSet {
    pub centered: Matrix,
    pub gram_norm: f64,
}

impl CenteredSet {
    pub fn new(x: &Matrix) -> Result<Self> {
        let centered = center_rows(x)?;
        let raw = frobenius_norm(x);
        let cen = frobenius_norm(&centered);
        if raw == 0.0 || cen <= DEGENERATE_RTOL * raw {
            return Err(Error::degenerate_set(
                "every row is constant across channels",
            ));
        }
        let gram_norm = gram_norm(&centered);
        Ok(Self {
            centered,
            gram_norm,
        })
    }
}

fn check_widths(x: &Matrix, z: &Matrix) -> Result<()> {
    if x.cols() != z.cols() {
        return Err(Error::invalid(format!(
            "channel mismatch: {} vs {}",
            x.cols(),
            z.cols()
        )));
    }
    Ok(())
}

/// Linear CKA between two row sets sharing the channel dimension.
pub fn linear_cka(x: &Matrix, z: &Matrix) -> Result<CompositionScore> {
    check_widths(x, z)?;
    let xs = CenteredSet::new(x)?;
    let zs = CenteredSet::new(z)?;
    Ok(cka_centered(&xs, &zs))
}

pub(crate) fn cka_centered(xs: &CenteredSet, zs: &CenteredSet) -> CompositionScore {
    let cross = xs.centered.matmul_t(&zs.centered);
    let num = dot(cross.data(), cross.data());
    CompositionScore::new(num / (xs.gram_norm * zs.gram_norm))
}

/// Element-wise `sign(x)·|x|^α`. `α` must lie in `(0, 1]`; `α = 1` is the identity.
pub fn power_transform(x: &Matrix, alpha: f64) -> Matrix {
    debug_assert!(alpha > 0.0 && alpha <= 1.0, "alpha out of range: {alpha}");
    if alpha == 1.0 {
        return x.clone();
    }
    let data = x
        .data()
        .iter()
        .map(|&v| v.signum() * v.abs().powf(alpha))
        .map(|v| if v == 0.0 { 0.0 } else { v })
        .collect();
    Matrix::from_raw(x.rows(), x.cols(), data)
}

/// `cka(X^α, Z)`: the composition score of a sample against one primitive set.
pub fn composition_score(x: &FeatureMap, z: &Matrix, alpha: f64) -> Result<CompositionScore> {
    linear_cka(&power_transform(x.x(), alpha), z)
}

/// `W^A_ik = (X̃_i · Z̃_k) / (‖X̃X̃ᵀ‖_F ‖Z̃Z̃ᵀ‖_F)`, so that
/// `Σ_ik W^A_ik (X̃_i · Z̃_k) = cka(X, Z)`.
pub fn match_weights(x: &Matrix, z: &Matrix) -> Result<MatchWeights> {
    check_widths(x, z)?;
    let xs = CenteredSet::new(x)?;
    let zs = CenteredSet::new(z)?;
    let denom = xs.gram_norm * zs.gram_norm;
    let weights = xs.centered.matmul_t(&zs.centered).scaled(1.0 / denom);
    Ok(MatchWeights { weights })
}

/// Per-patch share of the CKA numerator: `I_i = Σ_k (X̃_i · Z̃_k)² / denom`.
/// Non-negative, sums to `cka(X, Z)`.
pub fn patch_importance(x: &Matrix, z: &Matrix) -> Result<Vec<f64>> {
    check_widths(x, z)?;
    let xs = CenteredSet::new(x)?;
    let zs = CenteredSet::new(z)?;
    Ok(importance_centered(&xs, &zs))
}

pub(crate) fn importance_centered(xs: &CenteredSet, zs: &CenteredSet) -> Vec<f64> {
    let denom = xs.gram_norm * zs.gram_norm;
    let cross = xs.centered.matmul_t(&zs.centered);
    cross.row_iter().map(|r| dot(r, r) / denom).collect()
}

/// How per-pair cosines are pooled in [`allmatch_similarity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Average over every (patch, primitive) pair.
    Mean,
    /// Best primitive per patch, averaged over patches.
    Max,
}

fn normalized_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::DegenerateInput(format!("row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Cosine matching without learned weights: every pair counts (`Mean`) or
/// only each patch's best primitive (`Max`).
pub fn allmatch_similarity(x: &Matrix, z: &Matrix, mode: MatchMode) -> Result<f64> {
    check_widths(x, z)?;
    let xn = normalized_rows(x)?;
    let zn = normalized_rows(z)?;
    let cos = xn.matmul_t(&zn);
    Ok(match mode {
        MatchMode::Mean => cos.data().iter().sum::<f64>() / (cos.rows() * cos.cols()) as f64,
        MatchMode::Max => {
            cos.row_iter()
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
                / cos.rows() as f64
        }
    })
}

/// Linear CKA for comparing two representations of the same `b` inputs
/// (`a`: b × d_h, `b`: b × d_g), centering over the batch dimension.
///
/// Uses `tr(K H L H) = ‖(HA)ᵀ(HB)‖²_F` for linear kernels; the `1/(b−1)²`
/// factors cancel in the ratio.
pub fn cka_rc(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::invalid(format!(
            "representations cover different batches: {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.rows() < 2 {
        return Err(Error::invalid(
            "representation comparison needs at least 2 inputs",
        ));
    }
    let ac = center_rows(&a.transpose())?.transpose();
    let bc = center_rows(&b.transpose())?.transpose();
    let hsic_ab = {
        let c = ac.t_matmul(&bc);
        dot(c.data(), c.data())
    };
    let hsic_aa = gram_norm(&ac.transpose());
    let hsic_bb = gram_norm(&bc.transpose());
    if hsic_aa <= DEGENERATE_RTOL * frobenius_norm(a).powi(2)
        || hsic_bb <= DEGENERATE_RTOL * frobenius_norm(b).powi(2)
    {
        return Err(Error::degenerate_set("constant representation"));
    }
    Ok((hsic_ab / (hsic_aa * hsic_bb)).clamp(0.0, 1.0))
}

/// Scores many samples against a fixed list of primitive sets with one
/// matrix product per chunk of samples.
#[derive(Debug, Clone)]
pub struct CompositionScorer {
    n_prims: Vec<usize>,
    offsets: Vec<usize>,
    stacked: Matrix,
    gram_norms: Vec<f64>,
    alpha: f64,
}

impl CompositionScorer {
    /// `blocks` are the raw (uncentered) primitive sets, one per class.
    pub fn new<'a, I>(blocks: I, alpha: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Matrix>,
    {
        let mut n_prims = Vec::new();
        let mut offsets = Vec::new();
        let mut gram_norms = Vec::new();
        let mut data = Vec::new();
        let mut width = None;
        let mut total = 0;
        for (c, z) in blocks.into_iter().enumerate() {
            if *width.get_or_insert(z.cols()) != z.cols() {
                return Err(Error::invalid("primitive sets differ in width"));
            }
            let zs = CenteredSet::new(z).map_err(|e| match e {
                Error::DegenerateSet { reason, .. } => {
                    Error::degenerate_set(format!("block {c}: {reason}"))
                }
                other => other,
            })?;
            offsets.push(total);
            n_prims.push(z.rows());
            total += z.rows();
            gram_norms.push(zs.gram_norm);
            data.extend_from_slice(zs.centered.data());
        }
        let width = width.ok_or_else(|| Error::invalid("no primitive sets to score against"))?;
        Ok(Self {
            n_prims,
            offsets,
            stacked: Matrix::from_raw(total, width, data),
            gram_norms,
            alpha,
        })
    }

    pub fn classes(&self) -> usize {
        self.n_prims.len()
    }

    /// Scores for every sample against every class, row per sample.
    pub fn score_batch(&self, maps: &[&Matrix]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 16;
        let mut out = Vec::with_capacity(maps.len());
        for chunk in maps.chunks(CHUNK) {
            let mut sets = Vec::with_capacity(chunk.len());
            let mut data = Vec::new();
            for x in chunk {
                if x.cols() != self.stacked.cols() {
                    return Err(Error::invalid("sample width differs from primitives"));
                }
                let xs = CenteredSet::new(&power_transform(x, self.alpha))?;
                data.extend_from_slice(xs.centered.data());
                sets.push((x.rows(), xs.gram_norm));
            }
            let rows: usize = sets.iter().map(|s| s.0).sum();
            let a = Matrix::from_raw(rows, self.stacked.cols(), data);
            let cross = a.matmul_t(&self.stacked);
            let mut row0 = 0;
            for (n, xnorm) in sets {
                let scores = (0..self.classes())
                    .map(|c| {
                        let (lo, hi) = (self.offsets[c], self.offsets[c] + self.n_prims[c]);
                        let mut num = 0.0;
                        for i in row0..row0 + n {
                            let r = &cross.row(i)[lo..hi];
                            num += dot(r, r);
                        }
                        CompositionScore::new(num / (xnorm * self.gram_norms[c])).value()
                    })
                    .collect();
                out.push(scores);
                row0 += n;
            }
        }
        Ok(out)
    }

    pub fn score(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self
            .score_batch(&[x])?
            .pop()
            .expect("one sample in, one out"))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
