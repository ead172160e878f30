//! Session evaluation and analyses: per-session accuracies and forgetting,
//! importance-filtered evaluation, primitive-reuse retention, primitive
//! count sweeps, scoring throughput and composition retrieval export.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cka::{
    allmatch_similarity, argmax, importance_centered, power_transform, CenteredSet,
    CompositionScorer, FeatureMap, MatchMode,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::Hyperparams;
use crate::numkit::{dot, norm, squared_distance, Matrix};
use crate::primitives::hard_nearest_replace;
use crate::training::{train_all_sessions, ModelState};
use crate::ClassId;

/// Label sets of the base and incremental sessions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSchedule {
    pub base: Vec<ClassId>,
    pub incremental: Vec<Vec<ClassId>>,
    /// Training samples per novel class.
    pub shots: usize,
}

impl SessionSchedule {
    pub fn new(base: Vec<ClassId>, incremental: Vec<Vec<ClassId>>, shots: usize) -> Result<Self> {
        if shots == 0 {
            return Err(Error::invalid("shots must be at least 1"));
        }
        let mut seen = BTreeSet::new();
        for c in base.iter().chain(incremental.iter().flatten()) {
            if !seen.insert(*c) {
                return Err(Error::invalid(format!("class {c} appears in two sessions")));
            }
        }
        Ok(Self {
            base,
            incremental,
            shots,
        })
    }

    /// Reads label sets from a dataset; shots is the smallest novel class's training count.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let m = &ds.manifest;
        let incremental: Vec<Vec<ClassId>> = (1..m.n_sessions()).map(|k| m.classes_in(k)).collect();
        let shots = incremental
            .iter()
            .flatten()
            .map(|c| {
                ds.manifest
                    .samples
                    .iter()
                    .filter(|r| r.label == *c && r.split == crate::data::Split::Train)
                    .count()
            })
            .min()
            .unwrap_or(1);
        Self::new(m.classes_in(0), incremental, shots.max(1))
    }

    pub fn n_sessions(&self) -> usize {
        1 + self.incremental.len()
    }
}

/// How test samples are scored against classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Composition score of the power-transformed map against each primitive set.
    Composition,
    /// Cosine between the pooled feature and each prototype row.
    Baseline,
    /// Mean best-match cosine between patches and primitives.
    Allmatch,
    /// Max best-match cosine between patches and primitives.
    Maxmatch,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Composition => "composition",
            Head::Baseline => "baseline",
            Head::Allmatch => "allmatch",
            Head::Maxmatch => "maxmatch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Head::Composition,
            Head::Baseline,
            Head::Allmatch,
            Head::Maxmatch,
        ]
        .into_iter()
        .find(|h| h.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionAccuracy {
    pub session: u32,
    /// Over all classes seen so far, in percent.
    pub overall: f64,
    /// Base-class test samples among all classes seen so far.
    pub base: f64,
    /// Novel-class test samples among novel classes only; absent in session 0.
    pub novel: Option<f64>,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: Vec<SessionAccuracy>,
    pub pd: f64,
    pub head: Head,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    /// Class order of the confusion matrix.
    pub classes: Vec<ClassId>,
    /// Final session, `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn final_overall(&self) -> f64 {
        self.sessions.last().map_or(0.0, |s| s.overall)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("head: {}  seed: {}\n", self.head.name(), self.seed);
        out.push_str("session  overall     base    novel  n_test\n");
        for s in &self.sessions {
            let novel = s
                .novel
                .map_or_else(|| "       -".to_string(), |v| format!("{v:8.2}"));
            out.push_str(&format!(
                "{:>7}  {:7.2}  {:7.2}  {novel}  {:>6}\n",
                s.session, s.overall, s.base, s.n_test
            ));
        }
        out.push_str(&format!("PD: {:.2}\n", self.pd));
        out
    }
}

/// `first − last`, with float representation error below 1e-9 rounded away.
pub fn performance_drop(overall: &[f64]) -> Result<f64> {
    let (first, last) = match (overall.first(), overall.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::invalid("no sessions to compare")),
    };
    Ok(((first - last) * 1e9).round() / 1e9)
}

fn class_index(state: &ModelState, label: ClassId) -> Result<usize> {
    state
        .bank
        .index_of(label)
        .ok_or_else(|| Error::invalid(format!("label {label} is not registered")))
}

/// Scores of every sample against every registered class under `head`.
pub fn score_all(state: &ModelState, maps: &[&FeatureMap], head: Head) -> Result<Vec<Vec<f64>>> {
    match head {
        Head::Composition => {
            let scorer = CompositionScorer::new(state.bank.blocks().iter(), state.hp.alpha)?;
            let xs: Vec<&Matrix> = maps.iter().map(|m| m.x()).collect();
            scorer.score_batch(&xs)
        }
        Head::Baseline => {
            let w = &state.weights;
            let norms: Vec<f64> = (0..w.len()).map(|c| norm(w.row(c))).collect();
            if let Some(c) = norms.iter().position(|&n| n == 0.0) {
                return Err(Error::DegenerateInput(format!(
                    "prototype row for class {} has zero norm",
                    w.classes()[c]
                )));
            }
            maps.par_iter()
                .map(|m| {
                    let f = m.pooled();
                    let fnorm = norm(&f);
                    if fnorm == 0.0 {
                        return Err(Error::DegenerateInput(format!(
                            "sample {} pools to the zero vector",
                            m.sample_id
                        )));
                    }
                    Ok((0..w.len())
                        .map(|c| dot(&f, w.row(c)) / (fnorm * norms[c]))
                        .collect())
                })
                .collect()
        }
        Head::Allmatch | Head::Maxmatch => {
            let mode = if head == Head::Allmatch {
                MatchMode::Mean
            } else {
                MatchMode::Max
            };
            maps.par_iter()
                .map(|m| {
                    state
                        .bank
                        .blocks()
                        .iter()
                        .map(|z| allmatch_similarity(m.x(), z, mode))
                        .collect()
                })
                .collect()
        }
    }
}

/// Argmax over `candidates` (bank indices), lowest index on ties.
fn restricted_argmax(scores: &[f64], candidates: &[usize]) -> usize {
    let sub: Vec<f64> = candidates.iter().map(|&c| scores[c]).collect();
    candidates[argmax(&sub)]
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Accuracy after every session the model has seen. Classes from later
/// sessions are frozen, so evaluating session `k` with the final state
/// restricted to classes of sessions `≤ k` matches the state after `k`.
/// Test samples from sessions the model has not reached are skipped.
pub fn evaluate_sessions(
    state: &ModelState,
    test: &[FeatureMap],
    head: Head,
) -> Result<EvalReport> {
    let refs: Vec<&FeatureMap> = test
        .iter()
        .filter(|m| m.session < state.sessions_seen.max(1))
        .collect();
    let labels = refs
        .iter()
        .map(|m| class_index(state, m.label))
        .collect::<Result<Vec<_>>>()?;
    let scores = score_all(state, &refs, head)?;
    let session: Vec<u32> = state
        .classes()
        .iter()
        .map(|&c| state.session_of(c).unwrap_or(0))
        .collect();
    let k = state.classes().len();
    let mut sessions = Vec::new();
    let mut confusion = vec![vec![0u64; k]; k];
    for s in 0..state.sessions_seen.max(1) {
        let seen: Vec<usize> = (0..k).filter(|&c| session[c] <= s).collect();
        let novel: Vec<usize> = seen.iter().copied().filter(|&c| session[c] > 0).collect();
        let (mut hits, mut total, mut base_hits, mut base_total) = (0, 0, 0, 0);
        let (mut novel_hits, mut novel_total) = (0, 0);
        for (i, &y) in labels.iter().enumerate() {
            if session[y] > s {
                continue;
            }
            let pred = restricted_argmax(&scores[i], &seen);
            total += 1;
            hits += usize::from(pred == y);
            if session[y] == 0 {
                base_total += 1;
                base_hits += usize::from(pred == y);
            } else {
                novel_total += 1;
                novel_hits += usize::from(restricted_argmax(&scores[i], &novel) == y);
            }
            if s + 1 == state.sessions_seen.max(1) {
                confusion[y][pred] += 1;
            }
        }
        sessions.push(SessionAccuracy {
            session: s,
            overall: percent(hits, total),
            base: percent(base_hits, base_total),
            novel: (s > 0).then(|| percent(novel_hits, novel_total)),
            n_test: total,
        });
    }
    let overall: Vec<f64> = sessions.iter().map(|s| s.overall).collect();
    Ok(EvalReport {
        pd: performance_drop(&overall)?,
        sessions,
        head,
        seed: state.hp.seed,
        hyperparams: state.hp.clone(),
        classes: state.classes().to_vec(),
        confusion,
    })
}

/// Which class a sample's patches are ranked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankBy {
    /// The class predicted from the full map.
    Predicted,
    /// The ground-truth label.
    TrueLabel,
}

/// Per-patch importance of every sample against its ranking class, on the
/// power-transformed map.
pub fn sample_importance(
    state: &ModelState,
    maps: &[&FeatureMap],
    rank_by: RankBy,
) -> Result<Vec<Vec<f64>>> {
    let targets: Vec<usize> = match rank_by {
        RankBy::TrueLabel => maps
            .iter()
            .map(|m| class_index(state, m.label))
            .collect::<Result<_>>()?,
        RankBy::Predicted => score_all(state, maps, Head::Composition)?
            .iter()
            .map(|s| argmax(s))
            .collect(),
    };
    let blocks = state
        .bank
        .blocks()
        .iter()
        .zip(state.classes())
        .map(|(b, &c)| CenteredSet::new(b).map_err(|e| e.for_class(c)))
        .collect::<Result<Vec<_>>>()?;
    maps.par_iter()
        .zip(targets.par_iter())
        .map(|(m, &t)| {
            let xs = CenteredSet::new(&power_transform(m.x(), state.hp.alpha))?;
            Ok(importance_centered(&xs, &blocks[t]))
        })
        .collect()
}

/// Indices of the `k` largest values, returned in ascending index order.
/// Ties prefer the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPoint {
    pub keep: usize,
    pub accuracy: f64,
}

/// Accuracy over all registered classes after keeping only each sample's
/// `k` most important patches, for every `k` in `keep`.
pub fn importance_filter_eval(
    state: &ModelState,
    test: &[FeatureMap],
    keep: &[usize],
    rank_by: RankBy,
) -> Result<Vec<FilterPoint>> {
    let min_patches = test.iter().map(FeatureMap::patches).min().unwrap_or(0);
    if let Some(&k) = keep.iter().find(|&&k| k == 0 || k > min_patches) {
        return Err(Error::invalid(format!(
            "keep count {k} outside 1..={min_patches}"
        )));
    }
    let refs: Vec<&FeatureMap> = test.iter().collect();
    let labels = refs
        .iter()
        .map(|m| class_index(state, m.label))
        .collect::<Result<Vec<_>>>()?;
    let importance = sample_importance(state, &refs, rank_by)?;
    let scorer = CompositionScorer::new(state.bank.blocks().iter(), state.hp.alpha)?;
    keep.iter()
        .map(|&k| {
            let reduced = refs
                .iter()
                .zip(&importance)
                .map(|(m, imp)| m.x().select_rows(&top_k_indices(imp, k)))
                .collect::<Result<Vec<_>>>()?;
            let xs: Vec<&Matrix> = reduced.iter().collect();
            let scores = scorer.score_batch(&xs)?;
            let hits = scores
                .iter()
                .zip(&labels)
                .filter(|(s, &y)| argmax(s) == y)
                .count();
            Ok(FilterPoint {
                keep: k,
                accuracy: percent(hits, labels.len()),
            })
        })
        .collect()
}

/// Area under the ROC curve for separating `positive` entries by `score`
/// (Mann–Whitney statistic, ties count one half). `None` if either class is empty.
pub fn roc_auc(score: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = score
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = score
        .iter()
        .zip(positive)
        .filter(|(_, &p)| !p)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += match p.total_cmp(n) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Mean per-sample AUC of patch importance against the shared-patch
/// annotations of a synthetic dataset's test split, over sessions the model has reached.
pub fn importance_auc(state: &ModelState, ds: &Dataset, rank_by: RankBy) -> Result<f64> {
    let test = ds.test();
    let refs: Vec<&FeatureMap> = test
        .iter()
        .filter(|m| m.session < state.sessions_seen.max(1))
        .collect();
    let importance = sample_importance(state, &refs, rank_by)?;
    let mut aucs = Vec::new();
    for (m, imp) in refs.iter().zip(&importance) {
        let ann = ds
            .annotation(&m.sample_id)
            .ok_or_else(|| Error::invalid(format!("no annotation for {}", m.sample_id)))?;
        if let Some(a) = roc_auc(imp, &ann.shared) {
            aucs.push(a);
        }
    }
    if aucs.is_empty() {
        return Err(Error::InsufficientData(
            "no sample has both shared and distractor patches".into(),
        ));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub ratio: f64,
    /// Novel accuracy with replaced primitives, percent.
    pub accuracy: f64,
    /// `100 · accuracy / original accuracy`.
    pub retention: f64,
}

fn novel_accuracy(state: &ModelState, maps: &[&FeatureMap], novel: &[usize]) -> Result<f64> {
    let scores = score_all(state, maps, Head::Composition)?;
    let mut hits = 0;
    for (m, s) in maps.iter().zip(&scores) {
        hits += usize::from(restricted_argmax(s, novel) == class_index(state, m.label)?);
    }
    Ok(percent(hits, maps.len()))
}

/// Novel-class accuracy retained when a fraction of every novel class's
/// primitives is overwritten by the nearest base-class primitive.
pub fn reuse_retention_eval(
    state: &ModelState,
    test: &[FeatureMap],
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<RetentionPoint>> {
    let novel_ids: Vec<ClassId> = state
        .registry
        .iter()
        .filter(|r| r.session > 0)
        .map(|r| r.class)
        .collect();
    let base_ids: Vec<ClassId> = state
        .registry
        .iter()
        .filter(|r| r.session == 0)
        .map(|r| r.class)
        .collect();
    if novel_ids.is_empty() {
        return Err(Error::invalid("model has no novel classes"));
    }
    let novel_idx = novel_ids
        .iter()
        .map(|&c| class_index(state, c))
        .collect::<Result<Vec<_>>>()?;
    let maps: Vec<&FeatureMap> = test
        .iter()
        .filter(|m| novel_ids.contains(&m.label))
        .collect();
    if maps.is_empty() {
        return Err(Error::invalid("no novel-class test samples"));
    }
    let original = novel_accuracy(state, &maps, &novel_idx)?;
    if original == 0.0 {
        return Err(Error::DegenerateInput(
            "original novel accuracy is zero".into(),
        ));
    }
    ratios
        .iter()
        .map(|&ratio| {
            let bank = hard_nearest_replace(&state.bank, &novel_ids, &base_ids, ratio, seed)?;
            let replaced = ModelState {
                bank,
                ..state.clone()
            };
            let accuracy = novel_accuracy(&replaced, &maps, &novel_idx)?;
            Ok(RetentionPoint {
                ratio,
                accuracy,
                retention: 100.0 * (accuracy / original),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_prims: usize,
    pub report: EvalReport,
}

/// Trains and evaluates one full run per primitive count, sharing seeds.
pub fn primitive_count_sweep(
    ds: &Dataset,
    n_values: &[usize],
    hp: &Hyperparams,
    head: Head,
) -> Result<Vec<SweepRow>> {
    let schedule = SessionSchedule::from_dataset(ds)?;
    let sessions = ds.sessions();
    let test = ds.test();
    n_values
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::invalid("primitive count must be at least 1"));
            }
            let hp = Hyperparams {
                n_prims: n,
                ..hp.clone()
            };
            let state = train_all_sessions(&schedule.base, &sessions, &hp)?;
            Ok(SweepRow {
                n_prims: n,
                report: evaluate_sessions(&state, &test, head)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Median over repetitions, scaled to 100 maps.
    pub seconds_per_100: f64,
    pub runs: Vec<f64>,
    pub maps: usize,
    pub classes: usize,
}

/// Wall-clock time to composition-score and classify `maps`, median of `reps` runs.
pub fn throughput_bench(
    state: &ModelState,
    maps: &[Matrix],
    reps: usize,
) -> Result<ThroughputReport> {
    if maps.is_empty() {
        return Err(Error::invalid("no maps to score"));
    }
    let reps = reps.max(1);
    let refs: Vec<&Matrix> = maps.iter().collect();
    let mut runs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let scorer = CompositionScorer::new(state.bank.blocks().iter(), state.hp.alpha)?;
        let preds: Vec<usize> = scorer
            .score_batch(&refs)?
            .iter()
            .map(|s| argmax(s))
            .collect();
        std::hint::black_box(preds);
        runs.push(start.elapsed().as_secs_f64() * 100.0 / maps.len() as f64);
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(ThroughputReport {
        seconds_per_100: sorted[sorted.len() / 2],
        runs,
        maps: maps.len(),
        classes: state.classes().len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPatch {
    pub sample_id: String,
    pub patch: usize,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitivePairing {
    pub primitive: usize,
    pub other_class: ClassId,
    pub other_primitive: usize,
    pub squared_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRetrieval {
    pub class: ClassId,
    pub top_patches: Vec<RetrievedPatch>,
    pub nearest: Vec<PrimitivePairing>,
}

/// Per class: the `top_k` most important test patches of its own samples
/// and, for every primitive, the nearest primitive of any other class.
pub fn composition_retrieval(
    state: &ModelState,
    test: &[FeatureMap],
    top_k: usize,
) -> Result<Vec<ClassRetrieval>> {
    let refs: Vec<&FeatureMap> = test.iter().collect();
    let importance = sample_importance(state, &refs, RankBy::TrueLabel)?;
    let bank = &state.bank;
    let mut out = Vec::with_capacity(bank.len());
    for (ci, &class) in bank.classes().iter().enumerate() {
        let mut patches: Vec<RetrievedPatch> = refs
            .iter()
            .zip(&importance)
            .filter(|(m, _)| m.label == class)
            .flat_map(|(m, imp)| {
                imp.iter()
                    .enumerate()
                    .map(|(patch, &importance)| RetrievedPatch {
                        sample_id: m.sample_id.clone(),
                        patch,
                        importance,
                    })
            })
            .collect();
        patches.sort_by(|a, b| b.importance.total_cmp(&a.importance));
        patches.truncate(top_k);
        let nearest = (0..bank.n_prims())
            .filter_map(|i| {
                let p = bank.primitive(ci, i);
                let mut best: Option<PrimitivePairing> = None;
                for (oj, &other) in bank.classes().iter().enumerate() {
                    if oj == ci {
                        continue;
                    }
                    for k in 0..bank.n_prims() {
                        let d = squared_distance(p, bank.primitive(oj, k));
                        if best.as_ref().is_none_or(|b| d < b.squared_distance) {
                            best = Some(PrimitivePairing {
                                primitive: i,
                                other_class: other,
                                other_primitive: k,
                                squared_distance: d,
                            });
                        }
                    }
                }
                best
            })
            .collect();
        out.push(ClassRetrieval {
            class,
            top_patches: patches,
            nearest,
        });
    }
    Ok(out)
}
