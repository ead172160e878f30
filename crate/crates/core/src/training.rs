//! SGD with momentum and the session loops: a base session that trains all
//! base-class primitives and prototype rows, and incremental sessions that
//! add classes from a few shots while earlier classes stay frozen.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cka::{power_transform, FeatureMap};
use crate::data::tensor::{read_tensor, write_tensor, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    gram_route, loss_and_grad_prepared, prepare, ClassifierWeights, Grads, Hyperparams,
    LossWeights, PreparedSample, TrainableMask,
};
use crate::numkit::Matrix;
use crate::primitives::{extend_bank, init_primitive_bank, DonorMap, PrimitiveBank};
use crate::rng::substream;
use crate::ClassId;

/// Momentum buffers for every bank block and prototype row.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    vz: Vec<Matrix>,
    vw: Matrix,
}

impl OptimizerState {
    pub fn new(bank: &PrimitiveBank, w: &ClassifierWeights, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            vz: vec![Matrix::zeros(bank.n_prims(), bank.dim()); bank.len()],
            vw: Matrix::zeros(w.len(), w.rows().cols()),
        }
    }

    pub fn velocity_z(&self) -> &[Matrix] {
        &self.vz
    }

    pub fn velocity_w(&self) -> &Matrix {
        &self.vw
    }
}

/// `v ← μ·v + g; θ ← θ − lr·v` on the entries marked trainable.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    trainable: impl Fn(usize) -> bool,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid(format!(
            "shape mismatch: {} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for i in 0..params.len() {
        if trainable(i) {
            velocity[i] = momentum * velocity[i] + grads[i];
            params[i] -= lr * velocity[i];
        }
    }
    Ok(())
}

/// One optimizer step over the bank and prototype rows; masked rows are untouched.
pub fn sgd_step(
    bank: &mut PrimitiveBank,
    w: &mut ClassifierWeights,
    grads: &Grads,
    mask: &TrainableMask,
    opt: &mut OptimizerState,
) -> Result<()> {
    if grads.z.len() != bank.len()
        || opt.vz.len() != bank.len()
        || mask.z.len() != bank.len()
        || grads.w.rows() != w.len()
        || opt.vw.rows() != w.len()
        || mask.w.len() != w.len()
    {
        return Err(Error::invalid(
            "gradient, velocity and parameter shapes differ",
        ));
    }
    let dim = bank.dim();
    for c in 0..bank.len() {
        if grads.z[c].rows() != bank.n_prims() || grads.z[c].cols() != dim {
            return Err(Error::invalid(
                "gradient block shape differs from bank block",
            ));
        }
        let rows = &mask.z[c];
        sgd_update(
            bank.block_mut(c).data_mut(),
            grads.z[c].data(),
            opt.vz[c].data_mut(),
            |i| rows[i / dim],
            opt.lr,
            opt.momentum,
        )?;
    }
    let wdim = w.rows().cols();
    if grads.w.cols() != wdim {
        return Err(Error::invalid(
            "gradient row width differs from prototype width",
        ));
    }
    sgd_update(
        w.rows_mut().data_mut(),
        grads.w.data(),
        opt.vw.data_mut(),
        |i| mask.w[i / wdim],
        opt.lr,
        opt.momentum,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub class: ClassId,
    /// Session the class was introduced in.
    pub session: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session: u32,
    /// Sample-weighted mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Everything learned so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub bank: PrimitiveBank,
    pub weights: ClassifierWeights,
    pub hp: Hyperparams,
    pub sessions_seen: u32,
    pub registry: Vec<ClassRecord>,
    pub history: Vec<SessionLog>,
}

impl ModelState {
    pub fn classes(&self) -> &[ClassId] {
        self.bank.classes()
    }

    pub fn session_of(&self, class: ClassId) -> Option<u32> {
        self.registry
            .iter()
            .find(|r| r.class == class)
            .map(|r| r.session)
    }

    /// Bank indices of base-session classes.
    pub fn is_base(&self) -> Vec<bool> {
        self.classes()
            .iter()
            .map(|&c| self.session_of(c) == Some(0))
            .collect()
    }

    pub fn donors(&self) -> DonorMap {
        DonorMap::base_pool(&self.is_base())
    }

    /// Writes `bank.ckat`, `weights.ckat`, `bank.json` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bank = Tensor::f64(
            vec![self.bank.len(), self.bank.n_prims(), self.bank.dim()],
            self.bank.flat(),
        )?;
        write_tensor(&dir.join("bank.ckat"), &bank)?;
        let w = Tensor::from_matrix(self.weights.rows());
        write_tensor(&dir.join("weights.ckat"), &w)?;
        let meta = BankMeta {
            classes: self.bank.classes().to_vec(),
            frozen: self.bank.frozen().to_vec(),
            weights_frozen: self.weights.frozen().to_vec(),
        };
        write_json(&dir.join("bank.json"), &meta)?;
        let state = StateMeta {
            hyperparams: self.hp.clone(),
            sessions_seen: self.sessions_seen,
            registry: self.registry.clone(),
            history: self.history.clone(),
            rng: RngMeta {
                seed: self.hp.seed,
                generator: "chacha8 named substreams".into(),
            },
        };
        write_json(&dir.join("state.json"), &state)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: BankMeta = read_json(&dir.join("bank.json"))?;
        let state: StateMeta = read_json(&dir.join("state.json"))?;
        let bank_t = read_tensor(&dir.join("bank.ckat"))?;
        let dims = bank_t.dims().to_vec();
        if dims.len() != 3 || dims[0] != meta.classes.len() {
            return Err(Error::invalid("bank tensor shape does not match bank.json"));
        }
        let (k, n, d) = (dims[0], dims[1], dims[2]);
        let data = bank_t.to_f64();
        let blocks = (0..k)
            .map(|c| Matrix::new(n, d, data[c * n * d..(c + 1) * n * d].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let bank = PrimitiveBank::new(meta.classes.clone(), blocks, meta.frozen)?;
        let rows = read_tensor(&dir.join("weights.ckat"))?.to_matrix()?;
        let weights = ClassifierWeights::new(meta.classes, rows, meta.weights_frozen)?;
        state.hyperparams.validate()?;
        Ok(Self {
            bank,
            weights,
            hp: state.hyperparams,
            sessions_seen: state.sessions_seen,
            registry: state.registry,
            history: state.history,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankMeta {
    classes: Vec<ClassId>,
    frozen: Vec<bool>,
    weights_frozen: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    hyperparams: Hyperparams,
    sessions_seen: u32,
    registry: Vec<ClassRecord>,
    history: Vec<SessionLog>,
    rng: RngMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngMeta {
    seed: u64,
    generator: String,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn powered(samples: &[FeatureMap], alpha: f64) -> Result<Vec<FeatureMap>> {
    samples
        .iter()
        .map(|s| {
            FeatureMap::new(
                s.sample_id.clone(),
                s.label,
                s.session,
                power_transform(s.x(), alpha),
            )
        })
        .collect()
}

fn sorted_labels(samples: &[FeatureMap]) -> Vec<ClassId> {
    let mut labels: Vec<ClassId> = samples.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

fn check_dim(samples: &[FeatureMap]) -> Result<usize> {
    let d = samples
        .first()
        .ok_or_else(|| Error::invalid("no training samples"))?
        .channels();
    if samples.iter().any(|s| s.channels() != d) {
        return Err(Error::invalid("training samples differ in channel count"));
    }
    Ok(d)
}

/// Runs `epochs` epochs of mini-batch SGD and returns per-epoch mean losses.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    samples: &[FeatureMap],
    bank: &mut PrimitiveBank,
    w: &mut ClassifierWeights,
    hp: &Hyperparams,
    mask: &TrainableMask,
    donors: &DonorMap,
    weights: LossWeights,
    epochs: usize,
    batch_size: usize,
    stream: &str,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    let composition = weights.cmp != 0.0 || weights.rcmp != 0.0;
    let max_patches = samples.iter().map(FeatureMap::patches).max().unwrap_or(1);
    let refs: Vec<&FeatureMap> = samples.iter().collect();
    let prepared = prepare(
        &refs,
        hp.alpha,
        composition,
        gram_route(bank, max_patches, samples.len()),
    )?;
    let mut opt = OptimizerState::new(bank, w, hp.lr, hp.momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        if batch_size < samples.len() {
            order.shuffle(&mut substream(hp.seed, stream, epoch as u64));
        }
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, grads) = loss_and_grad_prepared(&batch, bank, w, donors, hp, mask, weights)?;
            if !loss.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "loss became non-finite in epoch {epoch}"
                )));
            }
            sgd_step(bank, w, &grads, mask, &mut opt)?;
            total += loss * batch.len() as f64;
        }
        losses.push(total / samples.len() as f64);
    }
    Ok(losses)
}

/// Base session: initializes and trains primitives and prototype rows for
/// `classes`, then freezes them. Every class needs at least one sample.
pub fn train_base(
    classes: &[ClassId],
    samples: &[FeatureMap],
    hp: &Hyperparams,
) -> Result<ModelState> {
    hp.validate()?;
    let dim = check_dim(samples)?;
    if classes.is_empty() {
        return Err(Error::invalid("no base classes"));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::invalid("duplicate base class"));
    }
    for &c in classes {
        if !samples.iter().any(|s| s.label == c) {
            return Err(Error::invalid(format!("base class {c} has no samples")));
        }
    }
    if let Some(s) = samples.iter().find(|s| !classes.contains(&s.label)) {
        return Err(Error::invalid(format!(
            "sample {} has label {} outside the base classes",
            s.sample_id, s.label
        )));
    }
    let mut bank = init_primitive_bank(
        classes,
        hp.n_prims,
        dim,
        &hp.init,
        &powered(samples, hp.alpha)?,
        hp.seed,
    )?;
    let mut w = ClassifierWeights::class_means(classes, samples)?;
    let mask = TrainableMask::from_frozen(&bank, &w);
    let donors = if classes.len() > 1 {
        DonorMap::base_pool(&vec![true; classes.len()])
    } else {
        DonorMap(vec![Vec::new()])
    };
    let mut weights = LossWeights::from_hyperparams(hp);
    if classes.len() == 1 {
        // No donors exist for a single class.
        weights.rcmp = 0.0;
    }
    let losses = run_epochs(
        samples,
        &mut bank,
        &mut w,
        hp,
        &mask,
        &donors,
        weights,
        hp.base_epochs,
        hp.batch_size,
        "shuffle-base",
    )?;
    bank.freeze_all();
    w.freeze_all();
    Ok(ModelState {
        bank,
        weights: w,
        hp: hp.clone(),
        sessions_seen: 1,
        registry: classes
            .iter()
            .map(|&class| ClassRecord { class, session: 0 })
            .collect(),
        history: vec![SessionLog {
            session: 0,
            epoch_losses: losses,
        }],
    })
}

/// Incremental session: registers the shots' classes, trains only their
/// primitives (and prototype rows unless disabled) on the full shot set,
/// and freezes them afterwards.
pub fn train_incremental(state: &ModelState, shots: &[FeatureMap]) -> Result<ModelState> {
    let hp = &state.hp;
    let dim = check_dim(shots)?;
    if dim != state.bank.dim() {
        return Err(Error::invalid("shot width differs from the model's"));
    }
    if !state.registry.iter().any(|r| r.session == 0) {
        return Err(Error::invalid("model has no base classes"));
    }
    let new_classes = sorted_labels(shots);
    if let Some(c) = new_classes
        .iter()
        .find(|&&c| state.bank.index_of(c).is_some())
    {
        return Err(Error::invalid(format!("class {c} is already registered")));
    }
    let session = state.sessions_seen;
    let mut bank = extend_bank(
        &state.bank,
        &new_classes,
        &hp.init,
        &powered(shots, hp.alpha)?,
        hp.seed,
    )?;
    let mut w = state
        .weights
        .extend(&ClassifierWeights::class_means(&new_classes, shots)?)?;
    let mut registry = state.registry.clone();
    registry.extend(
        new_classes
            .iter()
            .map(|&class| ClassRecord { class, session }),
    );
    let is_base: Vec<bool> = bank
        .classes()
        .iter()
        .map(|c| registry.iter().any(|r| r.class == *c && r.session == 0))
        .collect();
    let donors = DonorMap::base_pool(&is_base);
    let mut mask = TrainableMask::from_frozen(&bank, &w);
    let mut weights = LossWeights::from_hyperparams(hp);
    if !hp.cls_in_incremental {
        weights.cls = 0.0;
        mask.w.iter_mut().for_each(|t| *t = false);
    }
    let losses = if weights.cls == 0.0 && weights.cmp == 0.0 && weights.rcmp == 0.0 {
        Vec::new()
    } else {
        run_epochs(
            shots,
            &mut bank,
            &mut w,
            hp,
            &mask,
            &donors,
            weights,
            hp.inc_epochs,
            shots.len(),
            "shuffle-incremental",
        )?
    };
    bank.freeze_all();
    w.freeze_all();
    let mut history = state.history.clone();
    history.push(SessionLog {
        session,
        epoch_losses: losses,
    });
    Ok(ModelState {
        bank,
        weights: w,
        hp: hp.clone(),
        sessions_seen: session + 1,
        registry,
        history,
    })
}

/// Base session on `sessions[0]`, then one incremental session per remaining entry.
pub fn train_all_sessions(
    base_classes: &[ClassId],
    sessions: &[Vec<FeatureMap>],
    hp: &Hyperparams,
) -> Result<ModelState> {
    let (first, rest) = sessions
        .split_first()
        .ok_or_else(|| Error::invalid("no sessions"))?;
    let mut state = train_base(base_classes, first, hp)?;
    for shots in rest {
        state = train_incremental(&state, shots)?;
    }
    Ok(state)
}
