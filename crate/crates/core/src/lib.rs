//! Compositional few-shot class-incremental classification heads.
//!
//! Each sample is a set of patch features (its candidate primitives) and each
//! class owns a small learned set of primitives. A sample is scored against a
//! class by how well its patches compose from that class's primitives,
//! measured with row-centered linear CKA. Training combines a cosine
//! prototype loss, the composition loss, and a composition loss on
//! primitives rebuilt from other classes' primitives (which pushes
//! primitives to be reusable). Incremental sessions add classes from a few
//! shots while everything learned earlier stays frozen.
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`numkit`] | dense matrices, softmax, finite-difference gradients |
//! | [`cka`] | centering, linear CKA, match weights, patch importance, baselines |
//! | [`primitives`] | primitive bank, k-means init, attention and hard replacement |
//! | [`losses`] | the three losses, their weighted sum, analytic gradients |
//! | [`training`] | SGD with momentum, base and incremental sessions, checkpoints |
//! | [`protocol`] | session evaluation, forgetting, filtering and reuse analyses |
//! | [`data`] | tensor files, manifests, synthetic compositional generator |

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod cka;
pub mod data;
pub mod error;
pub mod losses;
pub mod numkit;
pub mod primitives;
pub mod protocol;
pub mod rng;
pub mod training;

pub use cka::{
    allmatch_similarity, center_rows, cka_rc, composition_score, linear_cka, match_weights,
    patch_importance, power_transform, CompositionScore, CompositionScorer, FeatureMap, MatchMode,
    MatchWeights,
};
pub use error::{Error, Result};
pub use losses::{ClassifierWeights, Hyperparams, Preset};
pub use numkit::{central_diff_grad, frobenius_norm, stable_softmax, Matrix};
pub use primitives::{InitScheme, PrimitiveBank};
pub use protocol::{EvalReport, Head, SessionSchedule};
pub use training::ModelState;

/// Class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}
