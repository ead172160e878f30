//! Tensor files, dataset manifests and the synthetic generator.

pub mod manifest;
pub mod npy;
pub mod synth;
pub mod tensor;

pub use manifest::{Annotations, Dataset, Manifest, SampleAnnotation, SampleRecord, Split};
pub use synth::{save_synth, synth_generate, SynthConfig};
pub use tensor::{read_tensor, write_tensor, Dtype, Tensor};
