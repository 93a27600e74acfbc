//! On-disk model container, manifest, in-memory model handle and the
//! synthetic model generator.

pub mod compressed;
pub mod container;
pub mod manifest;
pub mod model;
pub mod synth;

pub use compressed::{
    container_path_for, save_compressed, MODEL_CONTAINER_FILE, MODEL_MANIFEST_FILE,
};
pub use container::{DType, TensorBlob, TensorMap};
pub use manifest::{
    Activation, BlockKind, BlockSpec, LowRankEntry, ModelManifest, SlotId, SlotKind,
};
pub use model::{
    load_model, rms_normalize, Block, BlockTrace, CalibrationTensor, ModelHandle, Slot, SlotWeights,
};
pub use synth::{gen_synthetic, SynthConfig};
