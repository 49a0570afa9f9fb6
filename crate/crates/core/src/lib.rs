//! Supervised cross-modal hashing.
//!
//! Learns one binary code per paired object (for example an image and its
//! caption) so that every modality can be mapped into the same Hamming space.
//! Training alternates exact block updates of a relaxed objective that
//! combines kernelized per-modality regression onto the codes, a linear
//! classifier on the codes and a label-consistent code basis. Unseen samples
//! are hashed with `sign(P_m κ(x))`.
//!
//! ```
//! use cmhash::data::{split, synth_multimodal, SplitSpec, SynthSpec};
//! use cmhash::optimizer::{train, TrainConfig};
//! use cmhash::retrieval::{evaluate_task, Task};
//!
//! let ds = synth_multimodal(&SynthSpec {
//!     classes: 3,
//!     per_class: 40,
//!     dims: vec![10, 6],
//!     noise: 0.2,
//!     cross_noise: 0.0,
//!     seed: 1,
//! })?;
//! let (db, queries) = split(&ds, SplitSpec { train_count: 90, seed: 2 })?;
//! let cfg = TrainConfig { bits: 16, anchors: 60, ..TrainConfig::default() };
//! let out = train(&db.modalities, &db.labels, &cfg)?;
//! let i2t = evaluate_task(
//!     &out.model,
//!     Task::ImageToText,
//!     &queries.modalities,
//!     &queries.labels,
//!     &db.modalities,
//!     &db.labels,
//!     None,
//! )?;
//! assert!(i2t.map > 0.9);
//! # Ok::<(), cmhash::Error>(())
//! ```

pub mod codec;
pub mod data;
pub mod error;
pub mod kernel;
pub mod labels;
pub mod optimizer;
pub mod retrieval;

pub use codec::{encode, load_model, save_model, CodeMatrix, HashModel};
pub use error::{Error, Result};
pub use kernel::{KernelMap, ModalityMatrix};
pub use labels::LabelMatrix;
pub use optimizer::{train, TrainConfig, TrainOutcome, TrainReport};
pub use retrieval::{mean_ap, ApResult, Task};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kernel-features.md")]
    mod kernel_features {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/codes.md")]
    mod codes {}
    #[doc = include_str!("../../../book/src/modality-weights.md")]
    mod modality_weights {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
