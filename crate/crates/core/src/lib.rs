//! Checkpoint merging by weight-space interpolation, finetuning-path analyses, and a
//! deterministic toy behavioral-cloning lab.
//!
//! * [`tensorstore`]: named-tensor checkpoints and their single-file container.
//! * [`grouping`]: longest-prefix partition of tensor names into parameter groups.
//! * [`merge`]: uniform, group-wise and continual interpolation.
//! * [`pathlab`]: cosine, PCA and Gram-spectrum analyses of a trajectory.
//! * [`toylab`]: a 2-D goal-reaching lab for pretrain → finetune → merge → evaluate.

pub mod grouping;
pub mod merge;
pub mod pathlab;
pub mod tensorstore;
pub mod toylab;

pub use grouping::{partition, GroupSpec, Partition};
pub use merge::{merge_continual, merge_grouped, merge_uniform, select_alpha, MergePlan, SkillSequence};
pub use pathlab::{consecutive_cosines, diff_pca, gram_singular_values, DiffMatrix, Trajectory};
pub use tensorstore::{flatten_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Dtype, Tensor};
