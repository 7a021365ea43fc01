//! Transferability estimation for semantic segmentation.
//!
//! Pixels from a source and a target task are matched by entropic optimal
//! transport over their feature vectors. The plan induces a joint
//! distribution of source and target labels, and the negative conditional
//! entropy `-H(Y_t | Y_s)` of that joint scores how well the source transfers.
//! Because segmentation datasets hold millions of pixels, scores are averaged
//! over repeated random draws of `N` pixels per task.
//!
//! Modules:
//!
//! * [`pixelset`] and [`container`]: task exports, their on-disk layouts, and
//!   flattening into per-pixel `(feature, label)` sets;
//! * [`ot`]: cost matrices, log-domain Sinkhorn, and an exact small-instance
//!   solver;
//! * [`otce`]: label joints, conditional entropy, and the sampled score;
//! * [`eval`]: correlation of scores against measured transfer accuracy;
//! * [`synthetic`]: Gaussian-mixture task pairs with known relatedness.
//!
//! The `parallel` feature (on by default) runs row reductions, repetitions and
//! evaluation records on the rayon pool. Results are bitwise identical with
//! and without it.

pub mod container;
pub mod error;
pub mod eval;
pub mod exec;
pub mod npy;
pub mod ot;
pub mod otce;
pub mod pixelset;
pub mod stats;
pub mod synthetic;

pub use container::{load_task_export, save_task_export, save_task_export_dir};
pub use error::{Error, Result};
pub use exec::Execution;
pub use ot::{
    compute_cost_matrix, exact_ot_oracle, sinkhorn, transport_cost, CostMatrix, CouplingMatrix,
    SinkhornConfig, SinkhornSolution,
};
pub use otce::{
    conditional_entropy, label_joint_from_coupling, otce_sampled, otce_single, LabelJoint,
    Preprocess, SamplingConfig, TransferScore,
};
pub use pixelset::{flatten_to_pixelset, PixelSet, TaskExport};
