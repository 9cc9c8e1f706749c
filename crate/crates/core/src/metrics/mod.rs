//! Solution diversity over softmax snapshots and matrix-free Hessian
//! sharpness.

mod diversity;
mod sharpness;

pub use diversity::{
    pairwise_diversity, read_snapshot_dir, sym_kl, tv_sq, DiversityMetric, DiversityReport,
    SoftmaxSnapshot, TvDistance, PROB_FLOOR,
};
pub use sharpness::{
    frobenius_estimate, hessian_vector_product, sharpness_report, spectral_norm, trace_estimate,
    Objective, QuadraticObjective, SharpnessReport, TaskObjective,
};
