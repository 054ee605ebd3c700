//! Optimization loop, data generation and experiment drivers.

mod augment;
mod experiments;
mod optim;
mod schedule;
mod synth;
mod trainer;

pub use augment::{augment, apply_augmentation, AugmentConfig, AugmentParams};
pub use experiments::{
    ablation_arms, ablation_csv, arm_names, default_lambdas, median_by_arm, predict_pairs,
    run_ablation, run_lambda_sweep, sweep_csv, train_and_evaluate, AblationRow, Evaluation,
    ExperimentArm, SweepRow, CROSS_ENTROPY_ARM,
};
pub use optim::{sgd_momentum_step, OptimConfig, OptimState};
pub use schedule::PlateauSchedule;
pub use synth::{generate_synthetic, BORDER_MARGIN, Dataset, Sample, ShapeKind, SyntheticDatasetSpec};
pub use trainer::{load_model_parameters, train, EpochRecord, History, TrainConfig, Trainer};
