//! Specialized and cooperative low-rank adapters and the continual controller.

pub mod adapter;
pub mod checkpoint;
pub mod controller;
pub mod ortho;
pub mod registry;
pub mod train;

pub use adapter::LoraAdapter;
pub use ortho::{orthogonality_loss, orthogonality_matrix};
pub use registry::{compose_for_inference, AdapterRegistry, AdapterRole, CompositionPolicy, TaskAdapterSet};
pub use train::{specialized_objective, train_adapters, DualLoraHyper, Example, TrainLog, TrainSlot};
pub use controller::{
    continue_task_stream, evaluate, report_for, run_task_stream, ControllerState, RunConfig, RunOutput, StageAdapters,
    StageResult, Strategy,
};
