//! Synthetic three-task food stream: vocabulary, dishes, serialization and files.

pub mod corpus;
pub mod dataset;
pub mod io;
pub mod vocab;

pub use dataset::{
    answer_mask_from_markers, build_prompt, generate_dataset, serialize_sample, DatasetParams, Dish, PoolImage,
    Sample, TaskData, TaskKind, TaskStream,
};
pub use io::{load_stream, save_stream};
pub use vocab::Tokenizer;
