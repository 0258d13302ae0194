//! Dataset ingestion, results persistence and run configuration.

mod config;
mod dataset;
mod results;

pub use config::{Auto, ConfigValue, InitKind, ProblemKind, RunConfig};
pub use dataset::{
    data_dir, find_mnist, load_idx, make_synthetic_classification, write_idx, Dataset,
    DATA_DIR_ENV, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use results::{
    format_float, parse_float, parse_keyvalue, read_results, write_results, Report, ResultsFormat,
};
