//! Dataset generation and loading, run configuration, and the ablation runner.

mod ablation;
mod io;
mod run;
mod synthetic;

pub use ablation::{
    delta_pct, fill_deltas, read_records, read_records_from, run_ablation, toy_train_config, write_records,
    write_records_to, AblationPlan, DatasetSpec, ExperimentRecord, CSV_HEADER, STATUS_OK,
};
pub use io::{format_labels, load_dataset, load_image, load_labels, parse_labels, write_dataset, write_png};
pub use run::{read_history, write_history, RunConfig};
pub use synthetic::{
    gen_synthetic_dataset, render, sample_name, synthetic_dataset, PlacedShape, ShapeKind, SyntheticData, SyntheticSpec,
};
