//! Embedding file formats and the synthetic dataset generator.
//!
//! Two on-disk formats are supported: the little-endian `.fsle` binary format
//! (see [`binary`]) and a plain CSV with one frame per row (see [`table`]).

pub mod binary;
pub mod synth;
pub mod table;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::datamodel::Dataset;
use crate::error::{FslError, Result};

pub use binary::{read_embeddings, write_embeddings, HEADER_FIXED_BYTES, MAGIC, VERSION};
pub use synth::{synth_dataset, SynthSpec};
pub use table::{read_csv, write_csv};

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads a `.fsle` or `.csv` file; the dataset is named after the file stem.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    if is_csv(path) {
        read_csv(reader, stem(path))
    } else {
        read_embeddings(reader, stem(path))
    }
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(FslError::SinkFailure)?;
    let mut sink = BufWriter::new(file);
    if is_csv(path) {
        write_csv(dataset, &mut sink)?;
    } else {
        write_embeddings(dataset, &mut sink)?;
    }
    sink.flush().map_err(FslError::SinkFailure)
}
