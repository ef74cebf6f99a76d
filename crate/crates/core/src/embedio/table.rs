//! CSV interchange: `patient_id,sequence_id,frame_index,label,e0,...,e{D-1}`.
//!
//! Floats are written in their shortest round-trip decimal form (at most
//! nine significant digits for `f32`). The class count is not stored; on
//! read it is `max(2, largest label + 1)`.

use std::io::{Read, Write};

use crate::datamodel::{Dataset, EmbeddingRecord};
use crate::error::{FslError, Result};

const ID_COLUMNS: [&str; 4] = ["patient_id", "sequence_id", "frame_index", "label"];

pub fn write_csv<W: Write>(dataset: &Dataset, sink: W) -> Result<()> {
    if dataset.is_empty() {
        return Err(FslError::DatasetEmpty);
    }
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..dataset.dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for r in &dataset.records {
        row.clear();
        row.push(r.patient_id.clone());
        row.push(r.sequence_id.clone());
        row.push(r.frame_index.to_string());
        row.push(r.label.to_string());
        row.extend(r.vector.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(FslError::SinkFailure)
}

/// Reads a CSV stream. Errors name the 1-based data row.
pub fn read_csv<R: Read>(source: R, name: impl Into<String>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let header = rdr.headers()?.clone();
    let malformed = |row: usize, reason: String| FslError::MalformedRow { row, reason };
    if header.len() < 5 || header.iter().take(4).ne(ID_COLUMNS.iter().copied()) {
        return Err(malformed(0, format!("expected header {}..,e0,..", ID_COLUMNS.join(","))));
    }
    let dim = header.len() - 4;
    for (i, col) in header.iter().skip(4).enumerate() {
        if col != format!("e{i}") {
            return Err(malformed(0, format!("feature column {i} is named `{col}`")));
        }
    }

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let n = i + 1;
        let row = row?;
        if row.len() != 4 + dim {
            return Err(malformed(n, format!("expected {} columns, found {}", 4 + dim, row.len())));
        }
        let frame_index = row[2].trim().parse().map_err(|_| malformed(n, format!("bad frame_index `{}`", &row[2])))?;
        let label = row[3].trim().parse().map_err(|_| malformed(n, format!("bad label `{}`", &row[3])))?;
        let vector = row
            .iter()
            .skip(4)
            .map(|s| s.trim().parse::<f32>().map_err(|_| malformed(n, format!("bad value `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        records.push(EmbeddingRecord {
            patient_id: row[0].to_string(),
            sequence_id: row[1].to_string(),
            frame_index,
            label,
            vector,
        });
    }
    if records.is_empty() {
        return Err(FslError::DatasetEmpty);
    }
    let num_classes = records.iter().map(|r| r.label + 1).max().unwrap_or(0).max(2);
    Dataset::new(name, dim, num_classes, records)
}
