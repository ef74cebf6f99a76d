//! The `.fsle` binary embedding format.
//!
//! ```text
//! header:  "FSLE" | version u32 | num_records u32 | dim u32 | num_classes u32
//!          | table_len u32 | table_len bytes of '\n'-joined UTF-8 names
//! record:  patient u32 | sequence u32 | frame u32 | label u8 | dim x f32
//! ```
//!
//! All integers and floats are little-endian. Patient and sequence fields
//! are indices into the shared name table. Extra table entries that no
//! record references are allowed (writers may store provenance there).

use std::collections::HashMap;
use std::io::{self, Read, Write};

use crate::datamodel::{validate_dataset, Dataset, EmbeddingRecord};
use crate::error::{FslError, Result};

pub const MAGIC: &[u8; 4] = b"FSLE";
pub const VERSION: u32 = 1;
/// Header size without the name table.
pub const HEADER_FIXED_BYTES: usize = 24;

struct NameTable<'a> {
    names: Vec<&'a str>,
    index: HashMap<&'a str, u32>,
}

impl<'a> NameTable<'a> {
    fn intern(&mut self, name: &'a str) -> u32 {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len() as u32;
        self.names.push(name);
        self.index.insert(name, i);
        i
    }
}

fn sink_err(e: io::Error) -> FslError {
    FslError::SinkFailure(e)
}

/// Writes `dataset` and returns the number of bytes written.
pub fn write_embeddings<W: Write>(dataset: &Dataset, sink: &mut W) -> Result<u64> {
    if dataset.is_empty() {
        return Err(FslError::DatasetEmpty);
    }
    let report = validate_dataset(dataset);
    if !report.is_empty() {
        return Err(FslError::InvalidDataset(report.to_string()));
    }
    if dataset.num_classes > 256 {
        return Err(FslError::InvalidDataset("labels must fit in one byte".into()));
    }
    let mut table = NameTable { names: Vec::new(), index: HashMap::new() };
    let mut ids = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        if r.patient_id.contains('\n') || r.sequence_id.contains('\n') {
            return Err(FslError::InvalidDataset(format!("identifier of {} contains a newline", r.key())));
        }
        ids.push((table.intern(&r.patient_id), table.intern(&r.sequence_id)));
    }
    let joined = table.names.join("\n");

    let mut header = Vec::with_capacity(HEADER_FIXED_BYTES + joined.len());
    header.extend_from_slice(MAGIC);
    for v in [VERSION, dataset.len() as u32, dataset.dim as u32, dataset.num_classes as u32, joined.len() as u32] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    header.extend_from_slice(joined.as_bytes());
    sink.write_all(&header).map_err(sink_err)?;

    let mut written = header.len() as u64;
    let mut buf = Vec::with_capacity(13 + 4 * dataset.dim);
    for (r, (p, s)) in dataset.records.iter().zip(ids) {
        buf.clear();
        buf.extend_from_slice(&p.to_le_bytes());
        buf.extend_from_slice(&s.to_le_bytes());
        buf.extend_from_slice(&r.frame_index.to_le_bytes());
        buf.push(r.label as u8);
        for v in &r.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf).map_err(sink_err)?;
        written += buf.len() as u64;
    }
    Ok(written)
}

fn read_exact<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FslError::TruncatedFile(format!("while reading {what}")),
        _ => FslError::Io(e),
    })
}

fn read_u32<R: Read>(src: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a `.fsle` stream into a validated dataset called `name`.
pub fn read_embeddings<R: Read>(mut source: R, name: impl Into<String>) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FslError::BadMagic,
        _ => FslError::Io(e),
    })?;
    if &magic != MAGIC {
        return Err(FslError::BadMagic);
    }
    let version = read_u32(&mut source, "version")?;
    if version != VERSION {
        return Err(FslError::UnsupportedVersion(version));
    }
    let num_records = read_u32(&mut source, "record count")? as usize;
    let dim = read_u32(&mut source, "dimension")? as usize;
    let num_classes = read_u32(&mut source, "class count")? as usize;
    if num_records == 0 || dim == 0 {
        return Err(FslError::InvalidDataset("record count and dimension must be >= 1".into()));
    }
    let table_len = read_u32(&mut source, "name table length")? as usize;
    let mut table_bytes = vec![0u8; table_len];
    read_exact(&mut source, &mut table_bytes, "name table")?;
    let table =
        String::from_utf8(table_bytes).map_err(|_| FslError::InvalidDataset("name table is not UTF-8".into()))?;
    let names: Vec<&str> = table.split('\n').collect();
    let lookup = |i: u32, rec: usize| -> Result<String> {
        names
            .get(i as usize)
            .map(|s| s.to_string())
            .ok_or_else(|| FslError::InvalidDataset(format!("record {rec}: name index {i} out of range")))
    };

    let mut records = Vec::with_capacity(num_records.min(1 << 20));
    let mut buf = vec![0u8; 13 + 4 * dim];
    for i in 0..num_records {
        read_exact(&mut source, &mut buf, &format!("record {i} of {num_records}"))?;
        let word = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
        let vector = buf[13..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.push(EmbeddingRecord {
            patient_id: lookup(word(0), i)?,
            sequence_id: lookup(word(4), i)?,
            frame_index: word(8),
            label: buf[12] as usize,
            vector,
        });
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(FslError::InvalidDataset("trailing bytes after last record".into()));
    }
    Dataset::new(name, dim, num_classes, records)
}
