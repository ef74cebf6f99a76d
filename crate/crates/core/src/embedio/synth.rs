//! Synthetic patient-clustered embeddings.
//!
//! Each frame is `class_mean + patient_offset + noise` with
//! `class_mean = 0` for benign and `class_separation * u` for malignant,
//! where `u = (1, ..., 1) / sqrt(D)`. Offsets are drawn once per patient,
//! noise once per frame. Every draw is a standard normal scaled afterwards,
//! so two specs that differ only in their sigmas share the same underlying
//! random numbers for a given seed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, EmbeddingRecord, BENIGN, MALIGNANT};
use crate::error::{FslError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_patients: usize,
    pub frames_per_patient_per_class: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub patient_sigma: f64,
    pub noise_sigma: f64,
    pub malignant_patient_fraction: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(FslError::InvalidSpec { field, reason: reason.into() });
        if self.num_patients < 1 {
            return bad("num_patients", "must be >= 1");
        }
        if self.frames_per_patient_per_class < 1 {
            return bad("frames_per_patient_per_class", "must be >= 1");
        }
        if self.dim < 1 {
            return bad("dim", "must be >= 1");
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return bad("class_separation", "must be finite and >= 0");
        }
        if !(self.patient_sigma.is_finite() && self.patient_sigma >= 0.0) {
            return bad("patient_sigma", "must be finite and >= 0");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return bad("noise_sigma", "must be finite and > 0");
        }
        if !(0.0..=1.0).contains(&self.malignant_patient_fraction) {
            return bad("malignant_patient_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn malignant_patients(&self) -> usize {
        (self.malignant_patient_fraction * self.num_patients as f64).ceil() as usize
    }
}

pub fn patient_id(index: usize, total: usize) -> String {
    let width = total.to_string().len().max(2);
    format!("P{:0width$}", index + 1)
}

fn normals(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Deterministic in `(spec, seed)`. Patients selected as malignant carry
/// both classes (one sequence each); the rest carry only benign frames.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = rng::seeded(seed);

    let mut order: Vec<usize> = (0..spec.num_patients).collect();
    order.shuffle(&mut rng);
    let mut malignant = vec![false; spec.num_patients];
    for &p in order.iter().take(spec.malignant_patients()) {
        malignant[p] = true;
    }

    let shift = spec.class_separation / (d as f64).sqrt();
    let mut records = Vec::new();
    for (p, &has_tumor) in malignant.iter().enumerate() {
        let pid = patient_id(p, spec.num_patients);
        let offset = normals(&mut rng, d);
        let classes: &[usize] = if has_tumor { &[BENIGN, MALIGNANT] } else { &[BENIGN] };
        for &label in classes {
            let mean = if label == MALIGNANT { shift } else { 0.0 };
            for f in 0..spec.frames_per_patient_per_class {
                let noise = normals(&mut rng, d);
                let vector = offset
                    .iter()
                    .zip(&noise)
                    .map(|(o, e)| (mean + spec.patient_sigma * o + spec.noise_sigma * e) as f32)
                    .collect();
                records.push(EmbeddingRecord {
                    patient_id: pid.clone(),
                    sequence_id: format!("s{label}"),
                    frame_index: f as u32,
                    label,
                    vector,
                });
            }
        }
    }
    Dataset::new(format!("synth-{seed}"), d, 2, records)
}
