//! Acceptance checks for the primary component.
//!
//! Runs as a plain binary (`harness = false`): every criterion prints one
//! `PASS` or `FAIL` line, and the process exits non-zero if any fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use fsl_core::datamodel::{Dataset, EmbeddingRecord};
use fsl_core::diffcore::{grad_check_extrapolated, NodeId, Tape};
use fsl_core::embedio::{read_csv, read_embeddings, synth_dataset, write_csv, write_embeddings, SynthSpec};
use fsl_core::episodic::{
    ablate_patients, cross_validate, evaluate, Episode, EpisodeConfig, EpisodeSampler, Protocol, RunReport, TrainConfig,
};
use fsl_core::experiment::{run_experiment, CvSection, DatasetSection, EvalSection, ExperimentConfig, TrainSection};
use fsl_core::heads::{
    compute_prototypes, matching_scores, proto_scores, simpleshot_scores, softmax_rows, HeadKind, HeadOptions, Model,
    RelationParams,
};
use fsl_core::par::Execution;
use fsl_core::rng;
use fsl_core::stats::Quartiles;
use ndarray::array;
use rand::Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn spec(patients: usize, frames: usize, dim: usize, sep: f64, psigma: f64, noise: f64) -> SynthSpec {
    SynthSpec {
        num_patients: patients,
        frames_per_patient_per_class: frames,
        dim,
        class_separation: sep,
        patient_sigma: psigma,
        noise_sigma: noise,
        malignant_patient_fraction: 1.0,
    }
}

fn protocol(seed: u64) -> Protocol {
    Protocol { train: TrainConfig { seed, ..Default::default() }, ..Default::default() }
}

fn pooled_median(reports: &[RunReport]) -> f64 {
    let all: Vec<f64> = reports.iter().flat_map(|r| r.episode_accuracies.iter().copied()).collect();
    Quartiles::of(&all).expect("evaluation episodes").median
}

fn toy_episode(seed: u64, input_dim: usize) -> Episode {
    let mut r = rng::seeded(seed);
    let mut item = |label: usize| {
        let v: Vec<f64> =
            (0..input_dim).map(|j| r.random_range(-1.0..1.0) + if j == label { 1.5 } else { 0.0 }).collect();
        (v, label)
    };
    let support = vec![item(0), item(0), item(1), item(1)];
    let query = vec![item(0), item(0), item(1), item(1), item(1)];
    Episode::from_parts(support, query, 2)
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for head in HeadKind::ALL {
        for seed in 0..100u64 {
            let (input_dim, adapter_dim) = if seed % 2 == 0 { (3, 3) } else { (4, 2) };
            let episode = toy_episode(seed, input_dim);
            let mut model = Model::new(head, input_dim, adapter_dim, HeadOptions { centering: seed % 3 != 0 });
            let mut r = rng::seeded(1000 + seed);
            model.adapter.weight.mapv_inplace(|w| w + r.random_range(-0.3..0.3));
            model.adapter.bias.mapv_inplace(|_| r.random_range(-0.3..0.3));
            if head == HeadKind::RelationNet && seed % 2 == 1 {
                model.relation = Some(RelationParams::random(adapter_dim, 5, &mut r));
            }
            let point = model.params();
            let m = model.clone();
            let res = grad_check_extrapolated(
                move |t: &mut Tape, p: &[NodeId]| m.build_loss(t, p, &episode).map(|(loss, _)| loss),
                &point,
                1e-2,
            )
            .map_err(|e| format!("{head} seed {seed}: {e}"))?;
            worst = worst.max(res.max_rel_error);
            checked += res.checked;
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("max relative error {worst:.2e} over {checked} components, {elapsed:.2?}");
    if worst < 1e-4 && elapsed < Duration::from_secs(60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn query_frames_available(ds: &Dataset, patients: &BTreeSet<String>, label: usize) -> usize {
    ds.records.iter().filter(|r| r.label == label && patients.contains(&r.patient_id)).count()
}

fn sampler_soundness() -> Check {
    let cfg = EpisodeConfig::default();
    let ds = synth_dataset(&SynthSpec { malignant_patient_fraction: 0.5, ..spec(6, 20, 4, 2.0, 0.5, 1.0) }, 11)
        .map_err(|e| e.to_string())?;
    let sampler = EpisodeSampler::new(&ds, cfg).map_err(|e| e.to_string())?;
    let mut overlaps = 0;
    for i in 0..10_000u64 {
        let ep = sampler.sample(&mut rng::stream(5, i));
        overlaps += ep.support_patients.intersection(&ep.query_patients).count();
        if ep.support.nrows() != cfg.way * cfg.shot {
            return Err(format!("episode {i}: {} support rows", ep.support.nrows()));
        }
        for c in 0..cfg.way {
            let s = ep.support_labels.iter().filter(|&&l| l == c).count();
            let q = ep.query_labels.iter().filter(|&&l| l == c).count();
            if s != cfg.shot || q < 1 || q > cfg.query {
                return Err(format!("episode {i}: class {c} has {s} support and {q} query frames"));
            }
        }
    }
    if overlaps != 0 {
        return Err(format!("{overlaps} support/query patient overlaps"));
    }

    // every patient holds 4 malignant frames, fewer than the 10 queries asked for
    let mut records = Vec::new();
    for p in 0..5 {
        for (label, frames) in [(0, 20), (1, 4)] {
            for f in 0..frames {
                records.push(EmbeddingRecord {
                    patient_id: format!("P{p}"),
                    sequence_id: format!("s{label}"),
                    frame_index: f,
                    label,
                    vector: vec![label as f32, p as f32 + f as f32 / 100.0],
                });
            }
        }
    }
    let scarce = Dataset::new("scarce", 2, 2, records).map_err(|e| e.to_string())?;
    let sampler = EpisodeSampler::new(&scarce, cfg).map_err(|e| e.to_string())?;
    let mut fallbacks = 0;
    for i in 0..2_000u64 {
        let ep = sampler.sample(&mut rng::stream(6, i));
        for (local, &label) in ep.classes.iter().enumerate() {
            let q = ep.query_labels.iter().filter(|&&l| l == local).count();
            let available = query_frames_available(&scarce, &ep.query_patients, label);
            if q != available.min(cfg.query) {
                return Err(format!("scarce episode {i}: class {label} used {q} of {available} query frames"));
            }
            if q < cfg.query {
                fallbacks += 1;
            }
        }
        if !ep.support_patients.is_disjoint(&ep.query_patients) {
            return Err(format!("scarce episode {i}: patient overlap"));
        }
    }
    if fallbacks != 2_000 {
        return Err(format!("scarce class fell back in {fallbacks} of 2000 episodes"));
    }
    Ok("10000 episodes, 0 overlaps, exact support counts; scarce class used all 4 frames in 2000/2000".into())
}

fn head_oracles() -> Check {
    let within = |a: f64, b: f64| (a - b).abs() <= 1e-6;
    let protos = compute_prototypes(&array![[1.0, 0.0], [0.0, 5.0]], &[0, 1], 2).map_err(|e| e.to_string())?;
    let proto = proto_scores(&protos, &array![[1.0, 1.0]]).map_err(|e| e.to_string())?;
    let p0 = softmax_rows(&proto.scores)[[0, 0]];
    if proto.predictions != [0] || !within(p0, 1.0 - 1.1e-7) {
        return Err(format!("prototype: p0 = {p0}"));
    }
    let cosine =
        simpleshot_scores(&array![[2.0, 0.0], [0.0, 3.0]], &array![[1.0, 0.0]], false).map_err(|e| e.to_string())?;
    if cosine.predictions != [0] || !within(cosine.scores[[0, 0]], 1.0) || !within(cosine.scores[[0, 1]], 0.0) {
        return Err(format!("cosine: {:?}", cosine.scores));
    }
    let matching = matching_scores(&array![[1.0, 0.0], [0.0, 1.0]], &[0, 1], &array![[1.0, 0.0]], 2, false)
        .map_err(|e| e.to_string())?;
    let attention = (matching.scores[[0, 0]], matching.scores[[0, 1]]);
    if !within(attention.0, 0.7310585786300049) || !within(attention.1, 0.2689414213699951) {
        return Err(format!("matching attention {attention:?}"));
    }

    // the same episodes through a full model with an identity adapter
    let options = HeadOptions { centering: false };
    let ep = Episode::from_parts(vec![(vec![1.0, 0.0], 0), (vec![0.0, 5.0], 1)], vec![(vec![1.0, 1.0], 0)], 2);
    let model_p0 =
        softmax_rows(&Model::new(HeadKind::ProtoNet, 2, 2, options).scores(&ep).map_err(|e| e.to_string())?.scores)
            [[0, 0]];
    let ep = Episode::from_parts(vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1)], vec![(vec![1.0, 0.0], 0)], 2);
    let model_att =
        Model::new(HeadKind::MatchingNet, 2, 2, options).scores(&ep).map_err(|e| e.to_string())?.scores[[0, 0]];
    if !within(model_p0, p0) || !within(model_att, attention.0) {
        return Err(format!("model path disagrees: {model_p0} {model_att}"));
    }
    Ok(format!("p0 = {p0:.10}, cosine = (1, 0), attention = ({:.4}, {:.4})", attention.0, attention.1))
}

fn separable_data() -> Check {
    let start = Instant::now();
    let ds = synth_dataset(&spec(11, 30, 32, 10.0, 0.1, 1.0), 21).map_err(|e| e.to_string())?;
    let mut medians = Vec::new();
    for head in HeadKind::ALL {
        let reports = cross_validate(head, &ds, &protocol(21), Execution::Sequential).map_err(|e| e.to_string())?;
        medians.push((head, pooled_median(&reports)));
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{} in {elapsed:.2?} single-threaded",
        medians.iter().map(|(h, m)| format!("{h} {m:.3}")).collect::<Vec<_>>().join(", ")
    );
    if medians.iter().all(|&(_, m)| m >= 0.95) && elapsed < Duration::from_secs(300) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn diversity_effect() -> Check {
    const LEVELS: [f64; 3] = [0.5, 1.5, 3.0];
    let sep = 1.0;
    let mut votes = Vec::new();
    for head in HeadKind::ALL {
        let mut wins = 0;
        for seed in 0..5u64 {
            let mut medians = Vec::new();
            for level in LEVELS {
                let ds =
                    synth_dataset(&spec(11, 30, 2, sep, level * sep, 1.2 * sep), seed).map_err(|e| e.to_string())?;
                let reports =
                    cross_validate(head, &ds, &protocol(seed), Execution::Parallel).map_err(|e| e.to_string())?;
                medians.push(pooled_median(&reports));
            }
            if medians.windows(2).all(|w| w[0] > w[1]) {
                wins += 1;
            }
        }
        votes.push((head, wins));
    }
    let detail = votes.iter().map(|(h, w)| format!("{h} {w}/5")).collect::<Vec<_>>().join(", ");
    if votes.iter().all(|&(_, w)| w >= 3) {
        Ok(format!("strictly decreasing medians: {detail}"))
    } else {
        Err(format!("strictly decreasing medians: {detail}"))
    }
}

fn fold_median_iqr(head: HeadKind, ds: &Dataset, seed: u64) -> Result<f64, String> {
    let reports = cross_validate(head, ds, &protocol(seed), Execution::Parallel).map_err(|e| e.to_string())?;
    let medians: Vec<f64> = reports.iter().map(|r| r.median).collect();
    Ok(Quartiles::of(&medians).expect("folds").iqr())
}

fn patient_count_variability() -> Check {
    let mut votes = Vec::new();
    for head in HeadKind::ALL {
        let mut wins = 0;
        for rep in 0..10u64 {
            let full = synth_dataset(&spec(11, 30, 1, 1.0, 0.4, 0.4), rep).map_err(|e| e.to_string())?;
            let five = ablate_patients(&full, 5, rep).map_err(|e| e.to_string())?;
            if fold_median_iqr(head, &five, rep)? > fold_median_iqr(head, &full, rep)? {
                wins += 1;
            }
        }
        votes.push((head, wins));
    }
    let detail = votes.iter().map(|(h, w)| format!("{h} {w}/10")).collect::<Vec<_>>().join(", ");
    if votes.iter().all(|&(_, w)| w > 5) {
        Ok(format!("IQR(5 patients) > IQR(11 patients): {detail}"))
    } else {
        Err(format!("IQR(5 patients) > IQR(11 patients): {detail}"))
    }
}

fn determinism_and_formats() -> Check {
    let config = ExperimentConfig {
        dataset: Some(DatasetSection {
            path: None,
            synth: Some(spec(6, 20, 8, 3.0, 0.5, 1.0)),
            seed: 4,
            name: None,
            augmented_path: None,
        }),
        train: TrainSection { episodes: 50, seed: 8, ..Default::default() },
        eval: EvalSection { episodes: 100 },
        cv: CvSection { k: 3, stratify: false },
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut summaries = Vec::new();
    for (i, exec) in [Execution::Parallel, Execution::Parallel, Execution::Sequential].into_iter().enumerate() {
        let out = dir.path().join(i.to_string());
        run_experiment(&config, &out, exec).map_err(|e| e.to_string())?;
        summaries.push(std::fs::read(out.join("summary.csv")).map_err(|e| e.to_string())?);
    }
    if summaries.windows(2).any(|w| w[0] != w[1]) {
        return Err("summary CSV differs between identical runs".into());
    }

    let ds = synth_dataset(&spec(5, 12, 7, 1.0, 2.0, 3.0), 9).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    write_embeddings(&ds, &mut bytes).map_err(|e| e.to_string())?;
    let back = read_embeddings(bytes.as_slice(), ds.name.clone()).map_err(|e| e.to_string())?;
    if back != ds {
        return Err(".fsle round trip is not exact".into());
    }
    let mut text = Vec::new();
    write_csv(&ds, &mut text).map_err(|e| e.to_string())?;
    let back = read_csv(text.as_slice(), ds.name.clone()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (a, b) in ds.records.iter().zip(&back.records) {
        if a.key() != b.key() || a.label != b.label {
            return Err(format!("csv round trip changed record {}", a.key()));
        }
        for (x, y) in a.vector.iter().zip(&b.vector) {
            worst = worst.max(((x - y) / x.abs().max(f32::MIN_POSITIVE)).abs() as f64);
        }
    }
    if back.len() != ds.len() || worst > 1e-6 {
        return Err(format!("csv round trip relative error {worst:e}"));
    }
    Ok(format!("3 identical summary CSVs; .fsle exact; .csv max relative error {worst:e}"))
}

fn random_baseline() -> Check {
    let ds = synth_dataset(&spec(11, 30, 32, 0.0, 0.1, 1.0), 31).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { seed: 31, ..Default::default() };
    let mut medians = Vec::new();
    for head in HeadKind::ALL {
        let model = Model::new(head, ds.dim, ds.dim, HeadOptions::default());
        let report =
            evaluate(&model, &ds, &cfg, &EpisodeConfig::default(), Execution::Parallel).map_err(|e| e.to_string())?;
        medians.push((head, report.median));
    }
    let detail = medians.iter().map(|(h, m)| format!("{h} {m:.3}")).collect::<Vec<_>>().join(", ");
    if medians.iter().all(|&(_, m)| (m - 0.5).abs() <= 0.05) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let checks: [Criterion; 8] = [
        ("gradient correctness", gradient_correctness),
        ("sampler soundness", sampler_soundness),
        ("head oracles", head_oracles),
        ("separable data", separable_data),
        ("diversity effect", diversity_effect),
        ("patient-count variability", patient_count_variability),
        ("determinism and formats", determinism_and_formats),
        ("random baseline", random_baseline),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
