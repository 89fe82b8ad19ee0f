//! Shared fixtures for the criterion benchmarks.

use hpaf_core::cps::{extract_dataset, PhaseSegments, PhaseWindows};
use hpaf_core::ingest::EcgRecord;
use hpaf_core::prep::PrepConfig;
use hpaf_core::synth::{generate_dataset, DatasetSpec, SynthConfig};

/// A short synthetic recording per subject.
pub fn records(subjects: usize, duration_secs: f64) -> Vec<EcgRecord> {
    let spec = DatasetSpec {
        subjects,
        sessions: 1,
        duration_secs,
        seed: 7,
    };
    generate_dataset(&spec, &SynthConfig::default())
        .into_iter()
        .map(|r| r.record)
        .collect()
}

pub fn beats(subjects: usize, duration_secs: f64) -> Vec<PhaseSegments> {
    let recs = records(subjects, duration_secs);
    extract_dataset(&recs, &PrepConfig::default(), &PhaseWindows::default())
        .expect("synthetic records segment cleanly")
        .0
}

/// Deterministic overlapping genuine and impostor scores.
pub fn scores(n: usize) -> (Vec<f64>, Vec<f64>) {
    let wave = |i: usize, phase: f64| (i as f64 * 0.618_033_988_7 + phase).fract() * 2.0 - 1.0;
    let genuine = (0..n).map(|i| 0.4 + 0.5 * wave(i, 0.1)).collect();
    let impostor = (0..n).map(|i| -0.1 + 0.5 * wave(i, 0.7)).collect();
    (genuine, impostor)
}
