//! Deterministic sum-of-Gaussians ECG generator with planted R peaks.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ingest::EcgRecord;
use crate::seed::{derive_seed, rng_for};

/// One Gaussian bump, timed relative to the R peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wave {
    /// Centre offset from R, seconds.
    pub offset: f64,
    /// Standard deviation, seconds.
    pub width: f64,
    /// Peak value, mV.
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMorphology {
    pub subject_id: String,
    /// P, Q, R, S, T in that order.
    pub waves: [Wave; 5],
    pub heart_rate_bpm: f64,
    /// Standard deviation of each RR interval, seconds.
    pub rr_jitter: f64,
    /// White-noise RMS, mV.
    pub noise_rms: f64,
}

pub const R_WAVE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub sampling_rate: f64,
    /// Minimum RMS distance between subjects in normalized parameter space.
    pub min_subject_distance: f64,
    /// Amplitude of the slow baseline sine, mV.
    pub baseline_amplitude: f64,
    pub baseline_freq: f64,
    /// Scales every subject's noise level; 0 renders noise-free records.
    pub noise_scale: f64,
    /// Scales every subject's RR jitter.
    pub jitter_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sampling_rate: 200.0,
            min_subject_distance: 0.2,
            baseline_amplitude: 0.05,
            baseline_freq: 0.25,
            noise_scale: 1.0,
            jitter_scale: 1.0,
        }
    }
}

impl SynthConfig {
    /// No noise, no jitter, no baseline wander.
    pub fn clean() -> Self {
        SynthConfig {
            baseline_amplitude: 0.0,
            noise_scale: 0.0,
            jitter_scale: 0.0,
            ..SynthConfig::default()
        }
    }
}

/// Sampling ranges for (offset, width, amplitude) of P, Q, R, S, T.
const WAVE_RANGES: [[(f64, f64); 3]; 5] = [
    [(-0.26, -0.15), (0.015, 0.030), (0.08, 0.25)],
    [(-0.035, -0.020), (0.006, 0.012), (-0.25, -0.05)],
    [(0.0, 0.0), (0.008, 0.014), (0.9, 1.6)],
    [(0.020, 0.040), (0.006, 0.014), (-0.35, -0.05)],
    [(0.28, 0.42), (0.040, 0.070), (0.15, 0.45)],
];
const HR_RANGE: (f64, f64) = (50.0, 70.0);
const JITTER_RANGE: (f64, f64) = (0.005, 0.015);
const NOISE_RANGE: (f64, f64) = (0.01, 0.03);
/// Every non-R amplitude is capped at R / this.
const R_DOMINANCE: f64 = 3.2;

impl SubjectMorphology {
    /// Parameters scaled to [0, 1] by their sampling ranges (fixed R offset
    /// excluded).
    pub fn normalized(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(17);
        for (w, ranges) in self.waves.iter().zip(WAVE_RANGES) {
            for (x, (lo, hi)) in [w.offset, w.width, w.amplitude].into_iter().zip(ranges) {
                if hi > lo {
                    v.push((x - lo) / (hi - lo));
                }
            }
        }
        v.push((self.heart_rate_bpm - HR_RANGE.0) / (HR_RANGE.1 - HR_RANGE.0));
        v
    }

    pub fn distance(&self, other: &SubjectMorphology) -> f64 {
        let (a, b) = (self.normalized(), other.normalized());
        (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    fn draw(subject_id: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut waves = [Wave {
            offset: 0.0,
            width: 0.0,
            amplitude: 0.0,
        }; 5];
        for (w, ranges) in waves.iter_mut().zip(WAVE_RANGES) {
            let [o, wd, a] =
                ranges.map(|(lo, hi)| if hi > lo { rng.gen_range(lo..hi) } else { lo });
            *w = Wave {
                offset: o,
                width: wd,
                amplitude: a,
            };
        }
        let cap = waves[R_WAVE].amplitude / R_DOMINANCE;
        for (i, w) in waves.iter_mut().enumerate() {
            if i != R_WAVE {
                w.amplitude = w.amplitude.clamp(-cap, cap);
            }
        }
        SubjectMorphology {
            subject_id: subject_id.to_string(),
            waves,
            heart_rate_bpm: rng.gen_range(HR_RANGE.0..HR_RANGE.1),
            rr_jitter: rng.gen_range(JITTER_RANGE.0..JITTER_RANGE.1),
            noise_rms: rng.gen_range(NOISE_RANGE.0..NOISE_RANGE.1),
        }
    }
}

/// Issues subject morphologies, rejecting draws too close to earlier ones.
#[derive(Debug, Default)]
pub struct SubjectGenerator {
    issued: Vec<SubjectMorphology>,
}

const MAX_REJECTIONS: usize = 10_000;

impl SubjectGenerator {
    pub fn new() -> Self {
        SubjectGenerator::default()
    }

    pub fn issued(&self) -> &[SubjectMorphology] {
        &self.issued
    }

    pub fn generate_subject(
        &mut self,
        subject_id: &str,
        subject_seed: u64,
        cfg: &SynthConfig,
    ) -> SubjectMorphology {
        let mut rng = rng_for(subject_seed, "synth.subject");
        let mut candidate = SubjectMorphology::draw(subject_id, &mut rng);
        for _ in 0..MAX_REJECTIONS {
            if self
                .issued
                .iter()
                .all(|s| s.distance(&candidate) >= cfg.min_subject_distance)
            {
                break;
            }
            candidate = SubjectMorphology::draw(subject_id, &mut rng);
        }
        self.issued.push(candidate.clone());
        candidate
    }
}

/// A rendered record and the sample indices of its planted R peaks.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub record: EcgRecord,
    pub r_indices: Vec<usize>,
}

pub fn render_record(
    morph: &SubjectMorphology,
    session_id: &str,
    duration_secs: f64,
    session_seed: u64,
    cfg: &SynthConfig,
) -> SynthRecord {
    let fs = cfg.sampling_rate;
    let n = (duration_secs * fs).round() as usize;
    let mut rng = rng_for(session_seed, "synth.session");
    let rr = 60.0 / morph.heart_rate_bpm;
    let jitter = morph.rr_jitter * cfg.jitter_scale;

    let mut r_indices = Vec::new();
    let mut t = rr / 2.0;
    while t < duration_secs {
        let idx = (t * fs).round() as usize;
        if idx >= n {
            break;
        }
        r_indices.push(idx);
        let z: f64 = StandardNormal.sample(&mut rng);
        t += rr + jitter * z.clamp(-3.0, 3.0);
    }

    let mut samples = vec![0.0; n];
    for &r in &r_indices {
        let r_time = r as f64 / fs;
        for w in &morph.waves {
            let centre = r_time + w.offset;
            let reach = 5.0 * w.width;
            let lo = (((centre - reach) * fs).floor().max(0.0)) as usize;
            let hi = (((centre + reach) * fs).ceil() as usize + 1).min(n);
            for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
                let dt = i as f64 / fs - centre;
                *s += w.amplitude * (-dt * dt / (2.0 * w.width * w.width)).exp();
            }
        }
    }
    let noise = morph.noise_rms * cfg.noise_scale;
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / fs;
        *s += cfg.baseline_amplitude * (2.0 * PI * cfg.baseline_freq * t + phase).sin();
        if noise > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            *s += noise * z;
        }
    }
    SynthRecord {
        record: EcgRecord {
            subject_id: morph.subject_id.clone(),
            session_id: session_id.to_string(),
            samples,
            sampling_rate: fs,
            lead_label: "synthetic".into(),
        },
        r_indices,
    }
}

/// Shape of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub subjects: usize,
    pub sessions: usize,
    pub duration_secs: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            subjects: 16,
            sessions: 2,
            duration_secs: 60.0,
            seed: 0,
        }
    }
}

pub fn subject_name(index: usize) -> String {
    format!("s{:02}", index + 1)
}

/// Render `subjects × sessions` records, subjects in id order and sessions
/// numbered from 1.
pub fn generate_dataset(spec: &DatasetSpec, cfg: &SynthConfig) -> Vec<SynthRecord> {
    let mut generator = SubjectGenerator::new();
    let mut out = Vec::with_capacity(spec.subjects * spec.sessions);
    for s in 0..spec.subjects {
        let id = subject_name(s);
        let morph =
            generator.generate_subject(&id, derive_seed(spec.seed, &format!("subject/{id}")), cfg);
        for k in 1..=spec.sessions {
            let session = k.to_string();
            let seed = derive_seed(spec.seed, &format!("session/{id}/{session}"));
            out.push(render_record(
                &morph,
                &session,
                spec.duration_secs,
                seed,
                cfg,
            ));
        }
    }
    out
}
