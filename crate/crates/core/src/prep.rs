//! Band-pass filtering, resampling and segment normalization.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::ingest::EcgRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub low_cut: f64,
    pub high_cut: f64,
    pub target_rate: f64,
    /// Order of the Butterworth low-pass prototype.
    pub filter_order: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            low_cut: 0.5,
            high_cut: 40.0,
            target_rate: 200.0,
            filter_order: 4,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.low_cut > 0.0
            && self.low_cut < self.high_cut
            && self.high_cut < self.target_rate / 2.0)
        {
            return Err(Error::Config(format!(
                "need 0 < low_cut ({}) < high_cut ({}) < target_rate/2 ({})",
                self.low_cut,
                self.high_cut,
                self.target_rate / 2.0
            )));
        }
        if self.filter_order == 0 {
            return Err(Error::Config("filter_order must be positive".into()));
        }
        Ok(())
    }

    /// Reflection pad applied on each side before filtering.
    pub fn pad_len(&self) -> usize {
        3 * self.filter_order
    }
}

/// One second-order section, `a0` normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2)
            / (self.a[0] + self.a[1] * z_inv + self.a[2] * z2)
    }
}

/// Cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Complex response at `freq` Hz for a single forward pass.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    /// Steady-state section states for a unit step, as in a DF-II transposed
    /// realization.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let gain = (s.b[0] + s.b[1] + s.b[2]) / (s.a[0] + s.a[1] + s.a[2]);
                let z2 = s.b[2] - s.a[2] * gain;
                let z1 = gain - s.b[0];
                let state = [z1 * scale, z2 * scale];
                scale *= gain;
                state
            })
            .collect()
    }

    fn run(&self, x: &mut [f64], initial: f64) {
        let states = self.step_states();
        for (s, st) in self.sections.iter().zip(states) {
            let (mut z1, mut z2) = (st[0] * initial, st[1] * initial);
            for v in x.iter_mut() {
                let input = *v;
                let y = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[1] * y + z2;
                z2 = s.b[2] * input - s.a[2] * y;
                *v = y;
            }
        }
    }

    /// Forward–backward application with odd-reflection padding and
    /// steady-state initial conditions. Zero phase; magnitude response is
    /// `|H|²`.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Digital Butterworth band-pass via the bilinear transform of a pre-warped
/// analog design, normalized to unit gain at the geometric centre frequency.
pub fn butterworth_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<SosFilter> {
    if !(low > 0.0 && low < high && high < fs / 2.0) || order == 0 {
        return Err(Error::Config(format!(
            "band [{low}, {high}] Hz invalid for fs = {fs} Hz"
        )));
    }
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (wl, wh) = (warp(low), warp(high));
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();
    let k2 = Complex64::new(2.0 * fs, 0.0);

    let mut poles = Vec::with_capacity(2 * order);
    for k in 1..=order {
        let theta = PI * (2 * k + order - 1) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let a = proto * bw / 2.0;
        let disc = (a * a - w0 * w0).sqrt();
        for s in [a + disc, a - disc] {
            poles.push((k2 + s) / (k2 - s));
        }
    }

    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= 1e-12)
        .map(|p| p.re)
        .collect();
    complex.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    real.sort_by(f64::total_cmp);
    let mut sections: Vec<Biquad> = complex
        .iter()
        .map(|p| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        })
        .collect();
    for pair in real.chunks(2) {
        let (r0, r1) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(r0 + r1), r0 * r1],
        });
    }
    let mut filter = SosFilter { sections };
    let center = 2.0 * (w0 / (2.0 * fs)).atan() * fs / (2.0 * PI);
    let gain = filter.response(center, fs).norm();
    for b in filter.sections[0].b.iter_mut() {
        *b /= gain;
    }
    Ok(filter)
}

/// Zero-phase band-pass of `signal` sampled at `fs`.
pub fn bandpass(signal: &[f64], fs: f64, cfg: &PrepConfig) -> Result<Vec<f64>> {
    if !(fs > 2.0 * cfg.high_cut) {
        return Err(Error::Config(format!(
            "sampling rate {fs} Hz too low for a {} Hz upper cut-off",
            cfg.high_cut
        )));
    }
    let pad = cfg.pad_len();
    if signal.len() <= pad {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            required: pad + 1,
        });
    }
    let filter = butterworth_bandpass(cfg.filter_order, cfg.low_cut, cfg.high_cut, fs)?;
    Ok(filter.filtfilt(signal, pad))
}

/// Kaiser window shape parameter of the resampling filter.
pub const KAISER_BETA: f64 = 8.0;
/// Filter half-width in zero crossings of the anti-aliasing sinc.
const HALF_WIDTH_ZEROS: usize = 10;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational approximation `up/down` of `ratio` with `down ≤ 1000`.
fn rational(ratio: f64) -> (u64, u64) {
    let mut best = (ratio.round().max(1.0) as u64, 1);
    let mut best_err = (best.0 as f64 - ratio).abs();
    for down in 1..=1000u64 {
        let up = (ratio * down as f64).round() as u64;
        if up == 0 {
            continue;
        }
        let err = (up as f64 / down as f64 - ratio).abs();
        if err < best_err - 1e-15 {
            best = (up, down);
            best_err = err;
            if err < 1e-12 {
                break;
            }
        }
    }
    let g = gcd(best.0, best.1);
    (best.0 / g, best.1 / g)
}

/// Polyphase windowed-sinc resampling by the rational factor nearest to
/// `fs_out / fs_in`. Edge samples are replicated beyond the record, and each
/// output's taps are normalized to unit sum so constants pass unchanged.
pub fn resample(signal: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if !(fs_in > 0.0 && fs_out > 0.0) {
        return Err(Error::Config(format!(
            "invalid resampling rates {fs_in} -> {fs_out}"
        )));
    }
    if fs_in == fs_out || signal.is_empty() {
        return Ok(signal.to_vec());
    }
    let (up, down) = rational(fs_out / fs_in);
    let out_len = (signal.len() as f64 * fs_out / fs_in).round() as usize;
    let (p, q) = (up as i64, down as i64);
    let span = up.max(down) as f64;
    let cutoff = 0.5 / span;
    let half = HALF_WIDTH_ZEROS as f64 * span;
    let taps_per_side = (half / up as f64).ceil() as i64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let kernel = |t: f64| -> f64 {
        if t.abs() > half {
            return 0.0;
        }
        let x = 2.0 * cutoff * t;
        let sinc = if x == 0.0 {
            1.0
        } else {
            (PI * x).sin() / (PI * x)
        };
        let r = t / half;
        sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta
    };
    let phases: Vec<Vec<f64>> = (0..p)
        .map(|r| {
            let taps: Vec<f64> = (-taps_per_side..=taps_per_side)
                .map(|j| kernel((r - j * p) as f64))
                .collect();
            let sum: f64 = taps.iter().sum();
            taps.into_iter().map(|w| w / sum).collect()
        })
        .collect();
    let last = signal.len() as i64 - 1;
    let out = (0..out_len as i64)
        .map(|m| {
            let pos = m * q;
            let (n0, r) = (pos.div_euclid(p), pos.rem_euclid(p));
            phases[r as usize]
                .iter()
                .zip(-taps_per_side..=taps_per_side)
                .map(|(w, j)| w * signal[(n0 + j).clamp(0, last) as usize])
                .sum()
        })
        .collect();
    Ok(out)
}

/// Standard deviation floor below which a segment is treated as constant.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Zero-mean, unit-(population-)variance copy; all zeros for flat input.
pub fn zscore(segment: &[f64]) -> Vec<f64> {
    let n = segment.len() as f64;
    if segment.is_empty() {
        return Vec::new();
    }
    let mean = segment.iter().sum::<f64>() / n;
    let std = (segment.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std <= ZSCORE_EPS {
        return vec![0.0; segment.len()];
    }
    segment.iter().map(|v| (v - mean) / std).collect()
}

/// Band-pass at the native rate, then resample to `cfg.target_rate`.
pub fn preprocess(record: &EcgRecord, cfg: &PrepConfig) -> Result<EcgRecord> {
    cfg.validate()?;
    let filtered = bandpass(&record.samples, record.sampling_rate, cfg)?;
    let samples = resample(&filtered, record.sampling_rate, cfg.target_rate)?;
    Ok(EcgRecord {
        samples,
        sampling_rate: cfg.target_rate,
        ..record.clone()
    })
}
