//! R-peak detection and cardiac phase segmentation.

use crate::error::{Error, Result};
use crate::ingest::EcgRecord;
use crate::prep::{preprocess, zscore, PrepConfig};

/// Half-open sample interval `[start, end)` relative to the R peak.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseWindow {
    pub start: isize,
    pub end: isize,
}

impl PhaseWindow {
    pub const fn new(start: isize, end: isize) -> Self {
        PhaseWindow { start, end }
    }

    pub fn len(&self) -> usize {
        (self.end - self.start).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    P,
    Qrs,
    St,
    Tu,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::P, Phase::Qrs, Phase::St, Phase::Tu];

    pub fn name(self) -> &'static str {
        match self {
            Phase::P => "p",
            Phase::Qrs => "qrs",
            Phase::St => "st",
            Phase::Tu => "tu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseWindows {
    pub p: PhaseWindow,
    pub qrs: PhaseWindow,
    pub st: PhaseWindow,
    pub tu: PhaseWindow,
}

impl Default for PhaseWindows {
    /// 60/40/60/80 samples at 200 Hz.
    fn default() -> Self {
        PhaseWindows {
            p: PhaseWindow::new(-80, -20),
            qrs: PhaseWindow::new(-20, 20),
            st: PhaseWindow::new(20, 80),
            tu: PhaseWindow::new(80, 160),
        }
    }
}

impl PhaseWindows {
    pub fn get(&self, phase: Phase) -> PhaseWindow {
        match phase {
            Phase::P => self.p,
            Phase::Qrs => self.qrs,
            Phase::St => self.st,
            Phase::Tu => self.tu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let contiguous = self.p.end == self.qrs.start
            && self.qrs.end == self.st.start
            && self.st.end == self.tu.start;
        if !contiguous {
            return Err(Error::Config(format!(
                "phase windows must be contiguous: {self:?}"
            )));
        }
        if Phase::ALL.iter().any(|&ph| self.get(ph).is_empty()) {
            return Err(Error::Config(format!(
                "phase windows must be non-empty: {self:?}"
            )));
        }
        Ok(())
    }

    /// Samples needed before the R peak.
    pub fn left_context(&self) -> isize {
        -self.p.start
    }

    /// Samples needed from the R peak onwards (exclusive end).
    pub fn right_context(&self) -> isize {
        self.tu.end
    }

    pub fn lengths(&self) -> [usize; 4] {
        Phase::ALL.map(|ph| self.get(ph).len())
    }
}

/// One heartbeat cut into its four phase segments.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSegments {
    pub r_index: usize,
    pub p: Vec<f64>,
    pub qrs: Vec<f64>,
    pub st: Vec<f64>,
    pub tu: Vec<f64>,
    pub subject_id: String,
    pub session_id: String,
}

impl PhaseSegments {
    pub fn get(&self, phase: Phase) -> &[f64] {
        match phase {
            Phase::P => &self.p,
            Phase::Qrs => &self.qrs,
            Phase::St => &self.st,
            Phase::Tu => &self.tu,
        }
    }

    pub fn get_mut(&mut self, phase: Phase) -> &mut Vec<f64> {
        match phase {
            Phase::P => &mut self.p,
            Phase::Qrs => &mut self.qrs,
            Phase::St => &mut self.st,
            Phase::Tu => &mut self.tu,
        }
    }
}

/// Minimum spacing between accepted beats, in seconds.
pub const REFRACTORY_SECS: f64 = 0.2;
/// Half-width of the local-maximum refinement window, in seconds.
pub const REFINE_SECS: f64 = 0.05;
const INTEGRATION_SECS: f64 = 0.15;

/// Pan–Tompkins-style detector on a band-passed signal.
///
/// Five-point derivative, squaring, 150 ms centred moving-window
/// integration, an adaptive threshold at half the running peak estimate and
/// a 200 ms refractory period. Detections are then moved to the nearby
/// maximum of `|signal|`.
pub fn detect_rpeaks(signal: &[f64], fs: f64) -> Result<Vec<usize>> {
    let min_len = fs.ceil() as usize;
    if signal.len() < min_len {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            required: min_len,
        });
    }
    let n = signal.len();
    let mut energy = vec![0.0; n];
    for i in 2..n.saturating_sub(2) {
        let d = (-signal[i - 2] - 2.0 * signal[i - 1] + 2.0 * signal[i + 1] + signal[i + 2]) / 8.0;
        energy[i] = d * d;
    }
    let win = ((INTEGRATION_SECS * fs).round() as usize).max(1);
    let half = win / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + energy[i];
    }
    let mwi: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + win - half).min(n);
            (prefix[hi] - prefix[lo]) / win as f64
        })
        .collect();

    let learn = ((2.0 * fs) as usize).min(n);
    let mut spk = mwi[..learn].iter().copied().fold(0.0, f64::max);
    if spk <= 0.0 {
        return Ok(Vec::new());
    }
    let refractory = (REFRACTORY_SECS * fs).round() as usize;
    let mut coarse: Vec<usize> = Vec::new();
    for i in 1..n - 1 {
        let is_peak = mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1];
        if !is_peak || mwi[i] < 0.5 * spk {
            continue;
        }
        match coarse.last_mut() {
            Some(last) if i - *last < refractory => {
                if mwi[i] > mwi[*last] {
                    *last = i;
                }
            }
            _ => coarse.push(i),
        }
        spk = 0.125 * mwi[i] + 0.875 * spk;
    }

    let reach = (REFINE_SECS * fs).round() as usize;
    let mut refined: Vec<usize> = coarse
        .iter()
        .map(|&c| climb_abs_max(signal, c, reach))
        .collect();
    refined.dedup();
    let mut peaks: Vec<usize> = Vec::with_capacity(refined.len());
    for r in refined {
        match peaks.last_mut() {
            Some(last) if r - *last < refractory => {
                if signal[r].abs() > signal[*last].abs() {
                    *last = r;
                }
            }
            _ => peaks.push(r),
        }
    }
    Ok(peaks)
}

/// Move to the largest `|x|` within `±reach` until it is the maximum of its
/// own window.
fn climb_abs_max(x: &[f64], start: usize, reach: usize) -> usize {
    let mut pos = start;
    loop {
        let lo = pos.saturating_sub(reach);
        let hi = (pos + reach + 1).min(x.len());
        let mut best = pos;
        for i in lo..hi {
            if x[i].abs() > x[best].abs() {
                best = i;
            }
        }
        if best == pos {
            return pos;
        }
        pos = best;
    }
}

/// Raw (un-normalized) phase slices around `r_index`.
pub fn slice_phases(
    signal: &[f64],
    r_index: usize,
    windows: &PhaseWindows,
) -> Result<[Vec<f64>; 4]> {
    let start = r_index as isize - windows.left_context();
    let end = r_index as isize + windows.right_context();
    if start < 0 || end > signal.len() as isize {
        return Err(Error::BeatSkipped {
            r_index,
            start,
            end,
            len: signal.len(),
        });
    }
    Ok(Phase::ALL.map(|ph| {
        let w = windows.get(ph);
        let a = (r_index as isize + w.start) as usize;
        let b = (r_index as isize + w.end) as usize;
        signal[a..b].to_vec()
    }))
}

/// Slice the four phases around `r_index` and z-score each one.
pub fn segment_phases(
    signal: &[f64],
    r_index: usize,
    windows: &PhaseWindows,
    subject_id: &str,
    session_id: &str,
) -> Result<PhaseSegments> {
    let [p, qrs, st, tu] = slice_phases(signal, r_index, windows)?;
    Ok(PhaseSegments {
        r_index,
        p: zscore(&p),
        qrs: zscore(&qrs),
        st: zscore(&st),
        tu: zscore(&tu),
        subject_id: subject_id.to_string(),
        session_id: session_id.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeatExtraction {
    pub beats: Vec<PhaseSegments>,
    /// Detected peaks without enough context for every window.
    pub skipped: usize,
}

/// Detect beats in a preprocessed record and segment each one.
pub fn extract_beats(record: &EcgRecord, windows: &PhaseWindows) -> Result<BeatExtraction> {
    windows.validate()?;
    let peaks = detect_rpeaks(&record.samples, record.sampling_rate)?;
    let mut beats = Vec::with_capacity(peaks.len());
    let mut skipped = 0;
    for r in peaks {
        match segment_phases(
            &record.samples,
            r,
            windows,
            &record.subject_id,
            &record.session_id,
        ) {
            Ok(b) => beats.push(b),
            Err(Error::BeatSkipped { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(BeatExtraction { beats, skipped })
}

/// Preprocess every record and pool the extracted beats in record order.
/// Returns the beats and the total number of skipped detections.
pub fn extract_dataset(
    records: &[EcgRecord],
    prep: &PrepConfig,
    windows: &PhaseWindows,
) -> Result<(Vec<PhaseSegments>, usize)> {
    let mut beats = Vec::new();
    let mut skipped = 0;
    for rec in records {
        let clean = preprocess(rec, prep)?;
        let ex = extract_beats(&clean, windows)?;
        beats.extend(ex.beats);
        skipped += ex.skipped;
    }
    Ok((beats, skipped))
}
