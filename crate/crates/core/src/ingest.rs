//! PhysioNet-style record ingestion and plain CSV import.
//!
//! Header layout: the first non-comment line is
//! `name n_signals fs n_samples`, followed by one line per signal:
//! `file format[+offset] gain[(baseline)][/units] adc_res adc_zero init checksum block description`.
//! Only formats 212 and 16 are decoded.

use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

/// ADC gain used when the header omits it or gives zero.
pub const DEFAULT_GAIN: f64 = 200.0;
/// Sampling rate assumed for CSV exports that carry none.
pub const DEFAULT_CSV_RATE: f64 = 500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageFormat {
    /// Two 12-bit two's-complement samples packed into three bytes.
    Packed212,
    /// Little-endian signed 16-bit.
    Le16,
}

impl StorageFormat {
    pub fn code(self) -> u32 {
        match self {
            StorageFormat::Packed212 => 212,
            StorageFormat::Le16 => 16,
        }
    }

    fn from_code(code: &str) -> Result<Self> {
        match code {
            "212" => Ok(StorageFormat::Packed212),
            "16" => Ok(StorageFormat::Le16),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalSpec {
    pub file_name: String,
    pub format: StorageFormat,
    /// Byte offset of the first sample in the signal file.
    pub byte_offset: u64,
    /// ADC units per mV.
    pub gain: f64,
    /// ADC value corresponding to 0 mV.
    pub baseline: f64,
    pub lead_label: String,
}

impl SignalSpec {
    pub fn to_mv(&self, adc: i32) -> f64 {
        (adc as f64 - self.baseline) / self.gain
    }

    pub fn to_adc(&self, mv: f64) -> f64 {
        mv * self.gain + self.baseline
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordHeader {
    pub record_name: String,
    pub sampling_rate: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
}

impl RecordHeader {
    pub fn n_signals(&self) -> usize {
        self.signals.len()
    }
}

/// One single-lead recording in physical units (mV).
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub subject_id: String,
    pub session_id: String,
    pub samples: Vec<f64>,
    pub sampling_rate: f64,
    pub lead_label: String,
}

impl EcgRecord {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_rate
    }
}

pub fn parse_header(text: &str) -> Result<RecordHeader> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (ln, record_line) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty header"))?;
    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(Error::parse(
            ln,
            "record line needs `name n_signals [fs [n_samples]]`",
        ));
    }
    if fields[0].contains('/') {
        return Err(Error::parse(ln, "multi-segment records are not supported"));
    }
    let n_signals: usize = fields[1]
        .parse()
        .map_err(|_| Error::parse(ln, format!("bad signal count `{}`", fields[1])))?;
    if n_signals == 0 {
        return Err(Error::parse(ln, "record declares no signals"));
    }
    // `fs` may carry a counter frequency and base counter: `360/360(0)`.
    let sampling_rate = match fields.get(2) {
        Some(f) => f
            .split('/')
            .next()
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::parse(ln, format!("bad sampling rate `{f}`")))?,
        None => 250.0,
    };
    if !(sampling_rate > 0.0) {
        return Err(Error::parse(ln, "sampling rate must be positive"));
    }
    let n_samples = match fields.get(3) {
        Some(f) => f
            .parse()
            .map_err(|_| Error::parse(ln, format!("bad sample count `{f}`")))?,
        None => 0,
    };

    let mut signals = Vec::with_capacity(n_signals);
    for _ in 0..n_signals {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::parse(ln, format!("expected {n_signals} signal lines")))?;
        signals.push(parse_signal_line(ln, line)?);
    }
    Ok(RecordHeader {
        record_name: fields[0].to_string(),
        sampling_rate,
        n_samples,
        signals,
    })
}

fn parse_signal_line(ln: usize, line: &str) -> Result<SignalSpec> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(Error::parse(ln, "signal line needs `file format ...`"));
    }
    let fmt_field = fields[1];
    let (fmt_head, byte_offset) = match fmt_field.split_once('+') {
        Some((head, off)) => (
            head,
            off.parse()
                .map_err(|_| Error::parse(ln, format!("bad byte offset in `{fmt_field}`")))?,
        ),
        None => (fmt_field, 0),
    };
    let code_end = fmt_head
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(fmt_head.len());
    let (code, modifiers) = fmt_head.split_at(code_end);
    if code.is_empty() {
        return Err(Error::parse(ln, format!("bad format `{fmt_field}`")));
    }
    let format = StorageFormat::from_code(code)?;
    if let Some(xsamp) = modifiers.strip_prefix('x') {
        let xsamp = xsamp.split(':').next().unwrap_or("");
        if xsamp != "1" {
            return Err(Error::UnsupportedFormat(fmt_field.to_string()));
        }
    }

    // gain[(baseline)][/units]
    let (gain, explicit_baseline) = match fields.get(2) {
        Some(g) => parse_gain(ln, g)?,
        None => (DEFAULT_GAIN, None),
    };
    let adc_zero: Option<f64> = match fields.get(4) {
        Some(z) => Some(
            z.parse()
                .map_err(|_| Error::parse(ln, format!("bad adc zero `{z}`")))?,
        ),
        None => None,
    };
    let baseline = explicit_baseline.or(adc_zero).unwrap_or(0.0);
    let lead_label = if fields.len() > 8 {
        fields[8..].join(" ")
    } else {
        String::new()
    };
    Ok(SignalSpec {
        file_name: fields[0].to_string(),
        format,
        byte_offset,
        gain,
        baseline,
        lead_label,
    })
}

fn parse_gain(ln: usize, field: &str) -> Result<(f64, Option<f64>)> {
    let body = field.split('/').next().unwrap_or(field);
    let (gain_str, baseline) = match body.split_once('(') {
        Some((g, rest)) => {
            let b = rest
                .strip_suffix(')')
                .and_then(|b| b.parse::<f64>().ok())
                .ok_or_else(|| Error::parse(ln, format!("bad baseline in `{field}`")))?;
            (g, Some(b))
        }
        None => (body, None),
    };
    let gain: f64 = gain_str
        .parse()
        .map_err(|_| Error::parse(ln, format!("bad gain `{field}`")))?;
    Ok((if gain == 0.0 { DEFAULT_GAIN } else { gain }, baseline))
}

fn sign_extend_12(v: u16) -> i32 {
    let v = (v & 0x0FFF) as i32;
    if v & 0x800 != 0 {
        v - 0x1000
    } else {
        v
    }
}

/// Decode `n` samples of format 212.
///
/// Each byte triple holds two samples: byte 0 is the low 8 bits of the first,
/// the low nibble of byte 1 its high 4 bits, the high nibble of byte 1 the
/// high 4 bits of the second, and byte 2 the second's low 8 bits.
pub fn decode_format212(bytes: &[u8], n: usize) -> Result<Vec<i32>> {
    let needed = n.div_ceil(2) * 3;
    if bytes.len() < needed {
        return Err(Error::parse(
            0,
            format!(
                "format 212 stream truncated: {} bytes for {n} samples, need {needed}",
                bytes.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for triple in bytes[..needed].chunks_exact(3) {
        let (b0, b1, b2) = (triple[0] as u16, triple[1] as u16, triple[2] as u16);
        out.push(sign_extend_12(((b1 & 0x0F) << 8) | b0));
        if out.len() < n {
            out.push(sign_extend_12(((b1 & 0xF0) << 4) | b2));
        }
    }
    Ok(out)
}

/// Inverse of [`decode_format212`]; an odd trailing sample is paired with zero.
pub fn encode_format212(samples: &[i32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(samples.len().div_ceil(2) * 3);
    for pair in samples.chunks(2) {
        let s0 = pair[0];
        let s1 = pair.get(1).copied().unwrap_or(0);
        for s in [s0, s1] {
            if !(-2048..=2047).contains(&s) {
                return Err(Error::Data(format!("sample {s} does not fit 12 bits")));
            }
        }
        let (u0, u1) = ((s0 & 0xFFF) as u16, (s1 & 0xFFF) as u16);
        out.push((u0 & 0xFF) as u8);
        out.push((((u0 >> 8) & 0x0F) | ((u1 >> 4) & 0xF0)) as u8);
        out.push((u1 & 0xFF) as u8);
    }
    Ok(out)
}

pub fn decode_format16(bytes: &[u8], n: usize) -> Result<Vec<i32>> {
    if bytes.len() < 2 * n {
        return Err(Error::parse(
            0,
            format!(
                "format 16 stream truncated: {} bytes for {n} samples",
                bytes.len()
            ),
        ));
    }
    Ok(bytes[..2 * n]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
        .collect())
}

pub fn encode_format16(samples: &[i32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        let v = i16::try_from(s)
            .map_err(|_| Error::Data(format!("sample {s} does not fit 16 bits")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Derives subject and session ids from a file stem.
///
/// The pattern contains the placeholders `<subject>` and `<session>` joined
/// by literal text; the default is `<subject>_<session>`. Stems that do not
/// match fall back to subject = stem, session = `0`.
#[derive(Clone, Debug)]
pub struct IdPattern {
    source: String,
    regex: Regex,
}

impl Default for IdPattern {
    fn default() -> Self {
        IdPattern::new("<subject>_<session>").expect("default pattern is valid")
    }
}

impl IdPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        if !pattern.contains("<subject>") {
            return Err(Error::Config(format!(
                "id pattern `{pattern}` lacks <subject>"
            )));
        }
        let mut re = String::from("^");
        let mut rest = pattern;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix("<subject>") {
                re.push_str("(?P<subject>.+?)");
                rest = r;
            } else if let Some(r) = rest.strip_prefix("<session>") {
                re.push_str("(?P<session>.+?)");
                rest = r;
            } else {
                let c = rest.chars().next().unwrap();
                re.push_str(&regex::escape(&c.to_string()));
                rest = &rest[c.len_utf8()..];
            }
        }
        re.push('$');
        let regex =
            Regex::new(&re).map_err(|e| Error::Config(format!("id pattern `{pattern}`: {e}")))?;
        Ok(IdPattern {
            source: pattern.to_string(),
            regex,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn ids(&self, stem: &str) -> (String, String) {
        match self.regex.captures(stem) {
            Some(c) => (
                c.name("subject").map_or(stem, |m| m.as_str()).to_string(),
                c.name("session").map_or("0", |m| m.as_str()).to_string(),
            ),
            None => (stem.to_string(), "0".to_string()),
        }
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Load one lead of a record.
///
/// All header signals stored in the same file as `lead` are assumed
/// frame-interleaved in `signal_path`, in header order.
pub fn load_record(
    header_path: &Path,
    signal_path: &Path,
    lead: usize,
    ids: &IdPattern,
) -> Result<EcgRecord> {
    let text = std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header = parse_header(&text)?;
    if header.n_samples == 0 {
        return Err(Error::EmptyRecord(header.record_name));
    }
    let spec = header.signals.get(lead).ok_or_else(|| {
        Error::Data(format!(
            "lead {lead} requested but {} has {} signals",
            header.record_name,
            header.n_signals()
        ))
    })?;
    let group: Vec<usize> = header
        .signals
        .iter()
        .enumerate()
        .filter(|(_, s)| s.file_name == spec.file_name)
        .map(|(i, _)| i)
        .collect();
    if group
        .iter()
        .any(|&i| header.signals[i].format != spec.format)
    {
        return Err(Error::UnsupportedFormat(format!(
            "mixed formats within {}",
            spec.file_name
        )));
    }
    let position = group.iter().position(|&i| i == lead).unwrap();
    let bytes = std::fs::read(signal_path).map_err(|e| Error::io(signal_path, e))?;
    let offset = (spec.byte_offset as usize).min(bytes.len());
    let total = header.n_samples * group.len();
    let raw = match spec.format {
        StorageFormat::Packed212 => decode_format212(&bytes[offset..], total),
        StorageFormat::Le16 => decode_format16(&bytes[offset..], total),
    }
    .map_err(|e| match e {
        Error::Parse { message, .. } => {
            Error::Data(format!("{}: {message}", signal_path.display()))
        }
        other => other,
    })?;
    let samples = raw
        .iter()
        .skip(position)
        .step_by(group.len())
        .map(|&adc| spec.to_mv(adc))
        .collect();
    let (subject_id, session_id) = ids.ids(&file_stem(header_path));
    Ok(EcgRecord {
        subject_id,
        session_id,
        samples,
        sampling_rate: header.sampling_rate,
        lead_label: spec.lead_label.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub column: usize,
    pub sampling_rate: f64,
    /// Skip the first row.
    pub has_header: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            column: 0,
            sampling_rate: DEFAULT_CSV_RATE,
            has_header: false,
        }
    }
}

/// Load one numeric column of a CSV export. Row indices in errors are
/// 1-based file lines.
pub fn load_csv(path: &Path, opts: &CsvOptions, ids: &IdPattern) -> Result<EcgRecord> {
    if !(opts.sampling_rate > 0.0) {
        return Err(Error::Config("CSV sampling rate must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut samples = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(i + 1, |p| p.line() as usize);
        let cell = row.get(opts.column).ok_or(Error::ColumnOutOfRange {
            column: opts.column,
            row: line,
            available: row.len(),
        })?;
        let v: f64 = cell.parse().map_err(|_| {
            Error::parse(
                line,
                format!("non-numeric cell `{cell}` in {}", path.display()),
            )
        })?;
        samples.push(v);
    }
    if samples.is_empty() {
        return Err(Error::EmptyRecord(path.display().to_string()));
    }
    let (subject_id, session_id) = ids.ids(&file_stem(path));
    Ok(EcgRecord {
        subject_id,
        session_id,
        samples,
        sampling_rate: opts.sampling_rate,
        lead_label: format!("column {}", opts.column),
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_mitbih_style() {
        let h =
            parse_header("rec 1 360 650000\nrec.dat 212 200 11 1024 995 -22131 0 MLII\n").unwrap();
        assert_eq!(h.record_name, "rec");
        assert_eq!(h.n_signals(), 1);
        assert_eq!(h.sampling_rate, 360.0);
        assert_eq!(h.n_samples, 650000);
        assert_eq!(h.signals[0].format, StorageFormat::Packed212);
        assert_eq!(h.signals[0].gain, 200.0);
        assert_eq!(h.signals[0].baseline, 1024.0);
        assert_eq!(h.signals[0].lead_label, "MLII");
    }

    #[test]
    fn header_defaults_and_explicit_baseline() {
        let h = parse_header(
            "# comment\nr 2 500 10\nr.dat 16\nr.dat 16 1000(-5)/mV 16 0 0 0 0 lead II\n",
        )
        .unwrap();
        assert_eq!(h.signals[0].gain, DEFAULT_GAIN);
        assert_eq!(h.signals[0].baseline, 0.0);
        assert_eq!(h.signals[1].gain, 1000.0);
        assert_eq!(h.signals[1].baseline, -5.0);
        assert_eq!(h.signals[1].lead_label, "lead II");
    }

    #[test]
    fn header_zero_samples_parses() {
        let h = parse_header("rec 1 200 0\nrec.dat 16\n").unwrap();
        assert_eq!(h.n_samples, 0);
    }

    #[test]
    fn header_unsupported_format() {
        let err = parse_header("rec 1 200 10\nrec.dat 999 200\n").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(ref f) if f == "999"));
    }

    #[test]
    fn header_malformed_line_number() {
        let err = parse_header("rec 1 200 10\nrec.dat 16 abc\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
        let err = parse_header("rec x 200\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn format212_hand_decoded() {
        assert_eq!(decode_format212(&[0, 0, 0], 2).unwrap(), vec![0, 0]);
        assert_eq!(
            decode_format212(&[0x01, 0x00, 0x00], 2).unwrap(),
            vec![1, 0]
        );
        assert_eq!(
            decode_format212(&[0xFF, 0x0F, 0x00], 2).unwrap(),
            vec![-1, 0]
        );
        // second sample: high nibble 0x8 of byte 1, low byte 0x00 -> 0x800 = -2048
        assert_eq!(
            decode_format212(&[0x00, 0x80, 0x00], 2).unwrap(),
            vec![0, -2048]
        );
        assert_eq!(decode_format212(&[0x01, 0x00, 0x00], 1).unwrap(), vec![1]);
        assert!(decode_format212(&[0x01, 0x00], 2).is_err());
    }

    #[test]
    fn format16_hand_decoded() {
        assert_eq!(decode_format16(&[0, 0], 1).unwrap(), vec![0]);
        assert_eq!(decode_format16(&[0xFF, 0xFF], 1).unwrap(), vec![-1]);
        assert_eq!(decode_format16(&[0x34, 0x12], 1).unwrap(), vec![4660]);
        assert!(decode_format16(&[0x34], 1).is_err());
    }

    #[test]
    fn id_pattern() {
        let p = IdPattern::default();
        assert_eq!(p.ids("person07_rec2"), ("person07".into(), "rec2".into()));
        assert_eq!(p.ids("100"), ("100".into(), "0".into()));
        let p = IdPattern::new("<session>-<subject>").unwrap();
        assert_eq!(p.ids("s1-alice"), ("alice".into(), "s1".into()));
        assert!(IdPattern::new("<session>").is_err());
    }

    proptest! {
        #[test]
        fn format212_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..60)) {
            let bytes = &bytes[..bytes.len() / 3 * 3];
            let n = bytes.len() / 3 * 2;
            let decoded = decode_format212(bytes, n).unwrap();
            prop_assert!(decoded.iter().all(|s| (-2048..=2047).contains(s)));
            prop_assert_eq!(encode_format212(&decoded).unwrap(), bytes.to_vec());
        }

        #[test]
        fn format16_range(samples in proptest::collection::vec(any::<i16>(), 0..40)) {
            let s: Vec<i32> = samples.iter().map(|&v| v as i32).collect();
            let bytes = encode_format16(&s).unwrap();
            prop_assert_eq!(decode_format16(&bytes, s.len()).unwrap(), s);
        }

        #[test]
        fn mv_conversion_inverts(adc in -2048i32..2048, gain in 1.0f64..2000.0, baseline in -1024.0f64..1024.0) {
            let spec = SignalSpec {
                file_name: String::new(),
                format: StorageFormat::Packed212,
                byte_offset: 0,
                gain,
                baseline,
                lead_label: String::new(),
            };
            let back = spec.to_adc(spec.to_mv(adc));
            prop_assert!((back - adc as f64).abs() < 1e-9);
        }
    }
}
