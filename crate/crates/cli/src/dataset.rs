//! On-disk dataset layout.
//!
//! A dataset directory holds `records.csv` (file, subject_id, session_id,
//! sampling_rate, lead_label), one single-column CSV of millivolt samples
//! per record, and optionally `ground_truth.csv` with planted R peaks for
//! synthetic data. A segments file is a wide CSV with one beat per row.

use std::path::{Path, PathBuf};

use hpaf_core::cps::{extract_dataset, Phase, PhaseSegments};
use hpaf_core::ingest::{load_csv, CsvOptions, EcgRecord, IdPattern};
use hpaf_core::synth::SynthRecord;
use hpaf_core::{Error, Result};

use crate::config::PipelineConfig;

pub const RECORDS_INDEX: &str = "records.csv";
pub const GROUND_TRUTH: &str = "ground_truth.csv";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Data(format!("{}: {e}", path.display()))
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn record_file_name(rec: &EcgRecord) -> String {
    format!("{}_{}.csv", rec.subject_id, rec.session_id)
}

/// Write records (and planted peaks, when known) as a dataset directory.
pub fn write_dataset(
    dir: &Path,
    records: &[EcgRecord],
    truth: Option<&[SynthRecord]>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join(RECORDS_INDEX);
    let mut index = writer(&index_path)?;
    index
        .write_record([
            "file",
            "subject_id",
            "session_id",
            "sampling_rate",
            "lead_label",
        ])
        .map_err(|e| csv_err(&index_path, e))?;
    for rec in records {
        let name = record_file_name(rec);
        let path = dir.join(&name);
        let body: String = rec.samples.iter().map(|v| format!("{v:?}\n")).collect();
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        index
            .write_record([
                name.as_str(),
                &rec.subject_id,
                &rec.session_id,
                &format!("{:?}", rec.sampling_rate),
                &rec.lead_label,
            ])
            .map_err(|e| csv_err(&index_path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;

    if let Some(truth) = truth {
        let path = dir.join(GROUND_TRUTH);
        let mut w = writer(&path)?;
        w.write_record(["file", "subject_id", "session_id", "r_index"])
            .map_err(|e| csv_err(&path, e))?;
        for s in truth {
            let name = record_file_name(&s.record);
            for r in &s.r_indices {
                w.write_record([
                    name.as_str(),
                    &s.record.subject_id,
                    &s.record.session_id,
                    &r.to_string(),
                ])
                .map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<EcgRecord>> {
    let index_path = dir.join(RECORDS_INDEX);
    let mut reader = csv::Reader::from_path(&index_path).map_err(|e| csv_err(&index_path, e))?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(&index_path, e))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize, name: &str| {
            row.get(i).ok_or_else(|| {
                Error::parse(line, format!("{}: missing {name}", index_path.display()))
            })
        };
        let file = field(0, "file")?;
        let rate: f64 = field(3, "sampling_rate")?.parse().map_err(|_| {
            Error::parse(line, format!("{}: bad sampling_rate", index_path.display()))
        })?;
        let opts = CsvOptions {
            column: 0,
            sampling_rate: rate,
            has_header: false,
        };
        let mut rec = load_csv(&dir.join(file), &opts, &IdPattern::default())?;
        rec.subject_id = field(1, "subject_id")?.to_string();
        rec.session_id = field(2, "session_id")?.to_string();
        rec.lead_label = row.get(4).unwrap_or("").to_string();
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no records",
            index_path.display()
        )));
    }
    Ok(records)
}

/// Planted peaks per record file, in index order.
pub fn read_ground_truth(dir: &Path) -> Result<Vec<(String, usize)>> {
    let path = dir.join(GROUND_TRUTH);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(&path, e))?;
        let r = row
            .get(3)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: bad r_index row", path.display())))?;
        out.push((row.get(0).unwrap_or("").to_string(), r));
    }
    Ok(out)
}

pub fn write_segments(path: &Path, beats: &[PhaseSegments]) -> Result<()> {
    let mut w = writer(path)?;
    let Some(first) = beats.first() else {
        return Err(Error::Data("no beats to write".into()));
    };
    let mut header = vec![
        "subject_id".to_string(),
        "session_id".into(),
        "r_index".into(),
    ];
    for ph in Phase::ALL {
        header.extend((0..first.get(ph).len()).map(|i| format!("{}_{i}", ph.name())));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for b in beats {
        let mut row = vec![
            b.subject_id.clone(),
            b.session_id.clone(),
            b.r_index.to_string(),
        ];
        for ph in Phase::ALL {
            row.extend(b.get(ph).iter().map(|v| format!("{v:?}")));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_segments(path: &Path) -> Result<Vec<PhaseSegments>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut spans = Vec::new();
    for ph in Phase::ALL {
        let prefix = format!("{}_", ph.name());
        let cols: Vec<usize> = (0..header.len())
            .filter(|&i| {
                header[i]
                    .strip_prefix(&prefix)
                    .is_some_and(|r| r.parse::<usize>().is_ok())
            })
            .collect();
        if cols.is_empty() {
            return Err(Error::Data(format!(
                "{}: no {} columns",
                path.display(),
                ph.name()
            )));
        }
        spans.push(cols);
    }
    let mut beats = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| -> Result<f64> {
            row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| {
                Error::parse(
                    line,
                    format!("{}: bad value in column {}", path.display(), i + 1),
                )
            })
        };
        let mut parts: Vec<Vec<f64>> = Vec::with_capacity(4);
        for cols in &spans {
            parts.push(cols.iter().map(|&i| num(i)).collect::<Result<_>>()?);
        }
        let tu = parts.pop().unwrap();
        let st = parts.pop().unwrap();
        let qrs = parts.pop().unwrap();
        let p = parts.pop().unwrap();
        beats.push(PhaseSegments {
            r_index: num(2)? as usize,
            p,
            qrs,
            st,
            tu,
            subject_id: row.get(0).unwrap_or("").to_string(),
            session_id: row.get(1).unwrap_or("").to_string(),
        });
    }
    if beats.is_empty() {
        return Err(Error::Data(format!("{} contains no beats", path.display())));
    }
    Ok(beats)
}

/// Beats from either a dataset directory (preprocessed and segmented on the
/// fly) or a segments file.
pub fn load_beats(path: &Path, cfg: &PipelineConfig) -> Result<Vec<PhaseSegments>> {
    if path.is_dir() {
        let records = read_dataset(path)?;
        let (beats, skipped) = extract_dataset(&records, &cfg.prep, &cfg.windows)?;
        if skipped > 0 {
            log::info!("{skipped} detected beat(s) lacked window context and were skipped");
        }
        if beats.is_empty() {
            return Err(Error::Data(format!("no beats found in {}", path.display())));
        }
        Ok(beats)
    } else {
        let beats = read_segments(path)?;
        let expected = cfg.windows.lengths();
        if let Some(b) = beats
            .iter()
            .find(|b| Phase::ALL.map(|ph| b.get(ph).len()) != expected)
        {
            return Err(Error::Config(format!(
                "{}: beat at {} has phase lengths {:?}, windows give {expected:?}",
                path.display(),
                b.r_index,
                Phase::ALL.map(|ph| b.get(ph).len())
            )));
        }
        Ok(beats)
    }
}

/// Directory that receives the manifest for an output path.
pub fn manifest_dir(out: &Path) -> PathBuf {
    if out.extension().is_some() && !out.is_dir() {
        out.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        out.to_path_buf()
    }
}
