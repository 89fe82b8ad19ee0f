use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hpaf_core::autodiff::Checkpoint;
use hpaf_core::cps::PhaseSegments;
use hpaf_core::encoder::{Embedding, HpafParams};
use hpaf_core::enrollment::Gallery;
use hpaf_core::evaluation::{
    run_closed_set, run_open_set, true_rank, write_queries_csv, QueryOutcome, RankedQuery,
};
use hpaf_core::ingest::{load_csv, load_record, parse_header};
use hpaf_core::seed::derive_seed;
use hpaf_core::synth::generate_dataset;
use hpaf_core::training::EpochStats;
use hpaf_core::{training, Error, Result};

use crate::config::PipelineConfig;
use crate::dataset::{load_beats, read_ground_truth, write_dataset, write_segments, GROUND_TRUTH};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_csv_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.write_record(r)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn synth(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let records = generate_dataset(&cfg.dataset_spec(), &cfg.synth.render);
    let plain: Vec<_> = records.iter().map(|r| r.record.clone()).collect();
    write_dataset(out, &plain, Some(&records))?;
    log::info!(
        "wrote {} synthetic records to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

pub fn ingest(cfg: &PipelineConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let ids = cfg.id_pattern()?;
    let mut records = Vec::with_capacity(inputs.len());
    for input in inputs {
        let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
        let rec = match ext {
            "hea" => {
                let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
                let header = parse_header(&text)?;
                let spec = header.signals.get(cfg.ingest.lead).ok_or_else(|| {
                    Error::Data(format!(
                        "{}: lead {} requested, record has {} signals",
                        input.display(),
                        cfg.ingest.lead,
                        header.n_signals()
                    ))
                })?;
                let signal = input.with_file_name(&spec.file_name);
                load_record(input, &signal, cfg.ingest.lead, &ids)?
            }
            "csv" => load_csv(input, &cfg.csv_options(), &ids)?,
            _ => {
                return Err(Error::Data(format!(
                    "{}: expected a .hea header or a .csv export",
                    input.display()
                )))
            }
        };
        records.push(rec);
    }
    write_dataset(out, &records, None)?;
    log::info!(
        "ingested {} record(s) into {}",
        records.len(),
        out.display()
    );
    Ok(())
}

pub fn segment(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<()> {
    let beats = load_beats(data, cfg)?;
    ensure_parent(out)?;
    write_segments(out, &beats)?;
    if data.is_dir() && data.join(GROUND_TRUTH).exists() {
        let planted = read_ground_truth(data)?.len();
        println!("beats = {} planted = {planted}", beats.len());
    } else {
        println!("beats = {}", beats.len());
    }
    Ok(())
}

fn history_rows(history: &[EpochStats]) -> Vec<Vec<String>> {
    let mut rows = vec![vec!["epoch".to_string(), "mean_loss".into(), "lr".into()]];
    rows.extend(history.iter().map(|s| {
        vec![
            s.epoch.to_string(),
            format!("{:?}", s.mean_loss),
            format!("{:?}", s.lr),
        ]
    }));
    rows
}

pub fn train(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<()> {
    let beats = load_beats(data, cfg)?;
    let ckpt_dir = out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    let outcome = training::train(
        &beats,
        &cfg.model_config(),
        &cfg.train_config(),
        |model, stats| {
            model
                .to_checkpoint()
                .save(&ckpt_dir.join(format!("epoch_{:03}.ckpt", stats.epoch + 1)))
        },
    )?;
    outcome
        .model
        .to_checkpoint()
        .save(&out.join("model.ckpt"))?;
    write_csv_rows(
        &out.join("loss_history.csv"),
        &history_rows(&outcome.history),
    )?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!(
            "loss first = {:.6} last = {:.6}",
            first.mean_loss, last.mean_loss
        );
    }
    Ok(())
}

fn load_model(cfg: &PipelineConfig, path: &Path) -> Result<HpafParams> {
    let model = HpafParams::from_checkpoint(&Checkpoint::load(path)?)?;
    if model.config.phase_lengths != cfg.windows.lengths() {
        return Err(Error::Config(format!(
            "{} expects phase lengths {:?}, windows give {:?}",
            path.display(),
            model.config.phase_lengths,
            cfg.windows.lengths()
        )));
    }
    Ok(model)
}

fn gallery_seed(cfg: &PipelineConfig) -> u64 {
    derive_seed(cfg.protocol().seed, "eval/gallery")
}

pub fn enroll(cfg: &PipelineConfig, data: &Path, model: &Path, out: &Path) -> Result<()> {
    let beats = load_beats(data, cfg)?;
    let model = load_model(cfg, model)?;
    let mut sets: BTreeMap<String, Vec<Embedding>> = BTreeMap::new();
    for b in &beats {
        sets.entry(b.subject_id.clone())
            .or_default()
            .push(model.encode(b)?);
    }
    let gallery = Gallery::enroll(&sets, cfg.prototypes, cfg.metric, gallery_seed(cfg))?;
    ensure_parent(out)?;
    gallery.save(out)?;
    println!("enrolled subjects = {}", gallery.len());
    Ok(())
}

pub fn identify(
    cfg: &PipelineConfig,
    data: &Path,
    model: &Path,
    gallery: &Path,
    out: &Path,
) -> Result<()> {
    let beats = load_beats(data, cfg)?;
    let model = load_model(cfg, model)?;
    let gallery = Gallery::load(gallery)?;
    let mut outcomes = Vec::with_capacity(beats.len());
    for b in &beats {
        let m = gallery.identify(model.encode(b)?.as_slice())?;
        let rank = true_rank(&RankedQuery::from((b.subject_id.as_str(), &m)));
        outcomes.push(QueryOutcome {
            subject_id: b.subject_id.clone(),
            session_id: b.session_id.clone(),
            r_index: b.r_index,
            predicted: m.subject_id,
            best_score: m.best_score,
            true_rank: rank,
        });
    }
    ensure_parent(out)?;
    write_queries_csv(out, &outcomes)?;
    let hits = outcomes.iter().filter(|q| q.true_rank == Some(1)).count();
    println!(
        "top1 = {:.6} ({hits}/{})",
        hits as f64 / outcomes.len() as f64,
        outcomes.len()
    );
    Ok(())
}

pub fn verify(
    cfg: &PipelineConfig,
    data: &Path,
    model: &Path,
    gallery: &Path,
    claim: Option<&str>,
    out: &Path,
) -> Result<()> {
    let beats: Vec<PhaseSegments> = load_beats(data, cfg)?;
    let model = load_model(cfg, model)?;
    let gallery = Gallery::load(gallery)?;
    let mut rows = vec![vec![
        "subject_id".to_string(),
        "session_id".into(),
        "r_index".into(),
        "claim".into(),
        "score".into(),
        "accept".into(),
    ]];
    let mut accepted = 0;
    for b in &beats {
        let claimed = claim.unwrap_or(&b.subject_id);
        let m = gallery.identify(model.encode(b)?.as_slice())?;
        let score = *m
            .subject_scores
            .get(claimed)
            .ok_or_else(|| Error::Data(format!("claimed subject {claimed} is not enrolled")))?;
        let accept = score >= cfg.verify_threshold;
        accepted += accept as usize;
        rows.push(vec![
            b.subject_id.clone(),
            b.session_id.clone(),
            b.r_index.to_string(),
            claimed.to_string(),
            format!("{score:?}"),
            accept.to_string(),
        ]);
    }
    ensure_parent(out)?;
    write_csv_rows(out, &rows)?;
    println!("accepted = {accepted}/{}", beats.len());
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub enum Protocol {
    Closed,
    Open,
}

pub fn evaluate(cfg: &PipelineConfig, data: &Path, out: &Path, protocol: Protocol) -> Result<()> {
    let beats = load_beats(data, cfg)?;
    let pcfg = cfg.protocol();
    let output = match protocol {
        Protocol::Closed => run_closed_set(&beats, &pcfg, |_, _| Ok(()))?,
        Protocol::Open => run_open_set(&beats, &pcfg, |_, _| Ok(()))?,
    };
    ensure_dir(out)?;
    output.report.write_csv(out)?;
    write_queries_csv(&out.join("queries.csv"), &output.queries)?;
    write_csv_rows(
        &out.join("loss_history.csv"),
        &history_rows(&output.history),
    )?;
    let mut split = vec![vec!["subject_id".to_string(), "role".into()]];
    let roles = match protocol {
        Protocol::Closed => vec![(&output.train_subjects, "train+test")],
        Protocol::Open => vec![
            (&output.train_subjects, "train"),
            (&output.test_subjects, "test"),
        ],
    };
    for (ids, role) in roles {
        split.extend(ids.iter().map(|s| vec![s.clone(), role.to_string()]));
    }
    write_csv_rows(&out.join("split.csv"), &split)?;
    output.model.to_checkpoint().save(&out.join("model.ckpt"))?;
    output.gallery.save(&out.join("gallery.txt"))?;
    let r = &output.report;
    println!(
        "top1 = {:.6} auc = {:.6} eer = {:.6} queries = {} excluded_subjects = {}",
        r.top1, r.auc, r.eer, r.queries, r.excluded_subjects
    );
    Ok(())
}
