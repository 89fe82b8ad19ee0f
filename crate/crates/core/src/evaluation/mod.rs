//! Verification and identification metrics, and the closed-set and
//! open-set protocol drivers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::cosine;
use crate::cps::PhaseSegments;
use crate::encoder::{Embedding, HpafParams, ModelConfig};
use crate::enrollment::{rank_subjects, Gallery, MatchResult, Metric, DEFAULT_PROTOTYPES};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::training::{train, EpochStats, TrainConfig};

/// Similarity scores of same-subject and different-subject trials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        ScoreSet { genuine, impostor }
    }

    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::Data(format!(
                "need genuine and impostor trials, have {} and {}",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self
            .genuine
            .iter()
            .chain(&self.impostor)
            .any(|s| s.is_nan())
        {
            return Err(Error::Data("score set contains NaN".into()));
        }
        Ok(())
    }

    fn sorted(&self) -> (Vec<f64>, Vec<f64>) {
        let mut g = self.genuine.clone();
        let mut i = self.impostor.clone();
        g.sort_by(f64::total_cmp);
        i.sort_by(f64::total_cmp);
        (g, i)
    }

    /// Distinct scores of both lists, ascending.
    pub fn thresholds(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.genuine.iter().chain(&self.impostor).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }
}

/// Probability that a random genuine score beats a random impostor score,
/// with ties counted as one half.
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    let (_, imp) = scores.sorted();
    // Doubled counts keep the half-credit for ties in integers.
    let mut wins2: u128 = 0;
    for &g in &scores.genuine {
        let below = imp.partition_point(|&x| x < g);
        let not_above = imp.partition_point(|&x| x <= g);
        wins2 += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs2 = 2 * scores.genuine.len() as u128 * scores.impostor.len() as u128;
    Ok(wins2 as f64 / pairs2 as f64)
}

/// False acceptance and false rejection rates at one threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// Fraction of impostor scores `>= threshold`.
    pub far: f64,
    /// Fraction of genuine scores `< threshold`.
    pub frr: f64,
}

impl OperatingPoint {
    pub fn tar(&self) -> f64 {
        1.0 - self.frr
    }
}

/// Operating points at every distinct score, ascending threshold.
pub fn roc(scores: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    scores.check()?;
    let (gen, imp) = scores.sorted();
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    Ok(scores
        .thresholds()
        .into_iter()
        .map(|t| OperatingPoint {
            threshold: t,
            far: (imp.len() - imp.partition_point(|&x| x < t)) as f64 / ni,
            frr: gen.partition_point(|&x| x < t) as f64 / ng,
        })
        .collect())
}

/// Equal error rate and the threshold where it is attained.
///
/// The sweep keeps the first threshold minimizing `|FAR - FRR|` and reports
/// the midpoint of the two rates there.
pub fn eer_point(scores: &ScoreSet) -> Result<(f64, f64)> {
    let mut best: Option<OperatingPoint> = None;
    for p in roc(scores)? {
        if best.is_none_or(|b| (p.far - p.frr).abs() < (b.far - b.frr).abs()) {
            best = Some(p);
        }
    }
    let b = best.expect("non-empty score set has a threshold");
    Ok(((b.far + b.frr) / 2.0, b.threshold))
}

pub fn eer(scores: &ScoreSet) -> Result<f64> {
    Ok(eer_point(scores)?.0)
}

/// Cumulative match characteristic.
#[derive(Clone, Debug, PartialEq)]
pub struct Cmc {
    /// `rates[k - 1]` is the hit rate at rank `k`.
    pub rates: Vec<f64>,
}

impl Cmc {
    pub fn top1(&self) -> f64 {
        self.rates.first().copied().unwrap_or(0.0)
    }
}

/// One identification query: its true subject and every subject's score.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    pub true_id: String,
    pub scores: BTreeMap<String, f64>,
}

impl From<(&str, &MatchResult)> for RankedQuery {
    fn from((true_id, m): (&str, &MatchResult)) -> Self {
        RankedQuery {
            true_id: true_id.to_string(),
            scores: m.subject_scores.clone(),
        }
    }
}

/// Rank of the true subject (1-based), or `None` when it is not enrolled.
pub fn true_rank(q: &RankedQuery) -> Option<usize> {
    rank_subjects(&q.scores)
        .iter()
        .position(|s| *s == q.true_id)
        .map(|p| p + 1)
}

/// CMC over `queries`; a query whose subject is not enrolled misses at every rank.
pub fn cmc(queries: &[RankedQuery]) -> Result<Cmc> {
    if queries.is_empty() {
        return Err(Error::Data("no queries for CMC".into()));
    }
    let depth = queries.iter().map(|q| q.scores.len()).max().unwrap_or(0);
    let mut hits = vec![0usize; depth];
    for q in queries {
        if let Some(r) = true_rank(q) {
            for h in &mut hits[r - 1..] {
                *h += 1;
            }
        }
    }
    let n = queries.len() as f64;
    Ok(Cmc {
        rates: hits.into_iter().map(|h| h as f64 / n).collect(),
    })
}

/// Genuine trial: the query's score against its own subject. Impostor trials:
/// its score against every other enrolled subject.
pub fn trial_scores(queries: &[RankedQuery]) -> ScoreSet {
    let mut set = ScoreSet::default();
    for q in queries {
        for (id, &s) in &q.scores {
            if *id == q.true_id {
                set.genuine.push(s);
            } else {
                set.impostor.push(s);
            }
        }
    }
    set
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub roc: Vec<OperatingPoint>,
    pub cmc: Cmc,
    pub queries: usize,
    pub genuine_trials: usize,
    pub impostor_trials: usize,
    pub gallery_subjects: usize,
    pub excluded_subjects: usize,
}

impl EvalReport {
    pub fn from_queries(
        queries: &[RankedQuery],
        gallery_subjects: usize,
        excluded_subjects: usize,
    ) -> Result<Self> {
        let scores = trial_scores(queries);
        let (eer, eer_threshold) = eer_point(&scores)?;
        let cmc = cmc(queries)?;
        Ok(EvalReport {
            top1: cmc.top1(),
            auc: auc(&scores)?,
            eer,
            eer_threshold,
            roc: roc(&scores)?,
            cmc,
            queries: queries.len(),
            genuine_trials: scores.genuine.len(),
            impostor_trials: scores.impostor.len(),
            gallery_subjects,
            excluded_subjects,
        })
    }

    /// Write `roc.csv`, `cmc.csv` and `summary.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut roc_rows = vec![["threshold".to_string(), "far".into(), "tar".into()]];
        roc_rows.extend(
            self.roc
                .iter()
                .map(|p| [num(p.threshold), num(p.far), num(p.tar())]),
        );
        write_rows(&dir.join("roc.csv"), &roc_rows)?;

        let mut cmc_rows = vec![["rank".to_string(), "rate".into()]];
        cmc_rows.extend(
            self.cmc
                .rates
                .iter()
                .enumerate()
                .map(|(k, r)| [(k + 1).to_string(), num(*r)]),
        );
        write_rows(&dir.join("cmc.csv"), &cmc_rows)?;

        let summary = [
            ["metric".to_string(), "value".into()],
            ["top1".into(), num(self.top1)],
            ["auc".into(), num(self.auc)],
            ["eer".into(), num(self.eer)],
            ["eer_threshold".into(), num(self.eer_threshold)],
            ["queries".into(), self.queries.to_string()],
            ["genuine_trials".into(), self.genuine_trials.to_string()],
            ["impostor_trials".into(), self.impostor_trials.to_string()],
            ["gallery_subjects".into(), self.gallery_subjects.to_string()],
            [
                "excluded_subjects".into(),
                self.excluded_subjects.to_string(),
            ],
        ];
        write_rows(&dir.join("summary.csv"), &summary)
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn write_rows<R: AsRef<[String]>>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r.as_ref()).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Mean cosine similarity over same-subject and different-subject pairs.
pub fn similarity_gap<E: AsRef<[f64]>>(
    embeddings: &[E],
    subjects: &[String],
) -> Result<(f64, f64)> {
    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let c = cosine(embeddings[i].as_ref(), embeddings[j].as_ref());
            if subjects[i] == subjects[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                ne += 1;
            }
        }
    }
    if ni == 0 || ne == 0 {
        return Err(Error::Data(
            "need same-subject and different-subject pairs".into(),
        ));
    }
    Ok((intra / ni as f64, inter / ne as f64))
}

/// Settings shared by both protocols.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prototypes: usize,
    pub metric: Metric,
    /// Fraction of subjects used for training in the open-set split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            prototypes: DEFAULT_PROTOTYPES,
            metric: Metric::Cosine,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.prototypes == 0 {
            return Err(Error::Config("prototypes must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Per-query outcome, for export.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub subject_id: String,
    pub session_id: String,
    pub r_index: usize,
    pub predicted: String,
    pub best_score: f64,
    pub true_rank: Option<usize>,
}

pub fn write_queries_csv(path: &Path, outcomes: &[QueryOutcome]) -> Result<()> {
    let mut rows = vec![[
        "subject_id".to_string(),
        "session_id".into(),
        "r_index".into(),
        "predicted".into(),
        "best_score".into(),
        "true_rank".into(),
    ]];
    rows.extend(outcomes.iter().map(|q| {
        [
            q.subject_id.clone(),
            q.session_id.clone(),
            q.r_index.to_string(),
            q.predicted.clone(),
            num(q.best_score),
            q.true_rank.map_or(String::new(), |r| r.to_string()),
        ]
    }));
    write_rows(path, &rows)
}

#[derive(Clone, Debug)]
pub struct ProtocolOutput {
    pub report: EvalReport,
    pub model: HpafParams,
    pub history: Vec<EpochStats>,
    pub gallery: Gallery,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub queries: Vec<QueryOutcome>,
    /// Embeddings of every enrollment and query beat, with their subjects.
    pub test_embeddings: Vec<Embedding>,
    pub test_embedding_subjects: Vec<String>,
}

/// Beats of each subject in recording order; subjects with fewer than two
/// beats are dropped and counted.
pub fn chronological_subjects(
    beats: &[PhaseSegments],
) -> (BTreeMap<String, Vec<&PhaseSegments>>, usize) {
    let mut by: BTreeMap<String, Vec<&PhaseSegments>> = BTreeMap::new();
    for b in beats {
        by.entry(b.subject_id.clone()).or_default().push(b);
    }
    for list in by.values_mut() {
        list.sort_by(|a, b| (&a.session_id, a.r_index).cmp(&(&b.session_id, b.r_index)));
    }
    let before = by.len();
    by.retain(|_, v| v.len() >= 2);
    let excluded = before - by.len();
    if excluded > 0 {
        log::warn!("excluded {excluded} subject(s) with fewer than two beats");
    }
    (by, excluded)
}

/// Enroll the first half of every subject's beats and query with the rest.
/// Report, gallery, per-query outcomes, and every embedding with its subject.
type Enrolled = (
    EvalReport,
    Gallery,
    Vec<QueryOutcome>,
    Vec<Embedding>,
    Vec<String>,
);

fn enroll_and_query(
    model: &HpafParams,
    subjects: &BTreeMap<String, Vec<&PhaseSegments>>,
    enroll_split: impl Fn(&[&PhaseSegments]) -> (Vec<PhaseSegments>, Vec<PhaseSegments>),
    cfg: &ProtocolConfig,
    excluded: usize,
) -> Result<Enrolled> {
    let mut enroll_set: BTreeMap<String, Vec<Embedding>> = BTreeMap::new();
    let mut query_beats = Vec::new();
    let mut all_emb = Vec::new();
    let mut all_subj = Vec::new();
    for (id, list) in subjects {
        let (enroll, query) = enroll_split(list);
        let emb = model.encode_all(&enroll)?;
        all_emb.extend(emb.iter().cloned());
        all_subj.extend(std::iter::repeat_n(id.clone(), emb.len()));
        enroll_set.insert(id.clone(), emb);
        query_beats.extend(query);
    }
    let gallery = Gallery::enroll(
        &enroll_set,
        cfg.prototypes,
        cfg.metric,
        derive_seed(cfg.seed, "eval/gallery"),
    )?;
    let mut ranked = Vec::with_capacity(query_beats.len());
    let mut outcomes = Vec::with_capacity(query_beats.len());
    for beat in &query_beats {
        let e = model.encode(beat)?;
        let m = gallery.identify(e.as_slice())?;
        let q = RankedQuery::from((beat.subject_id.as_str(), &m));
        outcomes.push(QueryOutcome {
            subject_id: beat.subject_id.clone(),
            session_id: beat.session_id.clone(),
            r_index: beat.r_index,
            predicted: m.subject_id.clone(),
            best_score: m.best_score,
            true_rank: true_rank(&q),
        });
        ranked.push(q);
        all_emb.push(e);
        all_subj.push(beat.subject_id.clone());
    }
    let report = EvalReport::from_queries(&ranked, gallery.len(), excluded)?;
    Ok((report, gallery, outcomes, all_emb, all_subj))
}

fn halves(list: &[&PhaseSegments]) -> (Vec<PhaseSegments>, Vec<PhaseSegments>) {
    let h = list.len() / 2;
    (
        list[..h].iter().map(|b| (*b).clone()).collect(),
        list[h..].iter().map(|b| (*b).clone()).collect(),
    )
}

/// Closed set: train on the first chronological half of every subject,
/// enroll the same beats, and query with the second half.
pub fn run_closed_set(
    beats: &[PhaseSegments],
    cfg: &ProtocolConfig,
    on_epoch: impl FnMut(&HpafParams, &EpochStats) -> Result<()>,
) -> Result<ProtocolOutput> {
    cfg.validate()?;
    let (subjects, excluded) = chronological_subjects(beats);
    if subjects.len() < 2 {
        return Err(Error::Data(format!(
            "closed-set protocol needs two subjects, have {}",
            subjects.len()
        )));
    }
    let train_beats: Vec<PhaseSegments> = subjects.values().flat_map(|l| halves(l).0).collect();
    let outcome = train(&train_beats, &cfg.model, &cfg.train, on_epoch)?;
    let (report, gallery, queries, emb, subj) =
        enroll_and_query(&outcome.model, &subjects, halves, cfg, excluded)?;
    let ids: Vec<String> = subjects.keys().cloned().collect();
    Ok(ProtocolOutput {
        report,
        model: outcome.model,
        history: outcome.history,
        gallery,
        train_subjects: ids.clone(),
        test_subjects: ids,
        queries,
        test_embeddings: emb,
        test_embedding_subjects: subj,
    })
}

/// Enroll and query the listed subjects with an already trained model,
/// using the same chronological halves as the protocols.
pub fn evaluate_subjects(
    model: &HpafParams,
    beats: &[PhaseSegments],
    subject_ids: &[String],
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let (subjects, excluded) = chronological_subjects(beats);
    let chosen: BTreeMap<String, Vec<&PhaseSegments>> = subjects
        .into_iter()
        .filter(|(id, _)| subject_ids.contains(id))
        .collect();
    if chosen.len() < 2 {
        return Err(Error::Data(format!(
            "need two enrollable subjects, have {}",
            chosen.len()
        )));
    }
    Ok(enroll_and_query(model, &chosen, halves, cfg, excluded)?.0)
}

/// Seeded subject split into disjoint training and test sets.
pub fn split_subjects(
    ids: &[String],
    train_fraction: f64,
    seed: u64,
) -> (Vec<String>, Vec<String>) {
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut rng_for(seed, "eval/split"));
    let n_train = ((ids.len() as f64 * train_fraction).round() as usize)
        .clamp(1, ids.len().saturating_sub(1));
    let mut train = shuffled[..n_train].to_vec();
    let mut test = shuffled[n_train..].to_vec();
    train.sort();
    test.sort();
    (train, test)
}

/// Open set: train on one subject group, then enroll and query subjects
/// never seen in training.
pub fn run_open_set(
    beats: &[PhaseSegments],
    cfg: &ProtocolConfig,
    on_epoch: impl FnMut(&HpafParams, &EpochStats) -> Result<()>,
) -> Result<ProtocolOutput> {
    cfg.validate()?;
    let (subjects, excluded) = chronological_subjects(beats);
    if subjects.len() < 4 {
        return Err(Error::Data(format!(
            "open-set protocol needs four subjects, have {}",
            subjects.len()
        )));
    }
    let ids: Vec<String> = subjects.keys().cloned().collect();
    let (train_ids, test_ids) = split_subjects(&ids, cfg.train_fraction, cfg.seed);
    if train_ids.len() < 2 || test_ids.len() < 2 {
        return Err(Error::Config(format!(
            "split leaves {} training and {} test subjects; both need at least two",
            train_ids.len(),
            test_ids.len()
        )));
    }
    let train_beats: Vec<PhaseSegments> = train_ids
        .iter()
        .flat_map(|id| subjects[id].iter().map(|b| (*b).clone()))
        .collect();
    let outcome = train(&train_beats, &cfg.model, &cfg.train, on_epoch)?;
    let test: BTreeMap<String, Vec<&PhaseSegments>> = test_ids
        .iter()
        .map(|id| (id.clone(), subjects[id].clone()))
        .collect();
    let (report, gallery, queries, emb, subj) =
        enroll_and_query(&outcome.model, &test, halves, cfg, excluded)?;
    Ok(ProtocolOutput {
        report,
        model: outcome.model,
        history: outcome.history,
        gallery,
        train_subjects: train_ids,
        test_subjects: test_ids,
        queries,
        test_embeddings: emb,
        test_embedding_subjects: subj,
    })
}

#[cfg(test)]
mod tests;
