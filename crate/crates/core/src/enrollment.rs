//! Multi-prototype enrollment and minimum-distance matching.
//!
//! Each subject's enrollment embeddings are clustered with k-means and every
//! cluster mean becomes one prototype in the [`Gallery`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::cosine;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

pub const DEFAULT_PROTOTYPES: usize = 3;
pub const MAX_LLOYD_ITERS: usize = 100;

const GALLERY_MAGIC: &str = "hpaf-gallery 1";

/// Similarity used at match time. Both are oriented so that larger is closer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Cosine,
    /// Negated Euclidean distance.
    Euclidean,
}

impl Metric {
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => cosine(a, b),
            Metric::Euclidean => -squared_distance(a, b).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Cluster index of every input point; always `< centroids.len()`.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seeds<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].as_ref().to_vec()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| nearest(p.as_ref(), &centroids).1)
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // Every point coincides with a centroid already.
            rng.gen_range(0..n)
        };
        centroids.push(points[pick].as_ref().to_vec());
    }
    centroids
}

fn cluster_means<P: AsRef<[f64]>>(
    points: &[P],
    assignments: &[usize],
    k: usize,
) -> Vec<Option<Vec<f64>>> {
    let dim = points[0].as_ref().len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.as_ref()) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

/// Lloyd's algorithm from k-means++ seeding.
///
/// `k` is clamped to the number of points. Iteration stops at an assignment
/// fixpoint or after [`MAX_LLOYD_ITERS`] rounds. A cluster that empties is
/// reseeded with the point farthest from its own centroid. Clusters still
/// empty at the end are dropped, so every returned centroid is the exact mean
/// of its members.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64) -> Result<Clustering> {
    if points.is_empty() {
        return Err(Error::Data("k-means needs at least one point".into()));
    }
    if k == 0 {
        return Err(Error::Config(
            "number of prototypes must be positive".into(),
        ));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Data("k-means points have mixed dimensions".into()));
    }
    let k = k.min(points.len());
    let mut rng = rng_for(seed, "enroll/kmeans");
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        let next: Vec<usize> = points
            .iter()
            .map(|p| nearest(p.as_ref(), &centroids).0)
            .collect();
        if next == assignments {
            break;
        }
        assignments = next;
        let means = cluster_means(points, &assignments, k);
        for (j, mean) in means.into_iter().enumerate() {
            match mean {
                Some(m) => centroids[j] = m,
                None => {
                    let far = points
                        .iter()
                        .enumerate()
                        .map(|(i, p)| (i, squared_distance(p.as_ref(), &centroids[assignments[i]])))
                        .fold(
                            (0, -1.0),
                            |best, cur| if cur.1 > best.1 { cur } else { best },
                        );
                    centroids[j] = points[far.0].as_ref().to_vec();
                }
            }
        }
    }

    let means = cluster_means(points, &assignments, k);
    let mut remap = vec![usize::MAX; k];
    let mut kept = Vec::new();
    for (j, mean) in means.into_iter().enumerate() {
        if let Some(m) = mean {
            remap[j] = kept.len();
            kept.push(m);
        }
    }
    Ok(Clustering {
        assignments: assignments.iter().map(|&a| remap[a]).collect(),
        centroids: kept,
    })
}

/// Prototypes of one subject: the cluster means of its embeddings.
pub fn enroll<P: AsRef<[f64]>>(embeddings: &[P], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if embeddings.is_empty() {
        return Err(Error::Data(
            "cannot enroll a subject without embeddings".into(),
        ));
    }
    Ok(kmeans(embeddings, k, seed)?.centroids)
}

/// Outcome of matching one query against a gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub subject_id: String,
    pub best_score: f64,
    /// Each enrolled subject's best prototype score.
    pub subject_scores: BTreeMap<String, f64>,
}

impl MatchResult {
    /// Subjects ordered by descending score, ties by subject id.
    pub fn ranking(&self) -> Vec<&str> {
        rank_subjects(&self.subject_scores)
    }
}

pub fn rank_subjects(scores: &BTreeMap<String, f64>) -> Vec<&str> {
    let mut ids: Vec<(&str, f64)> = scores.iter().map(|(s, &v)| (s.as_str(), v)).collect();
    // BTreeMap order is lexicographic and the sort is stable.
    ids.sort_by(|a, b| b.1.total_cmp(&a.1));
    ids.into_iter().map(|(s, _)| s).collect()
}

/// Enrolled prototypes for a set of subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    pub k: usize,
    pub metric: Metric,
    pub seed: u64,
    pub dim: usize,
    subjects: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Gallery {
    /// Enroll every subject in `embeddings` with up to `k` prototypes each.
    /// Each subject clusters from its own seed stream, so adding a subject
    /// leaves the others' prototypes unchanged.
    pub fn enroll<P: AsRef<[f64]>>(
        embeddings: &BTreeMap<String, Vec<P>>,
        k: usize,
        metric: Metric,
        seed: u64,
    ) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Data("no subjects to enroll".into()));
        }
        let mut subjects = BTreeMap::new();
        let mut dim = None;
        for (id, set) in embeddings {
            let protos = enroll(set, k, derive_seed(seed, &format!("enroll/{id}")))
                .map_err(|e| Error::Data(format!("subject {id}: {e}")))?;
            let d = protos[0].len();
            if *dim.get_or_insert(d) != d {
                return Err(Error::Data(format!(
                    "subject {id}: embedding dimension {d} differs"
                )));
            }
            subjects.insert(id.clone(), protos);
        }
        Ok(Gallery {
            k,
            metric,
            seed,
            dim: dim.unwrap_or(0),
            subjects,
        })
    }

    pub fn subjects(&self) -> &BTreeMap<String, Vec<Vec<f64>>> {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn prototypes(&self, subject: &str) -> Option<&[Vec<f64>]> {
        self.subjects.get(subject).map(Vec::as_slice)
    }

    /// Winner is the subject owning the best-scoring prototype overall.
    pub fn identify(&self, query: &[f64]) -> Result<MatchResult> {
        if self.subjects.is_empty() {
            return Err(Error::Data("gallery is empty".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Data(format!(
                "query has dimension {}, gallery has {}",
                query.len(),
                self.dim
            )));
        }
        let mut subject_scores = BTreeMap::new();
        let mut winner: Option<(&str, f64)> = None;
        for (id, protos) in &self.subjects {
            let best = protos
                .iter()
                .map(|p| self.metric.score(query, p))
                .fold(f64::NEG_INFINITY, f64::max);
            subject_scores.insert(id.clone(), best);
            if winner.is_none_or(|(_, w)| best > w) {
                winner = Some((id, best));
            }
        }
        let (id, best_score) = winner.expect("gallery is non-empty");
        Ok(MatchResult {
            subject_id: id.to_string(),
            best_score,
            subject_scores,
        })
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "{GALLERY_MAGIC}").unwrap();
        writeln!(out, "k {}", self.k).unwrap();
        writeln!(out, "metric {}", self.metric.name()).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "dim {}", self.dim).unwrap();
        for (id, protos) in &self.subjects {
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("subject id {id:?} cannot be stored")));
            }
            writeln!(out, "subject {id} {}", protos.len()).unwrap();
            for p in protos {
                let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| {
                Error::parse(0, format!("unexpected end of gallery, expected {what}"))
            })
        };
        let (n, magic) = next("header")?;
        if magic != GALLERY_MAGIC {
            return Err(Error::parse(n, "not a gallery file"));
        }
        fn field<'a>(line: (usize, &'a str), key: &str) -> Result<&'a str> {
            line.1
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| Error::parse(line.0, format!("expected `{key}`")))
        }
        fn number<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
            s.trim()
                .parse()
                .map_err(|_| Error::parse(line, format!("bad number {s:?}")))
        }
        let l = next("k")?;
        let k = number(l.0, field(l, "k")?)?;
        let l = next("metric")?;
        let metric =
            Metric::parse(field(l, "metric")?).map_err(|e| Error::parse(l.0, e.to_string()))?;
        let l = next("seed")?;
        let seed = number(l.0, field(l, "seed")?)?;
        let l = next("dim")?;
        let dim: usize = number(l.0, field(l, "dim")?)?;

        let mut subjects = BTreeMap::new();
        while let Ok(l) = next("subject") {
            if l.1.is_empty() {
                continue;
            }
            let rest = field(l, "subject")?;
            let (id, count) = rest
                .split_once(' ')
                .ok_or_else(|| Error::parse(l.0, "expected `subject <id> <count>`"))?;
            let count: usize = number(l.0, count)?;
            let mut protos = Vec::with_capacity(count);
            for _ in 0..count {
                let (ln, row) = next("prototype row")?;
                let values = row
                    .split_whitespace()
                    .map(|v| number::<f64>(ln, v))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != dim {
                    return Err(Error::parse(
                        ln,
                        format!("expected {dim} values, found {}", values.len()),
                    ));
                }
                protos.push(values);
            }
            if protos.is_empty() {
                return Err(Error::parse(l.0, format!("subject {id} has no prototypes")));
            }
            subjects.insert(id.to_string(), protos);
        }
        Ok(Gallery {
            k,
            metric,
            seed,
            dim,
            subjects,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
