use super::*;
use crate::cps::{extract_dataset, PhaseWindows};
use crate::prep::PrepConfig;
use crate::synth::{generate_dataset, DatasetSpec, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_auc(s: &ScoreSet) -> f64 {
    let mut wins2 = 0u64;
    for &g in &s.genuine {
        for &i in &s.impostor {
            wins2 += if g > i {
                2
            } else if g == i {
                1
            } else {
                0
            };
        }
    }
    wins2 as f64 / (2 * s.genuine.len() * s.impostor.len()) as f64
}

fn brute_eer(s: &ScoreSet) -> f64 {
    let mut thresholds: Vec<f64> = Vec::new();
    for &v in s.genuine.iter().chain(&s.impostor) {
        if !thresholds.contains(&v) {
            thresholds.push(v);
        }
    }
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = (f64::INFINITY, 0.0);
    for t in thresholds {
        let far = s.impostor.iter().filter(|&&x| x >= t).count() as f64 / s.impostor.len() as f64;
        let frr = s.genuine.iter().filter(|&&x| x < t).count() as f64 / s.genuine.len() as f64;
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), (far + frr) / 2.0);
        }
    }
    best.1
}

fn random_set(rng: &mut ChaCha8Rng, ng: usize, ni: usize, levels: u32) -> ScoreSet {
    // Quantized scores produce plenty of ties.
    let mut draw = |shift: f64| (rng.gen_range(0..levels) as f64 / levels as f64) + shift;
    ScoreSet::new(
        (0..ng).map(|_| draw(0.2)).collect(),
        (0..ni).map(|_| draw(0.0)).collect(),
    )
}

#[test]
fn auc_extremes() {
    let s = ScoreSet::new(vec![0.9], vec![0.1]);
    assert_eq!(auc(&s).unwrap(), 1.0);
    let same = vec![0.3, 0.1, 0.7, 0.7];
    assert_eq!(auc(&ScoreSet::new(same.clone(), same)).unwrap(), 0.5);
}

#[test]
fn auc_matches_pair_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = ScoreSet::new(
        (0..50).map(|_| rng.gen_range(0.0..1.0)).collect(),
        (0..50).map(|_| rng.gen_range(-0.5..0.8)).collect(),
    );
    assert_eq!(auc(&s).unwrap(), brute_auc(&s));
}

#[test]
fn eer_extremes() {
    let s = ScoreSet::new(vec![0.8, 0.9, 0.95], vec![0.1, 0.2]);
    assert_eq!(eer(&s).unwrap(), 0.0);
    let same = vec![0.4, 0.2, 0.9];
    assert_eq!(eer(&ScoreSet::new(same.clone(), same)).unwrap(), 0.5);
}

#[test]
fn eer_matches_exhaustive_sweep_on_twenty_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = random_set(&mut rng, 10, 10, 8);
    assert_eq!(eer(&s).unwrap(), brute_eer(&s));
}

#[test]
fn empty_lists_are_rejected() {
    assert!(matches!(
        auc(&ScoreSet::new(vec![], vec![0.1])),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        eer(&ScoreSet::new(vec![0.1], vec![])),
        Err(Error::Data(_))
    ));
}

#[test]
fn roc_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random_set(&mut rng, 40, 70, 15);
    let r = roc(&s).unwrap();
    for w in r.windows(2) {
        assert!(w[0].threshold < w[1].threshold);
        assert!(w[1].far <= w[0].far);
        assert!(w[1].tar() <= w[0].tar());
    }
    assert_eq!(r[0].far, 1.0);
    assert_eq!(r[0].tar(), 1.0);
}

fn query(true_id: &str, scores: &[(&str, f64)]) -> RankedQuery {
    RankedQuery {
        true_id: true_id.into(),
        scores: scores.iter().map(|(s, v)| (s.to_string(), *v)).collect(),
    }
}

#[test]
fn cmc_when_every_query_ranks_first() {
    let qs = vec![
        query("a", &[("a", 0.9), ("b", 0.1)]),
        query("b", &[("a", 0.2), ("b", 0.3)]),
    ];
    assert_eq!(cmc(&qs).unwrap().rates, vec![1.0, 1.0]);
}

#[test]
fn cmc_third_of_five() {
    let q = query(
        "c",
        &[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.1), ("e", 0.0)],
    );
    assert_eq!(cmc(&[q]).unwrap().rates, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn cmc_ties_rank_lexicographically() {
    let q = query("b", &[("a", 0.5), ("b", 0.5), ("c", 0.5)]);
    assert_eq!(true_rank(&q), Some(2));
}

#[test]
fn unenrolled_subject_misses_everywhere() {
    let q = query("zz", &[("a", 0.9), ("b", 0.8)]);
    assert_eq!(cmc(&[q]).unwrap().rates, vec![0.0, 0.0]);
}

#[test]
fn cmc_under_random_scores_is_k_over_s() {
    let s = 6;
    let trials = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let ids: Vec<String> = (0..s).map(|i| format!("g{i}")).collect();
    let qs: Vec<RankedQuery> = (0..trials)
        .map(|_| RankedQuery {
            true_id: ids[rng.gen_range(0..s)].clone(),
            scores: ids
                .iter()
                .map(|id| (id.clone(), rng.gen::<f64>()))
                .collect(),
        })
        .collect();
    let c = cmc(&qs).unwrap();
    for (k, rate) in c.rates.iter().enumerate() {
        let p = (k + 1) as f64 / s as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!(
            (rate - p).abs() <= 3.0 * sigma + 1e-12,
            "rank {}: {rate} vs {p}",
            k + 1
        );
    }
    assert_eq!(*c.rates.last().unwrap(), 1.0);
}

#[test]
fn perfect_separation_report() {
    let qs = vec![
        query("a", &[("a", 0.9), ("b", 0.1), ("c", 0.0)]),
        query("b", &[("a", 0.2), ("b", 0.95), ("c", 0.3)]),
        query("c", &[("a", -0.2), ("b", 0.1), ("c", 0.6)]),
    ];
    let r = EvalReport::from_queries(&qs, 3, 0).unwrap();
    assert_eq!((r.auc, r.eer, r.top1), (1.0, 0.0, 1.0));
    assert_eq!((r.genuine_trials, r.impostor_trials), (3, 6));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_brute_force(seed in 0u64..10_000, ng in 1usize..500, ni in 1usize..500, levels in 2u32..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(&mut rng, ng, ni, levels);
        prop_assert_eq!(auc(&s).unwrap(), brute_auc(&s));
        prop_assert_eq!(eer(&s).unwrap(), brute_eer(&s));
    }

    #[test]
    fn metrics_ignore_increasing_transforms(seed in 0u64..10_000, ng in 1usize..60, ni in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(&mut rng, ng, ni, 20);
        let f = |v: &f64| (3.0 * v).exp() - 2.0;
        let t = ScoreSet::new(s.genuine.iter().map(f).collect(), s.impostor.iter().map(f).collect());
        prop_assert_eq!(auc(&s).unwrap(), auc(&t).unwrap());
        prop_assert_eq!(eer(&s).unwrap(), eer(&t).unwrap());
    }

    #[test]
    fn cmc_is_non_decreasing(seed in 0u64..10_000, s in 1usize..8, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..s).map(|i| format!("g{i}")).collect();
        let qs: Vec<RankedQuery> = (0..n)
            .map(|_| RankedQuery {
                true_id: ids[rng.gen_range(0..s)].clone(),
                scores: ids.iter().map(|id| (id.clone(), rng.gen_range(0..4) as f64)).collect(),
            })
            .collect();
        let c = cmc(&qs).unwrap();
        prop_assert_eq!(c.rates.len(), s);
        prop_assert!(c.rates.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*c.rates.last().unwrap(), 1.0);
    }
}

#[test]
fn split_is_seeded_and_disjoint() {
    let ids: Vec<String> = (0..16).map(|i| format!("s{i:02}")).collect();
    let (a, b) = split_subjects(&ids, 0.5, 3);
    assert_eq!((a.len(), b.len()), (8, 8));
    assert!(a.iter().all(|x| !b.contains(x)));
    assert_eq!(split_subjects(&ids, 0.5, 3), (a.clone(), b));
    assert_ne!(split_subjects(&ids, 0.5, 4).0, a);
}

fn small_beats(subjects: usize, secs: f64) -> Vec<PhaseSegments> {
    let spec = DatasetSpec {
        subjects,
        sessions: 1,
        duration_secs: secs,
        seed: 2,
    };
    let records: Vec<_> = generate_dataset(&spec, &SynthConfig::default())
        .into_iter()
        .map(|r| r.record)
        .collect();
    extract_dataset(&records, &PrepConfig::default(), &PhaseWindows::default())
        .unwrap()
        .0
}

fn quick_config() -> ProtocolConfig {
    ProtocolConfig {
        model: ModelConfig::tiny(),
        train: TrainConfig {
            epochs: 1,
            batch_size: 8,
            base_lr: 1e-3,
            ..TrainConfig::default()
        },
        ..ProtocolConfig::default()
    }
}

#[test]
fn one_beat_subject_is_excluded() {
    let mut beats = small_beats(3, 8.0);
    let mut lone = beats[0].clone();
    lone.subject_id = "lone".into();
    beats.push(lone);
    let (subjects, excluded) = chronological_subjects(&beats);
    assert_eq!(excluded, 1);
    assert!(!subjects.contains_key("lone"));
}

#[test]
fn closed_set_runs_and_repeats() {
    let beats = small_beats(4, 8.0);
    let cfg = quick_config();
    let a = run_closed_set(&beats, &cfg, |_, _| Ok(())).unwrap();
    let b = run_closed_set(&beats, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.gallery_subjects, 4);
    assert_eq!(a.report.queries, a.queries.len());
    assert_eq!(a.history.len(), 1);
}

#[test]
fn open_set_runs_and_repeats() {
    let mut beats = small_beats(6, 8.0);
    let mut lone = beats[0].clone();
    lone.subject_id = "lone".into();
    beats.push(lone);
    let cfg = quick_config();
    let a = run_open_set(&beats, &cfg, |_, _| Ok(())).unwrap();
    let b = run_open_set(&beats, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.excluded_subjects, 1);
    assert_eq!((a.train_subjects.len(), a.test_subjects.len()), (3, 3));
    assert!(a
        .train_subjects
        .iter()
        .all(|s| !a.test_subjects.contains(s)));
    assert!(a
        .queries
        .iter()
        .all(|q| a.test_subjects.contains(&q.subject_id)));

    let dir = tempfile::tempdir().unwrap();
    a.report.write_csv(dir.path()).unwrap();
    let first = std::fs::read(dir.path().join("summary.csv")).unwrap();
    b.report.write_csv(dir.path()).unwrap();
    assert_eq!(
        first,
        std::fs::read(dir.path().join("summary.csv")).unwrap()
    );
    let cmc_text = std::fs::read_to_string(dir.path().join("cmc.csv")).unwrap();
    assert_eq!(cmc_text.lines().count(), 1 + 3);
}
