use care_core::metrics::*;
use care_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 200;
const EPS: f64 = 1e-12;

fn iv(a: f64, b: f64) -> Interval {
    Interval::new(a, b).unwrap()
}

// Oracles recompute each definition directly, without sorting or shared helpers.

fn ap_oracle(scores: &[f64], pos: &[bool]) -> f64 {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let positives: Vec<usize> = (0..n).filter(|&i| pos[i]).collect();
    let mut total = 0.0;
    for &i in &positives {
        let r = rank(i);
        let above = positives.iter().filter(|&&j| rank(j) <= r).count();
        total += above as f64 / r as f64;
    }
    total / positives.len() as f64
}

fn iou_oracle(a: Interval, b: Interval) -> f64 {
    let (la, lb) = (a.end() - a.start(), b.end() - b.start());
    let disjoint = a.end() <= b.start() || b.end() <= a.start();
    if disjoint {
        return 0.0;
    }
    let union = a.end().max(b.end()) - a.start().min(b.start());
    (la + lb - union) / union
}

fn random_interval(rng: &mut ChaCha8Rng) -> Interval {
    let a: f64 = rng.random_range(0.0..10.0);
    let len: f64 = rng.random_range(0.01..5.0);
    iv(a, a + len)
}

#[test]
fn ap_hand_cases() {
    assert_eq!(average_precision(&[0.9, 0.8, 0.1, 0.05], &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap(), 0.25);
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6, 0.5], &[true, false, true, false, false]).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < EPS);
    assert_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0);
    assert!(matches!(average_precision(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedAp)));
    assert!(average_precision(&[0.1], &[true, false]).is_err());
    // Ties go to the lower index.
    assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
}

#[test]
fn ap_depends_on_ranking_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(2..10);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut p: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        p[0] = true;
        let t: Vec<f64> = s.iter().map(|v: &f64| v.exp() * 4.0 + 1.0).collect();
        assert_eq!(average_precision(&s, &p).unwrap(), average_precision(&t, &p).unwrap());
    }
}

#[test]
fn map_hand_cases_and_skips() {
    let out = multilabel_map(&[vec![0.9], vec![0.1]], &[vec![true], vec![false]], None).unwrap();
    assert_eq!(out.map, 1.0);
    let scores = vec![vec![0.9, 0.2], vec![0.1, 0.9], vec![0.0, 0.1]];
    let labels = vec![vec![true, false], vec![false, false], vec![false, true]];
    let out = multilabel_map(&scores, &labels, None).unwrap();
    assert_eq!(out.per_class, vec![(0, 1.0), (1, 1.0 / 3.0)]);
    let scores = vec![vec![0.9, 0.9, 0.3], vec![0.1, 0.2, 0.2]];
    let labels = vec![vec![true, false, false], vec![false, true, false]];
    let out = multilabel_map(&scores, &labels, None).unwrap();
    assert_eq!(out.map, 0.75);
    assert_eq!(out.skipped, vec![2]);
    assert!(matches!(multilabel_map(&scores, &labels, Some(&[2])), Err(Error::Input(_))));
    assert!(multilabel_map(&scores, &labels, Some(&[5])).is_err());
}

#[test]
fn ap_and_map_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..INSTANCES {
        let items = rng.random_range(1..=10);
        let classes = rng.random_range(1..=4);
        // Coarse scores force ties.
        let scores: Vec<Vec<f64>> = (0..items)
            .map(|_| (0..classes).map(|_| rng.random_range(0..5) as f64 / 4.0).collect())
            .collect();
        let labels: Vec<Vec<bool>> = (0..items).map(|_| (0..classes).map(|_| rng.random_bool(0.4)).collect()).collect();
        let mut oracle = Vec::new();
        for c in 0..classes {
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            if pos.iter().any(|&p| p) {
                let want = ap_oracle(&col, &pos);
                assert!((average_precision(&col, &pos).unwrap() - want).abs() <= EPS);
                oracle.push(want);
            }
        }
        match multilabel_map(&scores, &labels, None) {
            Ok(out) => {
                let want = oracle.iter().sum::<f64>() / oracle.len() as f64;
                assert!((out.map - want).abs() <= EPS);
                assert_eq!(out.skipped.len(), classes - oracle.len());
            }
            Err(_) => assert!(oracle.is_empty()),
        }
    }
}

#[test]
fn segments() {
    let th = SegmentThresholds::default();
    let s = segment_classes(&[600, 300, 50], th);
    assert_eq!((s.head, s.middle, s.tail), (vec![0], vec![1], vec![2]));
    let s = segment_classes(&[500, 100, 501, 99], th);
    assert_eq!((s.head, s.middle, s.tail), (vec![2], vec![0, 1], vec![3]));
    assert!(SegmentThresholds::new(100, 500).is_err());

    let mut counts = Vec::new();
    counts.extend((0..17).map(|i| 501 + 37 * i as u64));
    counts.extend((0..29).map(|i| 100 + 13 * i as u64));
    counts.extend((0..94).map(|i| i as u64));
    let s = segment_classes(&counts, th);
    assert_eq!((s.head.len(), s.middle.len(), s.tail.len()), (17, 29, 94));
    let mut all: Vec<usize> = s.head.iter().chain(&s.middle).chain(&s.tail).copied().collect();
    all.sort();
    assert_eq!(all, (0..140).collect::<Vec<_>>());
}

#[test]
fn iou_hand_cases_and_properties() {
    assert_eq!(temporal_iou(iv(1.0, 2.0), iv(1.0, 2.0)), 1.0);
    assert!((temporal_iou(iv(0.0, 2.0), iv(1.0, 3.0)) - 1.0 / 3.0).abs() < EPS);
    assert_eq!(temporal_iou(iv(0.0, 1.0), iv(2.0, 3.0)), 0.0);
    assert!(Interval::new(2.0, 2.0).is_err());
    assert!(Interval::new(-1.0, 2.0).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let (a, b) = (random_interval(&mut rng), random_interval(&mut rng));
        let x = temporal_iou(a, b);
        assert_eq!(x, temporal_iou(b, a));
        assert!((0.0..=1.0).contains(&x));
        assert!((x - iou_oracle(a, b)).abs() <= EPS);
    }
}

#[test]
fn recall_hand_cases() {
    let gts = [iv(0.0, 10.0); 4];
    // Top-1 IoUs 0.8, 0.2, 0.6, 0.9 against [0, 10].
    let preds = vec![vec![iv(0.0, 8.0)], vec![iv(0.0, 2.0)], vec![iv(0.0, 6.0)], vec![iv(0.0, 9.0)]];
    assert_eq!(recall_at_n(&preds, &gts, 1, 0.5).unwrap(), 0.75);
    let exact: Vec<Vec<Interval>> = gts.iter().map(|g| vec![*g]).collect();
    assert_eq!(recall_at_n(&exact, &gts, 1, 0.7).unwrap(), 1.0);
    assert_eq!(mean_iou(&gts, &gts).unwrap(), 1.0);
    // IoU exactly at the threshold does not count.
    assert_eq!(recall_at_n(&[vec![iv(0.0, 5.0)]], &[iv(0.0, 10.0)], 1, 0.5).unwrap(), 0.0);
    assert!(matches!(recall_at_n(&preds, &gts, 0, 0.5), Err(Error::Input(_))));
    let m = mean_iou(&[iv(0.0, 2.0), iv(5.0, 6.0)], &[iv(1.0, 3.0), iv(5.0, 6.0)]).unwrap();
    assert!((m - 2.0 / 3.0).abs() < EPS);
    assert!(mean_iou(&[], &[]).is_err());
}

#[test]
fn recall_and_mean_iou_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let q = rng.random_range(1..=10);
        let gts: Vec<Interval> = (0..q).map(|_| random_interval(&mut rng)).collect();
        let preds: Vec<Vec<Interval>> = (0..q)
            .map(|_| (0..rng.random_range(1..=5)).map(|_| random_interval(&mut rng)).collect())
            .collect();
        let mut last_n = 0.0;
        for n in 1..=5 {
            let mut last_mu = f64::INFINITY;
            for mu in [0.1, 0.3, 0.5, 0.7] {
                let mut hits = 0;
                for i in 0..q {
                    let mut ok = false;
                    for p in preds[i].iter().take(n) {
                        if iou_oracle(*p, gts[i]) > mu {
                            ok = true;
                        }
                    }
                    hits += ok as usize;
                }
                let r = recall_at_n(&preds, &gts, n, mu).unwrap();
                assert!((r - hits as f64 / q as f64).abs() <= EPS);
                assert!(r <= last_mu);
                last_mu = r;
            }
            let r = recall_at_n(&preds, &gts, n, 0.3).unwrap();
            assert!(r >= last_n);
            last_n = r;
        }
        let top1: Vec<Interval> = preds.iter().map(|p| p[0]).collect();
        let want = (0..q).map(|i| iou_oracle(top1[i], gts[i])).sum::<f64>() / q as f64;
        assert!((mean_iou(&top1, &gts).unwrap() - want).abs() <= EPS);
    }
}

#[test]
fn pck_hand_cases() {
    let gt: Vec<(f64, f64)> = (0..23).map(|i| (i as f64 * 5.0, 50.0)).collect();
    let vis = vec![true; 23];
    assert_eq!(pck(&gt, &gt, &vis, (100.0, 200.0), 0.05).unwrap(), 1.0);
    let mut pred = gt.clone();
    pred[0].0 += 10.0;
    pred[1].1 += 10.001;
    let (c, t) = pck_counts(&pred, &gt, &vis, (100.0, 200.0), 0.05).unwrap();
    assert_eq!((c, t), (22, 23));
    let far: Vec<(f64, f64)> = gt.iter().map(|&(x, y)| (x + 7.0, y + 7.5)).collect();
    assert_eq!(pck(&far, &gt, &vis, (100.0, 200.0), 0.05).unwrap(), 0.0);
    let mut hidden = vec![false; 23];
    hidden[3] = true;
    assert_eq!(pck(&far, &gt, &hidden, (100.0, 200.0), 0.05).unwrap(), 0.0);
    assert!(matches!(pck(&gt, &gt, &[false; 23], (100.0, 200.0), 0.05), Err(Error::Input(_))));
    assert!(pck(&gt, &gt, &vis, (0.0, 200.0), 0.05).is_err());
}

#[test]
fn pck_matches_oracle_and_is_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..INSTANCES {
        let k = rng.random_range(1..=10);
        let gt: Vec<(f64, f64)> = (0..k).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let pred: Vec<(f64, f64)> = gt
            .iter()
            .map(|&(x, y)| (x + rng.random_range(-8.0..8.0), y + rng.random_range(-8.0..8.0)))
            .collect();
        let mut vis: Vec<bool> = (0..k).map(|_| rng.random_bool(0.7)).collect();
        vis[0] = true;
        let bbox = (rng.random_range(20.0..150.0), rng.random_range(20.0..150.0));
        let alpha = 0.05;
        let thr: f64 = alpha * if bbox.0 > bbox.1 { bbox.0 } else { bbox.1 };
        let mut ok = 0;
        let mut tot = 0;
        for i in 0..k {
            if vis[i] {
                tot += 1;
                let (dx, dy) = (pred[i].0 - gt[i].0, pred[i].1 - gt[i].1);
                if (dx * dx + dy * dy).sqrt() <= thr {
                    ok += 1;
                }
            }
        }
        let got = pck(&pred, &gt, &vis, bbox, alpha).unwrap();
        assert!((got - ok as f64 / tot as f64).abs() <= EPS);
        let shift = |v: &[(f64, f64)]| v.iter().map(|&(x, y)| (x + 16.0, y - 32.0)).collect::<Vec<_>>();
        assert_eq!(pck(&shift(&pred), &shift(&gt), &vis, bbox, alpha).unwrap(), got);
    }
}

#[test]
fn accuracy_cases_and_oracle() {
    assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert!((accuracy(&[1, 2, 3], &[1, 0, 3]).unwrap() - 2.0 / 3.0).abs() < EPS);
    assert!(accuracy(&[], &[]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=10);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut same = 0;
        for i in 0..n {
            if a[i] == b[i] {
                same += 1;
            }
        }
        assert!((accuracy(&a, &b).unwrap() - same as f64 / n as f64).abs() <= EPS);
    }
}
