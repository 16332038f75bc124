mod common;

use common::{brute_force_verification, rng, unit_rows};
use pacm::eval::{rank1_identification, tar_at_far, verification_metrics, ScoreSet};
use pacm::numeric::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_scores(r: &mut pacm::rng::DetRng, n: usize, shift: f64, quantized: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = (r.random::<f64>() * 2.0 - 1.0 + shift).clamp(-1.0, 1.0);
            if quantized {
                (x * 20.0).round() / 20.0
            } else {
                x
            }
        })
        .collect()
}

#[test]
fn verification_matches_exhaustive_scan() {
    let mut r = rng(1);
    for case in 0..100 {
        let ng = r.random_range(1..=500);
        let ni = r.random_range(1..=500);
        let quantized = case % 3 == 0;
        let shift = r.random::<f64>() * 0.8;
        let g = random_scores(&mut r, ng, shift, quantized);
        let i = random_scores(&mut r, ni, 0.0, quantized);
        let v = verification_metrics(&ScoreSet::new(g.clone(), i.clone()).unwrap()).unwrap();
        let (acc, thr, eer) = brute_force_verification(&g, &i);
        assert_eq!(v.accuracy, acc, "case {case}");
        assert_eq!(v.threshold, thr, "case {case}");
        assert!((v.eer - eer).abs() < 1e-12, "case {case}: {} vs {eer}", v.eer);
    }
}

#[test]
fn eer_ignores_strictly_increasing_transforms() {
    let mut r = rng(2);
    let transforms: [fn(f64) -> f64; 3] = [|x| x * x * x, |x| (3.0 * x).tanh() / 3f64.tanh(), |x| 0.5 * x - 0.25];
    for _ in 0..20 {
        let g = random_scores(&mut r, 300, 0.4, false);
        let i = random_scores(&mut r, 300, 0.0, false);
        let base = verification_metrics(&ScoreSet::new(g.clone(), i.clone()).unwrap()).unwrap();
        for f in transforms {
            let s = ScoreSet::new(g.iter().map(|&x| f(x)).collect(), i.iter().map(|&x| f(x)).collect()).unwrap();
            let v = verification_metrics(&s).unwrap();
            assert!((v.eer - base.eer).abs() < 1e-12);
            assert_eq!(v.accuracy, base.accuracy);
        }
    }
}

#[test]
fn worked_example_from_exhaustive_scan() {
    let g = vec![0.9, 0.6, 0.4];
    let i = vec![0.5, 0.3, 0.1];
    let (acc, _, eer) = brute_force_verification(&g, &i);
    assert_eq!(acc, 5.0 / 6.0);
    assert!((eer - 1.0 / 3.0).abs() < 1e-15);
    let v = verification_metrics(&ScoreSet::new(g, i).unwrap()).unwrap();
    assert_eq!(v.accuracy, 5.0 / 6.0);
    assert!((v.eer - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn tar_tracks_far_under_the_null_model() {
    let targets = [1e-3, 1e-2, 0.1];
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let g: Vec<f64> = (0..1000).map(|_| r.random::<f64>()).collect();
        let i: Vec<f64> = (0..1000).map(|_| r.random::<f64>()).collect();
        let out = tar_at_far(&ScoreSet::new(g, i).unwrap(), &targets).unwrap();
        for t in out {
            assert!(t.far <= t.far_target);
            // Both rates are binomial proportions over 1000 draws from one distribution.
            let sigma = (t.far_target * (1.0 - t.far_target) * (2.0 / 1000.0)).sqrt();
            assert!(
                (t.tar - t.far).abs() <= 3.0 * sigma,
                "seed {seed}: TAR {} at FAR {}",
                t.tar,
                t.far_target
            );
        }
    }
}

#[test]
fn random_embeddings_sit_at_chance_eer() {
    let mut r = rng(3);
    let n = 5000;
    let a = unit_rows(&mut r, 2 * n, 32);
    let b = unit_rows(&mut r, 2 * n, 32);
    let scores: Vec<f64> = (0..2 * n)
        .map(|k| pacm::numeric::dot(a.row(k), b.row(k)).clamp(-1.0, 1.0))
        .collect();
    let s = ScoreSet::new(scores[..n].to_vec(), scores[n..].to_vec()).unwrap();
    let v = verification_metrics(&s).unwrap();
    assert!((v.eer - 0.5).abs() <= 0.03, "EER {}", v.eer);
}

#[test]
fn random_embeddings_sit_at_chance_rank1() {
    let mut r = rng(4);
    let c = 50;
    let n = 5000;
    let gallery = unit_rows(&mut r, c, 32);
    let probes = unit_rows(&mut r, n, 32);
    let ids: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let acc = rank1_identification(&gallery, &(0..c).collect::<Vec<_>>(), &probes, &ids, &vec![0; n]).unwrap()[&0];
    let p = 1.0 / c as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "rank-1 {acc}");
}

#[test]
fn rank1_is_invariant_to_gallery_order() {
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let c = 12;
        let gallery = unit_rows(&mut r, c, 6);
        let probes = unit_rows(&mut r, 200, 6);
        let ids: Vec<usize> = (0..200).map(|_| r.random_range(0..c)).collect();
        let tiers: Vec<usize> = (0..200).map(|k| k % 3).collect();
        let gids: Vec<usize> = (0..c).collect();
        let base = rank1_identification(&gallery, &gids, &probes, &ids, &tiers).unwrap();
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut r);
        let permuted = gallery.select_rows(&order);
        let pids: Vec<usize> = order.iter().map(|&k| gids[k]).collect();
        assert_eq!(
            rank1_identification(&permuted, &pids, &probes, &ids, &tiers).unwrap(),
            base
        );
    }
}

#[test]
fn duplicated_gallery_rows_resolve_to_the_lowest_index() {
    let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let probe = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let first = rank1_identification(&e, &[3, 4], &probe, &[3], &[0]).unwrap();
    let second = rank1_identification(&e, &[4, 3], &probe, &[3], &[0]).unwrap();
    assert_eq!((first[&0], second[&0]), (1.0, 0.0));
}
