mod common;

use common::{rng, unit_rows};
use pacm::contrastive::pac_loss_in_batch;
use pacm::memory::{MemoryBuffer, PairRef};
use pacm::numeric::{norm, normalize_rows, Matrix};
use pacm::synth::View;
use proptest::prelude::*;

fn buffer(ids: usize, per: usize, d: usize, m: f64, seed: u64) -> MemoryBuffer {
    let mut r = rng(seed);
    let n = ids * per;
    let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
    MemoryBuffer::from_rows(
        unit_rows(&mut r, n, d),
        labels.clone(),
        unit_rows(&mut r, n, d),
        labels,
        m,
    )
    .unwrap()
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn updates_keep_rows_unit_and_leave_others_alone(
        seed in 0u64..1000,
        m in 0.0f64..=1.0,
        updates in prop::collection::vec((any::<bool>(), 0usize..12, prop::collection::vec(-3.0f64..3.0, 4)), 1..40),
    ) {
        let mut mem = buffer(4, 3, 4, m, seed);
        for (frontal, row, raw) in updates {
            prop_assume!(norm(&raw) > 1e-3);
            let z = normalize_rows(&Matrix::from_vec(1, 4, raw).unwrap()).unwrap().0;
            let view = if frontal { View::Frontal } else { View::Profile };
            let instance = if frontal { row } else { 12 + row };
            let before_same = bits(mem.rows(view));
            let before_other = bits(mem.rows(view.opposite()));
            mem.update_entry(view, instance, z.row(0)).unwrap();
            prop_assert_eq!(bits(mem.rows(view.opposite())), before_other);
            let after = bits(mem.rows(view));
            for (k, (a, b)) in after.iter().zip(&before_same).enumerate() {
                if k / 4 != row {
                    prop_assert_eq!(a, b);
                }
            }
            for r in mem.rows(view).row_iter() {
                prop_assert!((norm(r) - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn loss_evaluation_never_touches_the_buffer(seed in 0u64..1000, k in 1usize..10) {
        let mem = buffer(5, 2, 3, 0.5, seed);
        let snapshot = mem.clone();
        let mut r = rng(seed + 1);
        let pairing: Vec<PairRef> = (0..3)
            .map(|i| PairRef { frontal_instance: 2 * i, profile_instance: 10 + 2 * i + 1, identity: i })
            .collect();
        let zf = unit_rows(&mut r, 3, 3);
        let zp = unit_rows(&mut r, 3, 3);
        let out = mem.pacm_loss(&zf, &zp, &pairing, k.min(8), 0.1, &mut r).unwrap();
        prop_assert!(out.loss.is_finite());
        prop_assert_eq!(&mem, &snapshot);
    }

    #[test]
    fn momentum_blend_matches_closed_form(
        m in 0.0f64..=1.0,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        prop_assume!(a.hypot(b) > 1e-3);
        let (c, s) = (a / a.hypot(b), b / a.hypot(b));
        let mut mem = MemoryBuffer::from_rows(
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), vec![0],
            Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(), vec![0],
            m,
        ).unwrap();
        let blend = [m + (1.0 - m) * c, (1.0 - m) * s];
        let len = blend[0].hypot(blend[1]);
        prop_assume!(len > 1e-6);
        mem.update_entry(View::Frontal, 0, &[c, s]).unwrap();
        let row = mem.rows(View::Frontal).row(0);
        prop_assert!((row[0] - blend[0] / len).abs() < 1e-12);
        prop_assert!((row[1] - blend[1] / len).abs() < 1e-12);
    }
}

#[test]
fn memory_equal_to_live_batch_reproduces_the_in_batch_loss() {
    for seed in 0..20 {
        let mut r = rng(900 + seed);
        let b = 3 + seed as usize % 6;
        let d = 4 + seed as usize % 3;
        let zf = unit_rows(&mut r, b, d);
        let zp = unit_rows(&mut r, b, d);
        let ids: Vec<usize> = (0..b).collect();
        let mem = MemoryBuffer::from_rows(zf.clone(), ids.clone(), zp.clone(), ids, 0.5).unwrap();
        let pairing: Vec<PairRef> = (0..b)
            .map(|i| PairRef {
                frontal_instance: i,
                profile_instance: b + i,
                identity: i,
            })
            .collect();
        let pacm = mem.pacm_loss(&zf, &zp, &pairing, b - 1, 0.07, &mut r).unwrap();
        let pac = pac_loss_in_batch(&zf, &zp, 0.07).unwrap();
        assert!((pacm.loss - pac.loss).abs() < 1e-10, "{} vs {}", pacm.loss, pac.loss);
    }
}

#[test]
fn uniform_similarities_give_log_of_softmax_width() {
    // Every memory row equals every live embedding, so all cosines are 1.
    let (b, k) = (4, 200);
    let n = 60 * 4;
    let row = vec![1.0, 0.0, 0.0];
    let rows = Matrix::from_rows(&vec![row.clone(); n]).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i / 4).collect();
    let mem = MemoryBuffer::from_rows(rows.clone(), labels.clone(), rows, labels, 0.5).unwrap();
    let z = Matrix::from_rows(&vec![row; b]).unwrap();
    let pairing: Vec<PairRef> = (0..b)
        .map(|i| PairRef {
            frontal_instance: 4 * i,
            profile_instance: n + 4 * i,
            identity: i,
        })
        .collect();
    let out = mem.pacm_loss(&z, &z, &pairing, k, 0.07, &mut rng(1)).unwrap();
    let per = ((k + 1) as f64).ln();
    assert!((out.loss_frontal - b as f64 * per).abs() < 1e-9);
    assert!((out.loss_profile - b as f64 * per).abs() < 1e-9);
}

#[test]
fn ten_thousand_updates_keep_every_row_unit() {
    let mut mem = buffer(50, 4, 8, 0.5, 3);
    let mut r = rng(4);
    let z = unit_rows(&mut r, 10_000, 8);
    for k in 0..10_000 {
        let view = if k % 2 == 0 { View::Frontal } else { View::Profile };
        let inst = (k * 7919) % 200 + if view == View::Profile { 200 } else { 0 };
        mem.update_entry(view, inst, z.row(k)).unwrap();
    }
    for view in [View::Frontal, View::Profile] {
        for row in mem.rows(view).row_iter() {
            assert!((norm(row) - 1.0).abs() <= 1e-9);
        }
    }
}
