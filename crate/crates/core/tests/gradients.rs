mod common;

use common::{gaussian, rng, unit_rows, weighted_sum};
use pacm::contrastive::{pac_loss, pac_loss_in_batch, ContrastiveBatch};
use pacm::gradcheck::{fd_resolution, relative_error, FD_STEP};
use pacm::memory::{MemoryBuffer, PairRef};
use pacm::numeric::{
    normalize_rows, normalize_rows_backward, Activation, Matrix, MlpParams, NormMode, BATCH_NORM_EPS, LEAKY_RELU_SLOPE,
};
use pacm::pada::{discriminator_forward, discriminator_loss, encoder_adversarial_loss, Discriminator};

/// Worst relative error between `analytic` and central differences of `f` over
/// every coordinate of `x`. Coordinates whose probe crosses a kink are skipped
/// through `sig`.
fn fd_matrix<F>(x: &Matrix, analytic: &Matrix, f: F) -> (f64, usize)
where
    F: Fn(&Matrix) -> (f64, u64),
{
    let (_, base) = f(x);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut p = x.clone();
    for k in 0..x.as_slice().len() {
        let orig = p.as_slice()[k];
        p.as_mut_slice()[k] = orig + FD_STEP;
        let (up, su) = f(&p);
        p.as_mut_slice()[k] = orig - FD_STEP;
        let (down, sd) = f(&p);
        p.as_mut_slice()[k] = orig;
        if su != base || sd != base {
            continue;
        }
        let n = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.as_slice()[k], n, fd_resolution(up, down)));
        checked += 1;
    }
    (worst, checked)
}

fn fd_params<F>(params: &MlpParams, analytic: &pacm::numeric::MlpGrads, f: F) -> (f64, usize)
where
    F: Fn(&MlpParams) -> (f64, u64),
{
    let (_, base) = f(params);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut p = params.clone();
    for k in 0..params.num_params() {
        let orig = *p.param_mut(k);
        *p.param_mut(k) = orig + FD_STEP;
        let (up, su) = f(&p);
        *p.param_mut(k) = orig - FD_STEP;
        let (down, sd) = f(&p);
        *p.param_mut(k) = orig;
        if su != base || sd != base {
            continue;
        }
        let n = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.get(k), n, fd_resolution(up, down)));
        checked += 1;
    }
    (worst, checked)
}

#[test]
fn mlp_gradients_across_shapes() {
    let shapes: [&[usize]; 4] = [&[3, 2], &[5, 4, 3], &[6, 8, 8, 4], &[4, 16, 2]];
    let mut seed = 0;
    for dims in shapes {
        for bn in [false, true] {
            for batch in [1usize, 3, 7] {
                for mode in [NormMode::Batch, NormMode::Running] {
                    if bn && mode == NormMode::Batch && batch == 1 {
                        continue;
                    }
                    seed += 1;
                    let mut r = rng(seed);
                    let mut net = MlpParams::init(dims, Activation::LeakyRelu, bn, &mut r).unwrap();
                    for b in net.biases.iter_mut().flatten() {
                        *b = 0.1 * (seed as f64).sin();
                    }
                    if let Some(states) = net.norm_state.as_mut() {
                        for s in states {
                            s.running_mean.iter_mut().for_each(|m| *m = 0.2);
                            s.running_var.iter_mut().for_each(|v| *v = 1.7);
                        }
                    }
                    let x = gaussian(&mut r, batch, dims[0]);
                    let c = gaussian(&mut r, batch, *dims.last().unwrap());
                    let (_, cache) = net.forward(&x, mode).unwrap();
                    let (grads, gx) = net.backward(&cache, &c).unwrap();
                    let eval = |p: &MlpParams| {
                        let (out, cache) = p.forward(&x, mode).unwrap();
                        (weighted_sum(&c, &out), cache.kink_signature())
                    };
                    let (worst, checked) = fd_params(&net, &grads, eval);
                    assert!(checked > 0);
                    assert!(worst < 1e-5, "{dims:?} bn={bn} batch={batch} {mode:?}: {worst:e}");
                    let eval_x = |xx: &Matrix| {
                        let (out, cache) = net.forward(xx, mode).unwrap();
                        (weighted_sum(&c, &out), cache.kink_signature())
                    };
                    let (worst, _) = fd_matrix(&x, &gx, eval_x);
                    assert!(worst < 1e-5, "input grads {dims:?} bn={bn}: {worst:e}");
                }
            }
        }
    }
}

/// Forward pass written out with scalar loops, sharing no code with the library.
#[allow(clippy::needless_range_loop)]
fn straight_line_forward(net: &MlpParams, x: &Matrix, running: bool) -> Vec<Vec<f64>> {
    let mut h: Vec<Vec<f64>> = x.row_iter().map(|r| r.to_vec()).collect();
    let layers = net.weights.len();
    for l in 0..layers {
        let w = &net.weights[l];
        let mut pre = vec![vec![0.0; w.rows()]; h.len()];
        for (i, row) in h.iter().enumerate() {
            for o in 0..w.rows() {
                let mut s = net.biases[l][o];
                for k in 0..w.cols() {
                    s += w.row(o)[k] * row[k];
                }
                pre[i][o] = s;
            }
        }
        if l + 1 == layers {
            return pre;
        }
        if let Some(states) = &net.norm_state {
            let n = pre.len() as f64;
            for o in 0..w.rows() {
                let (mean, var) = if running {
                    (states[l].running_mean[o], states[l].running_var[o])
                } else {
                    let m = pre.iter().map(|r| r[o]).sum::<f64>() / n;
                    (m, pre.iter().map(|r| (r[o] - m).powi(2)).sum::<f64>() / n)
                };
                for r in pre.iter_mut() {
                    r[o] = (r[o] - mean) / (var + BATCH_NORM_EPS).sqrt();
                }
            }
        }
        for r in pre.iter_mut() {
            for v in r.iter_mut() {
                if *v < 0.0 {
                    *v *= LEAKY_RELU_SLOPE;
                }
            }
        }
        h = pre;
    }
    unreachable!()
}

#[test]
fn mlp_forward_matches_straight_line_oracle() {
    for seed in 0..6 {
        let mut r = rng(100 + seed);
        let bn = seed % 2 == 1;
        let net = MlpParams::init(&[5, 7, 6, 3], Activation::LeakyRelu, bn, &mut r).unwrap();
        let x = gaussian(&mut r, 4, 5);
        for (mode, running) in [(NormMode::Batch, false), (NormMode::Running, true)] {
            let (out, _) = net.forward(&x, mode).unwrap();
            let oracle = straight_line_forward(&net, &x, running);
            for (i, row) in oracle.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((out.row(i)[j] - v).abs() <= 1e-12 * v.abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn discriminator_probabilities_match_straight_line_oracle() {
    let mut r = rng(7);
    let mut disc = Discriminator::new(4, &[6, 5], &mut r).unwrap();
    for s in disc.net.norm_state.as_mut().unwrap() {
        s.running_mean
            .iter_mut()
            .enumerate()
            .for_each(|(i, m)| *m = 0.05 * i as f64);
        s.running_var.iter_mut().for_each(|v| *v = 0.8);
    }
    let z = unit_rows(&mut r, 6, 4);
    for (mode, running) in [(NormMode::Batch, false), (NormMode::Running, true)] {
        let p = discriminator_forward(&disc, &z, mode).unwrap();
        let logits = straight_line_forward(&disc.net, &z, running);
        for (pi, l) in p.iter().zip(&logits) {
            let expect = 1.0 / (1.0 + (-l[0]).exp());
            assert!((pi - expect).abs() < 1e-14, "{pi} vs {expect}");
        }
    }
}

#[test]
fn in_batch_loss_gradient_on_raw_outputs() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let b = 2 + seed as usize % 5;
        let d = 3 + seed as usize % 4;
        let tau = [0.07, 0.5, 1.0][seed as usize % 3];
        let raw_f = gaussian(&mut r, b, d);
        let raw_p = gaussian(&mut r, b, d);
        let (zf, nf) = normalize_rows(&raw_f).unwrap();
        let (zp, np) = normalize_rows(&raw_p).unwrap();
        let out = pac_loss_in_batch(&zf, &zp, tau).unwrap();
        let gf = normalize_rows_backward(&zf, &nf, &out.grad_frontal).unwrap();
        let gp = normalize_rows_backward(&zp, &np, &out.grad_profile).unwrap();
        let loss_f = |m: &Matrix| {
            let z = normalize_rows(m).unwrap().0;
            (pac_loss_in_batch(&z, &zp, tau).unwrap().loss, 0)
        };
        let loss_p = |m: &Matrix| {
            let z = normalize_rows(m).unwrap().0;
            (pac_loss_in_batch(&zf, &z, tau).unwrap().loss, 0)
        };
        assert!(fd_matrix(&raw_f, &gf, loss_f).0 < 1e-4);
        assert!(fd_matrix(&raw_p, &gp, loss_p).0 < 1e-4);
    }
}

#[test]
fn explicit_negative_loss_gradient_on_raw_outputs() {
    for seed in 0..8 {
        let mut r = rng(300 + seed);
        let (b, d, k) = (3, 4, 2 + seed as usize % 4);
        let raw_a = gaussian(&mut r, b, d);
        let raw_p = gaussian(&mut r, b, d);
        let raw_n: Vec<Matrix> = (0..b).map(|_| gaussian(&mut r, k, d)).collect();
        let build = |a: &Matrix, p: &Matrix, n: &[Matrix]| {
            let a = normalize_rows(a).unwrap().0;
            let p = normalize_rows(p).unwrap().0;
            let n = n.iter().map(|m| normalize_rows(m).unwrap().0).collect();
            ContrastiveBatch::new(a, p, n, 0.2).unwrap()
        };
        let out = pac_loss(&build(&raw_a, &raw_p, &raw_n)).unwrap();
        let (za, na) = normalize_rows(&raw_a).unwrap();
        let (zp, np) = normalize_rows(&raw_p).unwrap();
        let ga = normalize_rows_backward(&za, &na, &out.grad_anchors).unwrap();
        let gp = normalize_rows_backward(&zp, &np, &out.grad_positives).unwrap();
        let la = |m: &Matrix| (pac_loss(&build(m, &raw_p, &raw_n)).unwrap().loss, 0);
        let lp = |m: &Matrix| (pac_loss(&build(&raw_a, m, &raw_n)).unwrap().loss, 0);
        assert!(fd_matrix(&raw_a, &ga, la).0 < 1e-4);
        assert!(fd_matrix(&raw_p, &gp, lp).0 < 1e-4);
        for i in 0..b {
            let (zn, nn) = normalize_rows(&raw_n[i]).unwrap();
            let gn = normalize_rows_backward(&zn, &nn, &out.grad_negatives[i]).unwrap();
            let ln = |m: &Matrix| {
                let mut n = raw_n.clone();
                n[i] = m.clone();
                (pac_loss(&build(&raw_a, &raw_p, &n)).unwrap().loss, 0)
            };
            assert!(fd_matrix(&raw_n[i], &gn, ln).0 < 1e-4);
        }
    }
}

#[test]
fn memory_loss_gradient_on_raw_outputs() {
    for seed in 0..8 {
        let mut r = rng(400 + seed);
        let (ids, per, d, b, k) = (6usize, 2usize, 5usize, 3usize, 4 + seed as usize % 5);
        let n = ids * per;
        let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
        let mem = MemoryBuffer::from_rows(
            unit_rows(&mut r, n, d),
            labels.clone(),
            unit_rows(&mut r, n, d),
            labels,
            0.5,
        )
        .unwrap();
        let pairing: Vec<PairRef> = (0..b)
            .map(|i| PairRef {
                frontal_instance: i * per,
                profile_instance: n + i * per + 1,
                identity: i,
            })
            .collect();
        let plan = mem.plan(&pairing, k, &mut r).unwrap();
        let raw_f = gaussian(&mut r, b, d);
        let raw_p = gaussian(&mut r, b, d);
        let (zf, nf) = normalize_rows(&raw_f).unwrap();
        let (zp, np) = normalize_rows(&raw_p).unwrap();
        let out = mem.pacm_loss_planned(&zf, &zp, &plan, 0.07).unwrap();
        let gf = normalize_rows_backward(&zf, &nf, &out.grad_frontal).unwrap();
        let gp = normalize_rows_backward(&zp, &np, &out.grad_profile).unwrap();
        let lf = |m: &Matrix| {
            let z = normalize_rows(m).unwrap().0;
            (mem.pacm_loss_planned(&z, &zp, &plan, 0.07).unwrap().loss, 0)
        };
        let lp = |m: &Matrix| {
            let z = normalize_rows(m).unwrap().0;
            (mem.pacm_loss_planned(&zf, &z, &plan, 0.07).unwrap().loss, 0)
        };
        assert!(fd_matrix(&raw_f, &gf, lf).0 < 1e-4);
        assert!(fd_matrix(&raw_p, &gp, lp).0 < 1e-4);
    }
}

#[test]
fn adversarial_gradients_with_running_statistics() {
    for seed in 0..6 {
        let mut r = rng(500 + seed);
        let mut disc = Discriminator::new(4, &[8, 6], &mut r).unwrap();
        for s in disc.net.norm_state.as_mut().unwrap() {
            s.running_mean.iter_mut().for_each(|m| *m = 0.1);
            s.running_var.iter_mut().for_each(|v| *v = 0.6);
        }
        *disc.net.biases.last_mut().unwrap().first_mut().unwrap() = 0.3;
        let zf = unit_rows(&mut r, 4, 4);
        let zp = unit_rows(&mut r, 4, 4);
        let l = discriminator_loss(&disc, &zf, &zp, NormMode::Running).unwrap();
        let eval = |p: &MlpParams| {
            let d = Discriminator { net: p.clone() };
            let l = discriminator_loss(&d, &zf, &zp, NormMode::Running).unwrap();
            (l.value, l.cache.kink_signature())
        };
        let (worst, checked) = fd_params(&disc.net, &l.grads, eval);
        assert!(checked > 0);
        assert!(worst < 1e-4, "L_D seed {seed}: {worst:e}");

        let enc = encoder_adversarial_loss(&disc, &zp, None).unwrap();
        let eval_z = |m: &Matrix| {
            let d = disc.pass(m, NormMode::Running).unwrap();
            (
                encoder_adversarial_loss(&disc, m, None).unwrap().value,
                d.cache.kink_signature(),
            )
        };
        let (worst, _) = fd_matrix(&zp, &enc.grad_profile, eval_z);
        assert!(worst < 1e-4, "L_enc seed {seed}: {worst:e}");
    }
}
