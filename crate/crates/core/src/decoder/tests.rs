use std::f64::consts::{LN_2, PI};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tape;

const D: usize = 5;

fn build(modes: usize, tf: usize, seed: u64) -> (Decoder, ParamSet) {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = Decoder::new(&mut params, "dec", D, 7, modes, tf, &mut rng);
    (dec, params)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn unit(angle: f64) -> Point {
    [angle.cos(), angle.sin()]
}

fn decode_values(dec: &Decoder, params: &ParamSet, z: &Tensor, rot: Vec<[f64; 4]>, pos: &Tensor) -> Vec<Prediction> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let g = dec.decode(&p, tape.constant(z.clone()), &Arc::new(rot), pos).unwrap();
    g.predictions(dec.modes, dec.t_future)
}

fn forward_values(dec: &Decoder, params: &ParamSet, z: &Tensor, rot: Vec<[f64; 4]>, pos: &Tensor) -> Vec<Prediction> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let g = dec.forward(&p, tape.constant(z.clone()), &Arc::new(rot), pos).unwrap();
    g.predictions(dec.modes, dec.t_future)
}

const IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 1.0];

#[test]
fn rotation_examples() {
    assert_eq!(make_rotation([0.0, 1.0]).unwrap(), IDENTITY);
    assert_eq!(make_rotation([1.0, 0.0]).unwrap(), [0.0, -1.0, 1.0, 0.0]);
    assert!(matches!(make_rotation([0.0, 0.0]), Err(Error::Contract(_))));
    assert!(make_rotation([0.5, 0.5]).is_err());
}

#[test]
fn rotations_over_a_full_turn_are_proper() {
    for k in 0..360 {
        let h = unit((k as f64).to_radians());
        let r = make_rotation(h).unwrap();
        let mapped = apply_rotation(&r, h);
        assert!(mapped[0].abs() < 1e-9 && (mapped[1] - 1.0).abs() < 1e-9, "{k}: {mapped:?}");
        // RᵀR = I and det R = 1.
        let (a, b, c, d) = (r[0], r[1], r[2], r[3]);
        assert!((a * a + c * c - 1.0).abs() < 1e-9);
        assert!((b * b + d * d - 1.0).abs() < 1e-9);
        assert!((a * b + c * d).abs() < 1e-9);
        assert!((a * d - b * c - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_transform_is_the_identity() {
    let (dec, mut params) = build(3, 4, 1);
    for id in dec.transform.params() {
        params.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = random(&mut rng, &[2, D], 1.0);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let out = dec
        .transform_feature(&p, tape.constant(z.clone()), &[IDENTITY, make_rotation(unit(1.0)).unwrap()])
        .unwrap();
    assert_eq!(out.value().data(), z.data());
    assert!(dec.transform_feature(&p, tape.constant(z), &[IDENTITY]).is_err());
}

#[test]
fn rotation_reaches_the_transform() {
    let (dec, params) = build(3, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let row = random(&mut rng, &[1, D], 1.0);
    let z = Tensor::new(vec![2, D], [row.data(), row.data()].concat()).unwrap();
    let rots = [IDENTITY, make_rotation(unit(0.3)).unwrap()];
    let eval = |ps: &ParamSet| -> Tensor {
        let tape = Tape::new();
        let p = ps.bind(&tape);
        dec.transform_feature(&p, tape.constant(z.clone()), &rots).unwrap().value()
    };
    let out = eval(&params);
    assert_ne!(out.row(0), out.row(1));

    // The rows of the first layer that read R get finite-difference-checked
    // gradients.
    let w = dec.transform.layers[0].weight;
    let tape = Tape::new();
    let p = params.bind(&tape);
    let loss = dec.transform_feature(&p, tape.constant(z.clone()), &rots).unwrap().square().unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut g = params.clone();
    g.zero_grad();
    g.accumulate(&p, &grads);
    let hidden = dec.transform.layers[0].out;
    let h = 1e-5;
    let sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
    let mut any = false;
    for j in D * hidden..(D + 4) * hidden {
        let mut up = params.clone();
        up.value_mut(w)[j] += h;
        let mut down = params.clone();
        down.value_mut(w)[j] -= h;
        let n = (sq(&eval(&up)) - sq(&eval(&down))) / (2.0 * h);
        let a = g.grad(w)[j];
        assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-5, "{a} vs {n}");
        any |= a.abs() > 1e-8;
    }
    assert!(any);
}

#[test]
fn zero_decoder_predicts_standing_still() {
    let (dec, mut params) = build(4, 3, 3);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        params.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random(&mut rng, &[2, D], 1.0);
    let pos = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.0, 7.0]]).unwrap();
    let rot = vec![make_rotation(unit(0.7)).unwrap(), IDENTITY];
    for (i, pred) in decode_values(&dec, &params, &z, rot, &pos).iter().enumerate() {
        assert!(pred.rho.iter().all(|&r| (r - 0.25).abs() < 1e-15));
        for m in 0..4 {
            for t in 0..3 {
                assert_eq!(pred.mu[m][t], [pos.row(i)[0], pos.row(i)[1]]);
                assert_eq!(pred.sigma[m][t], [1.0, 1.0]);
            }
        }
    }
}

#[test]
fn means_rotate_back_to_the_ego_frame() {
    let (dec, params) = build(3, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = random(&mut rng, &[1, D], 1.0);
    let pos = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
    let aligned = &decode_values(&dec, &params, &z, vec![IDENTITY], &Tensor::zeros(&[1, 2]))[0];
    let shifted = &decode_values(&dec, &params, &z, vec![IDENTITY], &pos)[0];
    let r = make_rotation([1.0, 0.0]).unwrap();
    let turned = &decode_values(&dec, &params, &z, vec![r], &pos)[0];
    for m in 0..3 {
        for t in 0..4 {
            let a = aligned.mu[m][t];
            let s = shifted.mu[m][t];
            assert!((s[0] - a[0] - 3.0).abs() < 1e-12 && (s[1] - a[1] + 1.0).abs() < 1e-12);
            let e = turned.mu[m][t];
            let back = apply_rotation(&r, [e[0] - 3.0, e[1] + 1.0]);
            assert!((back[0] - a[0]).abs() < 1e-9 && (back[1] - a[1]).abs() < 1e-9);
        }
    }
}

fn prediction(rng: &mut ChaCha8Rng, modes: usize, tf: usize) -> Prediction {
    let mut rho: Vec<f64> = (0..modes).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|r| *r /= s);
    let pairs = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<Vec<Point>> {
        (0..modes)
            .map(|_| (0..tf).map(|_| [rng.random_range(lo..hi), rng.random_range(lo..hi)]).collect())
            .collect()
    };
    let mu = pairs(rng, -2.0, 2.0);
    let sigma = pairs(rng, 0.5, 1.5);
    Prediction { rho, mu, sigma }
}

fn naive_density(pred: &Prediction, u: &[Point]) -> f64 {
    let mut total = 0.0;
    for m in 0..pred.rho.len() {
        let mut prod = pred.rho[m];
        for (t, ut) in u.iter().enumerate() {
            for a in 0..2 {
                let s = pred.sigma[m][t][a];
                let e = (ut[a] - pred.mu[m][t][a]) / s;
                prod *= (-0.5 * e * e).exp() / (s * (2.0 * PI).sqrt());
            }
        }
        total += prod;
    }
    total
}

#[test]
fn density_examples() {
    let one = |tf: usize| Prediction {
        rho: vec![1.0],
        mu: vec![vec![[0.5, -1.0]; tf]],
        sigma: vec![vec![[1.0, 1.0]; tf]],
    };
    let p1 = gmm_density(&one(1), &[[0.5, -1.0]]).unwrap();
    assert!((p1 - 1.0 / (2.0 * PI)).abs() < 1e-15);
    assert!((p1 - 0.159155).abs() < 1e-6);
    let p3 = gmm_density(&one(3), &[[0.5, -1.0]; 3]).unwrap();
    assert!((p3 - (2.0 * PI).powi(-3)).abs() < 1e-15);
    assert!(gmm_density(&one(3), &[[0.0, 0.0]]).is_err());
}

#[test]
fn density_matches_a_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let tf = rng.random_range(1..4);
        let pred = prediction(&mut rng, 3, tf);
        let u: Vec<Point> = (0..tf).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let got = gmm_density(&pred, &u).unwrap();
        let want = naive_density(&pred, &u);
        assert!((got - want).abs() / want < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pred = prediction(&mut rng, 2, 1);
    let lo = [0, 1].map(|a| (0..2).map(|m| pred.mu[m][0][a] - 6.0 * pred.sigma[m][0][a]).fold(f64::INFINITY, f64::min));
    let hi = [0, 1].map(|a| (0..2).map(|m| pred.mu[m][0][a] + 6.0 * pred.sigma[m][0][a]).fold(f64::NEG_INFINITY, f64::max));
    // Jittered stratified sampling: one uniform draw inside each cell.
    let cells = 600;
    let step = [(hi[0] - lo[0]) / cells as f64, (hi[1] - lo[1]) / cells as f64];
    let mut sum = 0.0;
    for i in 0..cells {
        for j in 0..cells {
            let u = [
                lo[0] + (i as f64 + rng.random_range(0.0..1.0)) * step[0],
                lo[1] + (j as f64 + rng.random_range(0.0..1.0)) * step[1],
            ];
            sum += gmm_density(&pred, &[u]).unwrap();
        }
    }
    let integral = sum * step[0] * step[1];
    assert!((integral - 1.0).abs() < 0.01, "{integral}");
}

fn nll_value(logits: &Tensor, mu: &Tensor, y: &Tensor, b: f64, literal: bool) -> f64 {
    let tape = Tape::new();
    let bv = tape.constant(Tensor::scalar(b));
    traj_nll(tape.constant(logits.clone()), tape.constant(mu.clone()), y, bv, literal)
        .unwrap()
        .item()
}

fn naive_nll(logits: &Tensor, mu: &Tensor, y: &Tensor, b: f64, literal: bool) -> f64 {
    let (n, m) = (logits.shape()[0], logits.shape()[1]);
    let per = y.shape()[1];
    let mut total = 0.0;
    for i in 0..n {
        let l = logits.row(i);
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        let mut mix = 0.0;
        for k in 0..m {
            let sse: f64 = (0..per).map(|c| (mu.row(i)[k * per + c] - y.row(i)[c]).powi(2)).sum();
            let e = if literal { sse / 2.0 } else { sse / (2.0 * b * b) };
            mix += l[k].exp() / z / (2.0 * b * b).sqrt() * (-e).exp();
        }
        total -= mix.ln();
    }
    total / n as f64
}

#[test]
fn nll_closed_forms() {
    let y = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
    let logits = Tensor::zeros(&[1, 1]);
    for literal in [false, true] {
        let v = nll_value(&logits, &y, &y, 1.0, literal);
        assert!((v - 0.5 * LN_2).abs() < 1e-15);
        assert!((v - 0.346574).abs() < 1e-6);
    }
    let doubled = nll_value(&logits, &y, &y, 2.0, false);
    assert!((doubled - 0.5 * LN_2 - LN_2).abs() < 1e-15);
    assert!(traj_nll_shape_error());
}

fn traj_nll_shape_error() -> bool {
    let tape = Tape::new();
    let b = tape.constant(Tensor::scalar(1.0));
    let logits = tape.constant(Tensor::zeros(&[2, 3]));
    let mu = tape.constant(Tensor::zeros(&[2, 12]));
    traj_nll(logits, mu, &Tensor::zeros(&[2, 5]), b, false).is_err()
}

#[test]
fn nll_matches_a_naive_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.random_range(1..4);
        let per = 2 * rng.random_range(1..4);
        let logits = random(&mut rng, &[n, 2], 2.0);
        let y = random(&mut rng, &[n, per], 2.0);
        let mu = random(&mut rng, &[n, 2 * per], 2.0);
        let b = rng.random_range(0.5..2.0);
        for literal in [false, true] {
            let got = nll_value(&logits, &mu, &y, b, literal);
            let want = naive_nll(&logits, &mu, &y, b, literal);
            assert!((got - want).abs() / want.abs().max(1e-300) < 1e-9, "{got} vs {want}");
        }
    }
}

#[test]
fn literal_and_scaled_nll_agree_bitwise_at_unit_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&mut rng, &[3, 4], 1.0);
    let y = random(&mut rng, &[3, 6], 3.0);
    let mu = random(&mut rng, &[3, 24], 3.0);
    let a = nll_value(&logits, &mu, &y, 1.0, false);
    let b = nll_value(&logits, &mu, &y, 1.0, true);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_ne!(nll_value(&logits, &mu, &y, 1.5, false), nll_value(&logits, &mu, &y, 1.5, true));
}

#[test]
fn total_loss_examples() {
    let tape = Tape::new();
    let s = |v: f64| tape.constant(Tensor::scalar(v));
    let zero = LossConfig {
        lambda_aux: 0.0,
        lambda_cl: 0.0,
        ..LossConfig::default()
    };
    let t = total_loss(s(1.7), &[s(3.0), s(5.0)], s(2.0), &zero).unwrap();
    assert_eq!(t.item(), 1.7);
    let half = LossConfig {
        lambda_aux: 0.5,
        lambda_cl: 0.5,
        ..LossConfig::default()
    };
    assert_eq!(total_loss(s(1.0), &[s(1.0)], s(1.0), &half).unwrap().item(), 2.0);
    // Aux terms are averaged over blocks.
    assert_eq!(total_loss(s(1.0), &[s(1.0), s(3.0)], s(0.0), &half).unwrap().item(), 2.0);
}

#[test]
fn total_gradient_is_the_weighted_sum() {
    let (dec, params) = build(2, 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = random(&mut rng, &[2, D], 1.0);
    let y = random(&mut rng, &[2, 4], 2.0);
    let pos = Tensor::zeros(&[2, 2]);
    let rot = Arc::new(vec![IDENTITY, make_rotation(unit(2.0)).unwrap()]);
    let cfg = LossConfig {
        lambda_aux: 0.3,
        lambda_cl: 0.7,
        ..LossConfig::default()
    };
    // Main term from the decoder, aux from a shifted target, cl from the
    // squared norm of the means.
    let grads_of = |which: usize| -> ParamSet {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let g = dec.forward(&p, tape.constant(z.clone()), &rot, &pos).unwrap();
        let b = tape.constant(Tensor::scalar(1.0));
        let main = traj_nll(g.logits, g.mu, &y, b, false).unwrap();
        let shifted = Tensor::new(vec![2, 4], y.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let aux = traj_nll(g.logits, g.mu, &shifted, b, false).unwrap();
        let cl = g.mu.square().unwrap().mean().unwrap();
        let loss = match which {
            0 => total_loss(main, &[aux], cl, &cfg).unwrap(),
            1 => main,
            2 => aux,
            _ => cl,
        };
        let grads = tape.backward(loss).unwrap();
        let mut out = params.clone();
        out.zero_grad();
        out.accumulate(&p, &grads);
        out
    };
    let (total, main, aux, cl) = (grads_of(0), grads_of(1), grads_of(2), grads_of(3));
    for id in params.ids() {
        for j in 0..params.get(id).len() {
            let want = main.grad(id)[j] + 0.3 * aux.grad(id)[j] + 0.7 * cl.grad(id)[j];
            assert!((total.grad(id)[j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn argmax_takes_the_first_maximum() {
    assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    assert_eq!(argmax(&[2.0]), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_mixture_outputs_are_valid(seed in 0u64..10_000, scale in 0.1f64..30.0) {
        let (dec, params) = build(5, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random(&mut rng, &[3, D], scale);
        let rot: Vec<[f64; 4]> = (0..3).map(|_| make_rotation(unit(rng.random_range(0.0..6.3))).unwrap()).collect();
        for pred in forward_values(&dec, &params, &z, rot, &random(&mut rng, &[3, 2], 10.0)) {
            prop_assert!(pred.rho.iter().all(|&r| r >= 0.0));
            prop_assert!((pred.rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(pred.sigma.iter().flatten().flatten().all(|&s| s >= SIGMA_MIN));
        }
    }

    #[test]
    fn prop_fixing_the_top_mode_lowers_the_nll(seed in 0u64..10_000, frac in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, &[1, 3], 2.0);
        let y = random(&mut rng, &[1, 4], 2.0);
        let mut mu = random(&mut rng, &[1, 12], 2.0);
        let top = argmax(logits.row(0));
        let before = nll_value(&logits, &mu, &y, 1.0, false);
        let off = mu.data()[top * 4..top * 4 + 4].to_vec();
        prop_assume!(off.iter().zip(y.data()).any(|(a, b)| (a - b).abs() > 1e-6));
        for c in 0..4 {
            mu.data_mut()[top * 4 + c] = y.data()[c] + frac * (off[c] - y.data()[c]);
        }
        prop_assert!(nll_value(&logits, &mu, &y, 1.0, false) < before);
    }
}
