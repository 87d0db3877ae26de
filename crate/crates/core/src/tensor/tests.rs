use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference gradient of `f` at each input, compared against the
/// tape. Returns the largest relative error.
fn fd_check(inputs: &[Tensor], f: impl for<'a> Fn(&[Var<'a>]) -> Result<Var<'a>>) -> f64 {
    let h = 1e-5;
    let eval = |vals: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        f(&vars).unwrap().item()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn matmul_identity_and_orthogonal_rows() {
    let tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
    let c = a.matmul(b).unwrap().value();
    assert_eq!(c.shape(), &[1, 1]);
    assert_eq!(c.data(), &[0.0]);
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(b), Err(TensorError::Dim { .. })));
}

#[test]
fn matmul_gradient_is_column_sums_of_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let tape = Tape::new();
    let (va, vb) = (tape.variable(a.clone()), tape.variable(b.clone()));
    let loss = va.matmul(vb).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    let ga = g.get(va).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            let row_sum = b.row(p).iter().sum::<f64>();
            assert!((ga[i * 4 + p] - row_sum).abs() < 1e-12);
        }
    }
    let err = fd_check(&[a, b], |v| v[0].matmul(v[1])?.sum());
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    for v in x.softmax(0).unwrap().value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::vector(vec![1000.0, 0.0, 0.0]));
    let y = x.softmax(0).unwrap().value();
    assert!((y.data()[0] - 1.0).abs() < 1e-12);
    assert!(y.data()[1] < 1e-12 && y.data()[2] < 1e-12);

    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = x.softmax(0).unwrap().value();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        let naive = v.exp() / z;
        assert!((y.data()[i] - naive).abs() / naive < 1e-12);
    }
}

#[test]
fn softmax_along_inner_axis() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let y = x.softmax(0).unwrap().value();
    for col in 0..3 {
        let s = y.at(&[0, col]) + y.at(&[1, col]);
        assert!((s - 1.0).abs() < 1e-15);
        assert!((y.at(&[1, col]) - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
    }
}

#[test]
fn mlp_zero_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamSet::new();
    let mlp = Mlp::new(&mut params, "m", &[3, 5, 2], &mut rng);
    for id in mlp.params() {
        let shape = params.get(id).shape().to_vec();
        params.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let tape = Tape::new();
    let b = params.bind(&tape);
    let x = tape.constant(random(&[4, 3], &mut rng));
    assert!(mlp.forward(&b, x).unwrap().value().data().iter().all(|v| *v == 0.0));

    let mut params = ParamSet::new();
    let single = Mlp::new(&mut params, "id", &[3, 3], &mut rng);
    params.set(single.layers[0].weight, Tensor::eye(3)).unwrap();
    params.set(single.layers[0].bias.unwrap(), Tensor::zeros(&[3])).unwrap();
    let tape = Tape::new();
    let b = params.bind(&tape);
    let input = random(&[2, 3], &mut rng);
    let x = tape.constant(input.clone());
    assert_eq!(single.forward(&b, x).unwrap().value(), input);

    let bad = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(single.forward(&b, bad), Err(TensorError::Dim { .. })));
}

#[test]
fn mlp_gradient_check_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamSet::new();
    let mlp = Mlp::new(&mut params, "m", &[3, 6, 2], &mut rng);
    // nonzero biases so every parameter matters
    for id in mlp.params() {
        let shape = params.get(id).shape().to_vec();
        params.set(id, random(&shape, &mut rng)).unwrap();
    }
    let x = random(&[4, 3], &mut rng);
    let ids = mlp.params();
    let values: Vec<Tensor> = ids.iter().map(|&id| params.get(id).clone()).collect();
    let err = fd_check(&values, |vars| {
        let tape = vars[0].tape();
        let mut b = params.bind(tape);
        for (k, &id) in ids.iter().enumerate() {
            b.replace(id, vars[k]);
        }
        let out = mlp.forward(&b, tape.constant(x.clone()))?;
        out.square()?.sum()
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let v = random(&[1, 4], &mut rng);
    let out = attention(
        tape.constant(random(&[1, 3], &mut rng)),
        tape.constant(random(&[1, 3], &mut rng)),
        tape.constant(v.clone()),
        1.0 / 3f64.sqrt(),
    )
    .unwrap();
    assert_eq!(out.value().data(), v.data());

    let k1 = random(&[1, 3], &mut rng);
    let v1 = random(&[1, 2], &mut rng);
    let k = Tensor::new(vec![2, 3], [k1.data(), k1.data()].concat()).unwrap();
    let vv = Tensor::new(vec![2, 2], [v1.data(), v1.data()].concat()).unwrap();
    let out = attention(
        tape.constant(random(&[1, 3], &mut rng)),
        tape.constant(k),
        tape.constant(vv),
        0.5,
    )
    .unwrap()
    .value();
    for (a, b) in out.data().iter().zip(v1.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn attention_matches_hand_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, k, v) = (random(&[1, 5], &mut rng), random(&[3, 5], &mut rng), random(&[3, 2], &mut rng));
    let scale = 1.0 / 5f64.sqrt();
    let tape = Tape::new();
    let out = attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), scale)
        .unwrap()
        .value();
    let mut logits = [0.0; 3];
    for j in 0..3 {
        for d in 0..5 {
            logits[j] += q.data()[d] * k.at(&[j, d]);
        }
        logits[j] *= scale;
    }
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for c in 0..2 {
        let expected: f64 = (0..3).map(|j| logits[j].exp() / z * v.at(&[j, c])).sum();
        assert!((out.data()[c] - expected).abs() < 1e-12);
    }
}

#[test]
fn attention_dim_mismatch() {
    let tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[1, 3]));
    let k = tape.constant(Tensor::zeros(&[2, 4]));
    let v = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(attention(q, k, v, 1.0).is_err());
}

fn grid_3x4x2() -> Tensor {
    Tensor::new(vec![4, 3, 2], (0..24).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap()
}

fn sample(grid: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let tape = Tape::new();
    let g = tape.constant(grid.clone());
    let p = tape.constant(Tensor::new(vec![1, 2], vec![x, y]).unwrap());
    g.bilinear_sample(p).unwrap().value().into_data()
}

#[test]
fn bilinear_examples() {
    let grid = grid_3x4x2();
    let at = |r: usize, c: usize| vec![grid.at(&[r, c, 0]), grid.at(&[r, c, 1])];
    assert_eq!(sample(&grid, 2.0, 3.0), at(3, 2));
    let mid = sample(&grid, 0.5, 0.0);
    let (a, b) = (at(0, 0), at(0, 1));
    assert_eq!(mid, vec![(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]);
    assert_eq!(sample(&grid, -5.0, -5.0), at(0, 0));
    assert_eq!(sample(&grid, 99.0, 99.0), at(3, 2));
}

#[test]
fn bilinear_gradients_reach_grid_and_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let grid = random(&[5, 6, 3], &mut rng);
    let points = Tensor::new(vec![3, 2], vec![1.3, 2.7, 4.2, 0.4, 2.5, 3.1]).unwrap();
    let err = fd_check(&[grid, points], |v| v[0].bilinear_sample(v[1])?.square()?.sum());
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn bilinear_clamped_points_get_no_gradient() {
    let tape = Tape::new();
    let grid = tape.constant(grid_3x4x2());
    let p = tape.variable(Tensor::new(vec![1, 2], vec![-2.0, 7.5]).unwrap());
    let loss = grid.bilinear_sample(p).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(p).unwrap(), &[0.0, 0.0]);
}

#[test]
fn constant_grid_is_not_copied_onto_tape() {
    let grid = grid_3x4x2();
    let tape = Tape::new();
    let g = tape.constant(grid.clone());
    assert!(g.value().shares_buffer(&grid));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.variable(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

    let tape = Tape::new();
    let x = tape.variable(Tensor::scalar(3.0));
    let g = tape.backward(x.mul(x).unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);

    assert!(matches!(tape.backward(tape.variable(Tensor::zeros(&[2]))), Err(TensorError::Contract(_))));
}

#[test]
fn non_finite_values_are_rejected() {
    let tape = Tape::new();
    let x = tape.variable(Tensor::vector(vec![-1.0]));
    assert_eq!(x.ln().unwrap_err(), TensorError::NonFinite { op: "log" });
    let big = tape.variable(Tensor::vector(vec![1e3]));
    assert!(big.exp().is_err());
}

#[test]
fn shape_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], &mut rng);
    let err = fd_check(std::slice::from_ref(&a), |v| {
        let s = v[0].softmax(1)?;
        let l = v[0].logsumexp(2)?;
        let c = v[0].cumsum(1)?.slice(2, 1, 2)?;
        let r = v[0].reshape(&[6, 4])?.gather_rows(&[5, 0, 0, 3])?;
        let n = v[0].reshape(&[6, 4])?.normalize_rows()?;
        let t = r.transpose()?.exp()?;
        let cat = Var::concat(&[s, v[0].sum_axis(1)?.reshape(&[2, 1, 4])?], 1)?;
        cat.square()?
            .sum()?
            .add(l.square()?.sum()?)?
            .add(c.mul(c)?.sum()?)?
            .add(t.sum()?)?
            .add(n.slice(1, 0, 1)?.sum()?)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[3, 4], &mut rng);
    let b = Tensor::new(vec![3, 4], random(&[12], &mut rng).data().iter().map(|v| v + 2.0).collect()).unwrap();
    let r = random(&[4], &mut rng);
    let s = Tensor::scalar(0.7);
    let err = fd_check(&[a, b, r, s], |v| {
        let x = v[0].mul(v[1])?.div(v[1].add_scalar(1.0)?)?;
        let y = x.add_row(v[2])?.mul_row(v[2])?.scale_by(v[3])?;
        let z = y.sub(v[0])?.relu()?.add(v[1].sqrt()?.ln()?)?;
        z.scale(0.3)?.clamp_min(-10.0)?.mean()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn bmm_gradients_both_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let bt = random(&[2, 5, 4], &mut rng);
    let err = fd_check(&[a, b, bt], |v| {
        let x = v[0].bmm(v[1], false)?;
        let y = v[0].bmm(v[2], true)?;
        x.mul(y)?.sum()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn rotate_pairs_gradients() {
    use std::sync::Arc;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random(&[2, 4], &mut rng);
    let mats = Arc::new(vec![[0.6, -0.8, 0.8, 0.6], [1.0, 2.0, -3.0, 0.5]]);
    for transpose in [false, true] {
        let m = Arc::clone(&mats);
        let err = fd_check(std::slice::from_ref(&a), move |v| {
            v[0].rotate_pairs(Arc::clone(&m), transpose)?.square()?.sum()
        });
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[5, 5], &mut rng);
    let run = || {
        let tape = Tape::new();
        let x = tape.variable(a.clone());
        let y = x.matmul(x).unwrap().softmax(1).unwrap().logsumexp(0).unwrap().sum().unwrap();
        tape.backward(y).unwrap().get_or_zeros(x)
    };
    let (g1, g2) = (run(), run());
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_gradients_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[10, 10], &mut rng);
        let b = random(&[10, 10], &mut rng);
        let err = fd_check(&[a, b], |v| {
            let h = v[0].matmul(v[1])?.softmax(1)?;
            let g = v[0].mul(v[1])?.exp()?.logsumexp(1)?;
            h.square()?.sum()?.add(g.sum()?)
        });
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn prop_softmax_is_a_distribution(values in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let tape = Tape::new();
        let y = tape.constant(Tensor::vector(values)).softmax(0).unwrap().value();
        prop_assert!(y.data().iter().all(|v| *v >= 0.0));
        prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prop_bilinear_is_linear_within_a_cell(
        cx in 0usize..5, cy in 0usize..3,
        p in (0.0f64..1.0, 0.0f64..1.0), q in (0.0f64..1.0, 0.0f64..1.0),
        alpha in 0.0f64..1.0,
    ) {
        // along a line inside one cell the stencil is bilinear, so restrict
        // to axis-aligned segments where it is exactly linear
        let mut rng = ChaCha8Rng::seed_from_u64((cx * 7 + cy) as u64);
        let grid = random(&[4, 6, 2], &mut rng);
        let (x, y) = (cx as f64 + p.0, cy as f64 + p.1);
        let x2 = cx as f64 + q.0;
        let fp = sample(&grid, x, y);
        let fq = sample(&grid, x2, y);
        let fm = sample(&grid, alpha * x + (1.0 - alpha) * x2, y);
        for c in 0..2 {
            prop_assert!((fm[c] - (alpha * fp[c] + (1.0 - alpha) * fq[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn prop_attention_stays_in_value_hull(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..6);
        let tape = Tape::new();
        let v = random(&[m, 3], &mut rng);
        let out = attention(
            tape.constant(random(&[2, 4], &mut rng)),
            tape.constant(random(&[m, 4], &mut rng)),
            tape.constant(v.clone()),
            0.5,
        ).unwrap().value();
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let bound = (0..m).map(|j| norm(v.row(j))).fold(0.0, f64::max);
        for i in 0..2 {
            prop_assert!(norm(out.row(i)) <= bound + 1e-12);
            for c in 0..3 {
                let lo = (0..m).map(|j| v.at(&[j, c])).fold(f64::INFINITY, f64::min);
                let hi = (0..m).map(|j| v.at(&[j, c])).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.at(&[i, c]) >= lo - 1e-12 && out.at(&[i, c]) <= hi + 1e-12);
            }
        }
    }
}
