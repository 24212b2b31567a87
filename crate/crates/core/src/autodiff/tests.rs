use std::sync::Arc;

use super::*;
use crate::error::LensError;
use crate::numerics::{sample_standard_gaussian, RngState, Tensor};

fn gauss(rng: &mut RngState, shape: &[usize]) -> Tensor {
    sample_standard_gaussian(rng, shape).unwrap()
}

fn positive(rng: &mut RngState, shape: &[usize]) -> Tensor {
    gauss(rng, shape).map(|v| 0.5 + v.abs())
}

#[test]
fn quadratic_form_value_and_gradient() {
    let x = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
    let rec = record(&[x], |t, v| {
        let xt = t.transpose(v[0])?;
        t.matmul(xt, v[0])
    })
    .unwrap();
    assert_eq!(rec.value().data(), &[5.0]);
    let g = rec.backward(&Tensor::filled(&[1, 1], 1.0)).unwrap();
    assert_eq!(g.get(rec.inputs[0]).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn softmax_sums_to_one() {
    let mut rng = RngState::new(1);
    let x = gauss(&mut rng, &[3, 7]).scale(5.0);
    let rec = record(&[x], |t, v| {
        let s = t.softmax_rows(v[0])?;
        t.sum(s)
    })
    .unwrap();
    assert!((rec.value().data()[0] - 3.0).abs() < 1e-12);
    let single = record(&[gauss(&mut rng, &[1, 9])], |t, v| {
        let s = t.softmax_rows(v[0])?;
        t.sum(s)
    })
    .unwrap();
    assert!((single.value().data()[0] - 1.0).abs() < 1e-14);
}

#[test]
fn linear_map_cotangent_is_transpose() {
    let mut rng = RngState::new(2);
    let a = gauss(&mut rng, &[4, 3]);
    let x = gauss(&mut rng, &[3, 1]);
    let v = gauss(&mut rng, &[4, 1]);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let xv = tape.var(x);
    let y = tape.matmul(av, xv).unwrap();
    let g = backward(&tape, y, &v).unwrap();
    let expected = a.transpose().unwrap().matmul(&v).unwrap();
    assert!(g.get(xv).unwrap().max_abs_diff(&expected) < 1e-14);
    assert!(g.get(av).is_none());
}

#[test]
fn seed_shape_mismatch_is_an_error() {
    let rec = record(&[Tensor::zeros(&[2, 2])], |t, v| t.tanh(v[0])).unwrap();
    assert!(matches!(
        rec.backward(&Tensor::zeros(&[4])),
        Err(LensError::Shape { .. })
    ));
}

#[test]
fn unknown_primitive_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::zeros(&[2, 2]));
    assert!(matches!(
        tape.apply("relu", &[x]),
        Err(LensError::UnknownPrimitive(name)) if name == "relu"
    ));
    assert!(tape.apply("tanh", &[x]).is_ok());
    assert!(tape.apply("matmul", &[x]).is_err());
}

type Builder = fn(&mut Tape, &[Var]) -> crate::Result<Var>;

/// One scalar-valued composition per registered primitive, together with
/// input shapes and whether inputs must be positive.
fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, bool, Builder)> {
    // sum(y) + 0.3·sum(y²): nonlinear so every input coordinate matters
    fn reduce(t: &mut Tape, y: Var) -> crate::Result<Var> {
        let sq = t.square(y)?;
        let lin = t.sum(y)?;
        let quad = t.sum(sq)?;
        let q = t.scale(quad, 0.3)?;
        t.add(lin, q)
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], false, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            reduce(t, y)
        }),
        ("add", vec![vec![3, 3], vec![3, 3]], false, |t, v| {
            let y = t.add(v[0], v[1])?;
            reduce(t, y)
        }),
        ("sub", vec![vec![3, 3], vec![3, 3]], false, |t, v| {
            let y = t.sub(v[0], v[1])?;
            reduce(t, y)
        }),
        ("mul", vec![vec![2, 5], vec![2, 5]], false, |t, v| {
            let y = t.mul(v[0], v[1])?;
            reduce(t, y)
        }),
        ("add_row", vec![vec![4, 3], vec![1, 3]], false, |t, v| {
            let y = t.add_row(v[0], v[1])?;
            reduce(t, y)
        }),
        ("mul_row", vec![vec![4, 3], vec![3]], false, |t, v| {
            let y = t.mul_row(v[0], v[1])?;
            reduce(t, y)
        }),
        ("mul_scalar", vec![vec![3, 2], vec![1]], false, |t, v| {
            let y = t.mul_scalar(v[0], v[1])?;
            reduce(t, y)
        }),
        ("scale", vec![vec![3, 2]], false, |t, v| {
            let y = t.scale(v[0], -1.7)?;
            reduce(t, y)
        }),
        ("add_scalar", vec![vec![3, 2]], false, |t, v| {
            let y = t.add_scalar(v[0], 0.4)?;
            reduce(t, y)
        }),
        ("tanh", vec![vec![3, 4]], false, |t, v| {
            let y = t.tanh(v[0])?;
            reduce(t, y)
        }),
        ("sigmoid", vec![vec![3, 4]], false, |t, v| {
            let y = t.sigmoid(v[0])?;
            reduce(t, y)
        }),
        ("exp", vec![vec![3, 4]], false, |t, v| {
            let y = t.exp(v[0])?;
            reduce(t, y)
        }),
        ("sqrt", vec![vec![3, 4]], true, |t, v| {
            let y = t.sqrt(v[0])?;
            reduce(t, y)
        }),
        ("recip", vec![vec![3, 4]], true, |t, v| {
            let y = t.recip(v[0])?;
            reduce(t, y)
        }),
        ("square", vec![vec![3, 4]], false, |t, v| {
            let y = t.square(v[0])?;
            reduce(t, y)
        }),
        ("softmax", vec![vec![3, 5], vec![3, 5]], false, |t, v| {
            let y = t.softmax_rows(v[0])?;
            let w = t.mul(y, v[1])?;
            t.sum(w)
        }),
        ("layer_norm", vec![vec![3, 6], vec![3, 6]], false, |t, v| {
            let y = t.layer_norm_rows(v[0], 1e-5)?;
            let w = t.mul(y, v[1])?;
            t.sum(w)
        }),
        ("row_sum", vec![vec![4, 3]], false, |t, v| {
            let y = t.row_sum(v[0])?;
            reduce(t, y)
        }),
        ("transpose", vec![vec![2, 3], vec![2, 3]], false, |t, v| {
            let y = t.transpose(v[0])?;
            let z = t.matmul(v[1], y)?;
            reduce(t, z)
        }),
        ("reshape", vec![vec![2, 6], vec![3, 4]], false, |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            let z = t.mul(y, v[1])?;
            reduce(t, z)
        }),
        ("gather", vec![vec![2, 4]], false, |t, v| {
            let idx = Arc::new(vec![7, 0, 3, 3, 5, 1]);
            let y = t.gather(v[0], idx, &[3, 2])?;
            reduce(t, y)
        }),
        ("slice_cols", vec![vec![3, 5]], false, |t, v| {
            let y = t.slice_cols(v[0], 1, 3)?;
            reduce(t, y)
        }),
        ("slice_rows", vec![vec![5, 2]], false, |t, v| {
            let y = t.slice_rows(v[0], 2, 2)?;
            reduce(t, y)
        }),
        (
            "concat_cols",
            vec![vec![2, 3], vec![2, 1]],
            false,
            |t, v| {
                let y = t.concat_cols(&[v[0], v[1], v[0]])?;
                reduce(t, y)
            },
        ),
        (
            "concat_rows",
            vec![vec![2, 3], vec![1, 3]],
            false,
            |t, v| {
                let y = t.concat_rows(&[v[1], v[0]])?;
                reduce(t, y)
            },
        ),
    ]
}

#[test]
fn every_primitive_matches_finite_differences() {
    let cases = primitive_cases();
    let mut instances = 0;
    for (round, seed) in [11u64, 12, 13].into_iter().enumerate() {
        let mut rng = RngState::new(seed);
        for (name, shapes, pos, f) in &cases {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    if *pos {
                        positive(&mut rng, s)
                    } else {
                        gauss(&mut rng, s)
                    }
                })
                .collect();
            let report = check_gradient(&inputs, f, FD_STEP, None).unwrap();
            assert!(
                report.passes(1e-4),
                "{name} (round {round}): worst rel err {:.3e} at {:?}",
                report.worst_rel_err,
                report.worst_coord
            );
            instances += 1;
        }
    }
    assert!(instances >= 50);
}

/// A random two-layer composition with exactly 200 parameters.
fn composite(t: &mut Tape, v: &[Var]) -> crate::Result<Var> {
    // v[0]: x 4×8, v[1]: W1 8×10, v[2]: b1 1×10, v[3]: W2 10×10, v[4]: g 1×10
    let h = t.matmul(v[0], v[1])?;
    let h = t.add_row(h, v[2])?;
    let h = t.tanh(h)?;
    let o = t.matmul(h, v[3])?;
    let o = t.layer_norm_rows(o, 1e-5)?;
    let o = t.mul_row(o, v[4])?;
    let s = t.softmax_rows(o)?;
    let sq = t.square(o)?;
    let w = t.mul(s, sq)?;
    t.sum(w)
}

#[test]
fn random_200_parameter_composition() {
    for seed in 0..5u64 {
        let mut rng = RngState::new(100 + seed);
        let inputs = vec![
            gauss(&mut rng, &[4, 8]),
            gauss(&mut rng, &[8, 10]).scale(0.4),
            gauss(&mut rng, &[1, 10]),
            gauss(&mut rng, &[10, 10]).scale(0.4),
            gauss(&mut rng, &[1, 10]),
        ];
        let n_params: usize = inputs[1..].iter().map(|t| t.len()).sum();
        assert_eq!(n_params, 200);
        let report = check_gradient(&inputs, composite, FD_STEP, None).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

#[test]
fn backward_is_linear_in_the_seed() {
    let mut rng = RngState::new(5);
    let x = gauss(&mut rng, &[3, 4]);
    let w = gauss(&mut rng, &[4, 5]);
    let rec = record(&[x, w], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.tanh(y)?;
        t.softmax_rows(y)
    })
    .unwrap();
    let u = gauss(&mut rng, &[3, 5]);
    let v = gauss(&mut rng, &[3, 5]);
    let (alpha, beta) = (0.7, -1.3);
    let combo = u.scale(alpha).add(&v.scale(beta)).unwrap();
    let gu = rec.backward(&u).unwrap();
    let gv = rec.backward(&v).unwrap();
    let gc = rec.backward(&combo).unwrap();
    for &input in &rec.inputs {
        let expected = gu
            .get(input)
            .unwrap()
            .scale(alpha)
            .add(&gv.get(input).unwrap().scale(beta))
            .unwrap();
        assert!(gc.get(input).unwrap().max_abs_diff(&expected) < 1e-12);
    }
}

#[test]
fn jvp_of_linear_and_identity_maps() {
    let mut rng = RngState::new(6);
    let a = gauss(&mut rng, &[5, 3]);
    let x = gauss(&mut rng, &[3, 1]);
    let dir = gauss(&mut rng, &[3, 1]);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let xv = tape.var(x);
    let y = tape.matmul(av, xv).unwrap();
    let jv = jacobian_vector_product(&tape, &[(xv, dir.clone())], y).unwrap();
    assert!(jv.max_abs_diff(&a.matmul(&dir).unwrap()) < 1e-14);

    let id = jacobian_vector_product(&tape, &[(xv, dir.clone())], xv).unwrap();
    assert_eq!(id, dir);
}

/// Dense Jacobian assembled row by row from reverse mode.
fn dense_jacobian(rec: &Recorded) -> Tensor {
    let out_len = rec.value().len();
    let in_len = rec.tape.value(rec.inputs[0]).len();
    let mut jac = Tensor::zeros(&[out_len, in_len]);
    for r in 0..out_len {
        let mut seed = Tensor::zeros(rec.value().shape());
        seed.data_mut()[r] = 1.0;
        let g = rec.backward(&seed).unwrap();
        let g = g.get_or_zero(&rec.tape, rec.inputs[0]);
        for c in 0..in_len {
            jac.set(r, c, g.data()[c]);
        }
    }
    jac
}

#[test]
fn jvp_matches_dense_jacobian_on_small_net() {
    let mut rng = RngState::new(7);
    let x = gauss(&mut rng, &[3, 4]);
    let w1 = gauss(&mut rng, &[4, 6]);
    let w2 = gauss(&mut rng, &[6, 4]);
    let gain = gauss(&mut rng, &[1, 4]);
    let rec = record(&[x, w1, w2, gain], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.sigmoid(h)?;
        let o = t.matmul(h, v[2])?;
        let o = t.layer_norm_rows(o, 1e-5)?;
        let o = t.mul_row(o, v[3])?;
        let a = t.softmax_rows(o)?;
        t.add(a, v[0])
    })
    .unwrap();
    let jac = dense_jacobian(&rec);
    for _ in 0..5 {
        let dir = gauss(&mut rng, &[3, 4]);
        let jv = rec.jvp(0, &dir).unwrap();
        let flat_dir = dir.reshape(&[12, 1]).unwrap();
        let expected = jac.matmul(&flat_dir).unwrap().reshape(&[3, 4]).unwrap();
        assert!(jv.max_abs_diff(&expected) < 1e-10);
    }
}

#[test]
fn replay_reproduces_values_bitwise() {
    let mut rng = RngState::new(8);
    let inputs = vec![
        gauss(&mut rng, &[4, 6]),
        gauss(&mut rng, &[6, 12]),
        gauss(&mut rng, &[1, 12]),
        gauss(&mut rng, &[12, 8]),
        gauss(&mut rng, &[1, 8]),
    ];
    let rec = record(&inputs, composite).unwrap();
    let same = rec.tape.replay(&[]).unwrap();
    for i in 0..rec.tape.len() {
        let v = Var(i);
        assert_eq!(same.value(v).data(), rec.tape.value(v).data());
    }
    // new leaf value: matches a fresh recording
    let x2 = gauss(&mut rng, &[4, 6]);
    let replayed = rec.tape.replay(&[(rec.inputs[0], x2.clone())]).unwrap();
    let mut fresh_inputs = inputs.clone();
    fresh_inputs[0] = x2;
    let fresh = record(&fresh_inputs, composite).unwrap();
    assert_eq!(replayed.value(rec.output).data(), fresh.value().data());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::filled(&[2, 2], 3.0));
    let x = tape.var(Tensor::filled(&[2, 2], 1.0));
    let y = tape.mul(c, x).unwrap();
    let s = tape.sum(y).unwrap();
    assert!(!tape.needs_grad(c));
    let g = backward(&tape, s, &Tensor::scalar(1.0)).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0; 4]);
}

#[test]
fn relative_error_is_invariant_to_scaling_the_function() {
    let cases = [
        (5e-7, 5.003e-7, 14.0),
        (0.0, 2e-10, 41.0),
        (1.2, 1.2001, 0.3),
    ];
    for (a, b, f) in cases {
        let base = relative_error(a, b, f);
        for c in [1e-3, 40.0, 1e3] {
            if f.abs() >= 1.0 && (c * f).abs() >= 1.0 {
                assert!(
                    (relative_error(c * a, c * b, c * f) - base).abs() <= 1e-12 * base.max(1.0)
                );
            }
        }
    }
    // Small-valued functions keep the absolute floor.
    assert_eq!(relative_error(0.0, 1e-8, 0.5), 1e-2);
}
