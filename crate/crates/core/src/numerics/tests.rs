use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type T = Tensor<f64>;

fn t(rows: &[&[f64]]) -> T {
    T::from_f64_rows(rows).unwrap()
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> T {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    T::new(vec![rows, cols], data).unwrap()
}

/// Random entries kept at least `gap` away from zero, so kinks sit outside
/// the finite-difference stencil.
fn random_off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> T {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    T::new(vec![rows, cols], data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_hand_value() {
    let tape = Tape::new();
    let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let id = tape.constant(T::identity(2));
    assert_eq!(a.matmul(id).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

    let row = tape.constant(t(&[&[1.0, 2.0]]));
    let col = tape.constant(t(&[&[3.0], &[4.0]]));
    let p = row.matmul(col).unwrap();
    assert_eq!(p.shape(), vec![1, 1]);
    assert_eq!(p.item(), 11.0);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(T::zeros(&[2, 3]));
    let b = tape.constant(T::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert_eq!(
        err,
        NumericsError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn matmul_sum_gradient_is_replicated_row_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let tape = Tape::new();
    let av = tape.var(a.clone());
    let bv = tape.constant(b.clone());
    let loss = av.matmul(bv).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    let row_sums: Vec<f64> = (0..4).map(|p| b.row(p).iter().sum()).collect();
    let expected: Vec<f64> = (0..3).flat_map(|_| row_sums.clone()).collect();
    assert!(close(g.wrt(av).unwrap(), &expected, 1e-12));

    let err = finite_diff_check(
        |tape, x| x.matmul(tape.constant(b.clone())).map(|y| y.sum()),
        &a,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(t(&[&[0.0, 0.0], &[1000.0, 1000.0], &[2f64.ln(), 0.0]]));
    let y = x.softmax_rows().to_tensor();
    assert!(close(y.row(0), &[0.5, 0.5], 1e-15));
    assert!(close(y.row(1), &[0.5, 0.5], 1e-15));
    assert!(close(y.row(2), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let uniform = tape.constant(T::zeros(&[3, 4]));
    let l = uniform.cross_entropy(&[0, 1, 3]).unwrap().item();
    assert!((l - 4f64.ln()).abs() < 1e-12);
    assert!((l - 1.38629).abs() < 1e-5);

    let peaked = tape.constant(t(&[&[0.0, 30.0, 0.0]]));
    assert!(peaked.cross_entropy(&[1]).unwrap().item() < 1e-9);

    let x = tape.constant(t(&[&[1.0, 2.0]]));
    let l = x.cross_entropy(&[1]).unwrap().item();
    let expected = -(2f64.exp() / (1f64.exp() + 2f64.exp())).ln();
    assert!((l - expected).abs() < 1e-14);
    assert!((l - 0.31326).abs() < 1e-5);

    let err = x.cross_entropy(&[2]).unwrap_err();
    assert!(matches!(err, NumericsError::Index { index: 2, extent: 2, .. }));
}

#[test]
fn layernorm_examples() {
    let tape = Tape::new();
    let gain = tape.constant(T::full(&[2], 1.0));
    let bias = tape.constant(T::zeros(&[2]));
    let x = tape.constant(t(&[&[3.0, 3.0], &[1.0, -1.0]]));
    let eps = LAYERNORM_EPS;
    let y = x.layernorm(gain, bias, eps).unwrap().to_tensor();
    assert_eq!(y.row(0), &[0.0, 0.0]);
    let s = 1.0 / (1.0 + eps).sqrt();
    assert!(close(y.row(1), &[s, -s], 1e-15));
    assert!(close(y.row(1), &[1.0, -1.0], 1e-5));
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 4, 6);
    let gain = random(&mut rng, 1, 6);
    let bias = random(&mut rng, 1, 6);
    let w = random(&mut rng, 4, 6);
    let f = scalar_fn(|tape, v| {
        v.layernorm(tape.constant(gain.clone()), tape.constant(bias.clone()), LAYERNORM_EPS)?
            .mul(tape.constant(w.clone()))
            .map(|y| y.sum())
    });
    assert!(finite_diff_check(f, &x, 1e-4).unwrap() < 1e-4);
    let g = scalar_fn(|tape, v| {
        let x = tape.constant(x.clone());
        x.layernorm(v, tape.constant(bias.clone()), LAYERNORM_EPS)?
            .mul(tape.constant(w.clone()))
            .map(|y| y.sum())
    });
    assert!(finite_diff_check(g, &gain, 1e-4).unwrap() < 1e-4);
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let x = tape.constant(t(&[&[-1.0, 0.0, 2.0]]));
    assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(tape.constant(T::scalar(0.0)).sigmoid().item(), 0.5);
    let m = tape.constant(t(&[&[1.0, 2.0, 3.0]])).mean();
    assert_eq!(m.item(), 2.0);
    let c = tape
        .concat_rows(&[x, tape.constant(t(&[&[4.0, 5.0, 6.0]]))])
        .unwrap();
    assert_eq!(c.shape(), vec![2, 3]);
    let bad = tape.constant(T::zeros(&[1, 2]));
    assert!(tape.concat_rows(&[x, bad]).is_err());
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    let tape = Tape::new();
    let x = tape.constant(t(&[&[-800.0, 800.0]]));
    let y = x.sigmoid().to_tensor();
    assert!(y.all_finite());
    assert_eq!(y.data(), &[0.0, 1.0]);
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.var(T::new(vec![5], vec![0.3, -1.0, 2.0, 7.0, 0.0]).unwrap());
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0; 5]);

    let tape = Tape::new();
    let x = tape.var(T::new(vec![2], vec![1.0, 2.0]).unwrap());
    let loss = x.mul(x).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0]);

    assert!(matches!(
        tape.backward(x),
        Err(NumericsError::Contract { op: "backward", .. })
    ));
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, 3, 3);
    let w1 = random(&mut rng, 3, 3);
    let w2 = random(&mut rng, 3, 3);
    let grad_of = |use_first: bool, use_second: bool| {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let mut terms = Vec::new();
        if use_first {
            terms.push(v.matmul(tape.constant(w1.clone())).unwrap().sum());
        }
        if use_second {
            terms.push(v.mul(tape.constant(w2.clone())).unwrap().sigmoid().sum());
        }
        let loss = terms.iter().skip(1).fold(terms[0], |acc, t| acc.add(*t).unwrap());
        tape.backward(loss).unwrap().wrt(v).unwrap().to_vec()
    };
    let both = grad_of(true, true);
    let a = grad_of(true, false);
    let b = grad_of(false, true);
    let summed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    assert!(close(&both, &summed, 1e-14));
}

#[test]
fn finite_diff_check_examples() {
    let x = T::new(vec![1], vec![3.0]).unwrap();
    let err = finite_diff_check(|_, v| v.mul(v).map(|y| y.sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&mut rng, 4, 5);
    let err = finite_diff_check(|_, v| v.cross_entropy(&[0, 4, 2, 2]), &logits, 1e-4).unwrap();
    assert!(err < 1e-4, "{err}");
    assert!(finite_diff_check(|_, v| Ok(v.sum()), &x, 0.0).is_err());
}

fn attention_case(
    rng: &mut ChaCha8Rng,
    lq: usize,
    lk: usize,
    heads: usize,
    masked: bool,
    dropout: bool,
) -> f64 {
    let dim = 4 * heads;
    let q = random(rng, lq, dim);
    let k = random(rng, lk, dim);
    let v = random(rng, lk, dim);
    let w = random(rng, lq, dim);
    let mask = masked.then(|| {
        let allowed = (0..lq * lk).map(|ix| ix % lk != 0 || ix / lk == 0).collect();
        AttentionMask::new(lq, lk, allowed).unwrap()
    });
    let keep: Option<Vec<f64>> = dropout.then(|| {
        (0..heads * lq * lk)
            .map(|_| if rng.random_bool(0.8) { 1.25 } else { 0.0 })
            .collect()
    });
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let f = scalar_fn(|tape, x| {
            let [mut qq, mut kk, mut vv] =
                [&q, &k, &v].map(|m| tape.constant(m.clone()));
            match which {
                0 => qq = x,
                1 => kk = x,
                _ => vv = x,
            }
            tape.attention(qq, kk, vv, heads, mask.as_ref(), keep.clone())?
                .mul(tape.constant(w.clone()))
                .map(|y| y.sum())
        });
        let x = [&q, &k, &v][which];
        worst = worst.max(finite_diff_check(f, x, 1e-4).unwrap());
    }
    worst
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (masked, dropout) in [(false, false), (true, false), (false, true), (true, true)] {
        let err = attention_case(&mut rng, 3, 5, 2, masked, dropout);
        assert!(err < 1e-4, "masked={masked} dropout={dropout}: {err}");
    }
}

#[test]
fn attention_masking_and_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let q = tape.constant(random(&mut rng, 5, 16));
    let k = tape.constant(random(&mut rng, 4, 16));
    let mask = AttentionMask::new(5, 4, (0..20).map(|ix| ix % 4 != 0).collect()).unwrap();
    let out = tape.attention(q, k, k, 4, Some(&mask), None).unwrap();
    assert_eq!(out.shape(), vec![5, 16]);
    let w = out.attention_weights().unwrap();
    assert_eq!(w.shape(), &[4, 5, 4]);
    for row in w.data().chunks(4) {
        assert_eq!(row[0], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let none = AttentionMask::new(5, 4, vec![false; 20]).unwrap();
    assert!(matches!(
        tape.attention(q, k, k, 4, Some(&none), None),
        Err(NumericsError::Contract { .. })
    ));
    assert!(tape.attention(q, k, k, 3, None, None).is_err());
}

/// A composite touching every differentiable op in the suite.
fn composite<'t>(tape: &'t Tape<f64>, x: Var<'t, f64>, aux: &[T; 3]) -> Result<Var<'t, f64>, NumericsError> {
    let [w, gain, bias] = aux.clone().map(|m| tape.constant(m));
    let h = x.matmul(w)?; // 4×4
    let ln = h.layernorm(gain, bias, LAYERNORM_EPS)?;
    let a = ln.relu().add(h.sigmoid())?;
    let b = a.sub(h.abs().scale(0.5))?.add_scalar(0.1);
    let att = tape.attention(b, h, a, 2, None, None)?;
    let c = att.minimum(b)?.maximum(a.scale(-1.0))?;
    let d = c.div(h.mul(h)?.add_scalar(1.0))?;
    let e = d.mul_const(vec![0.5; 16])?.clamp(-0.9, 0.9).exp();
    let p = e.softmax_rows();
    let col = p.slice_cols(1, 1)?.repeat_cols(4)?;
    let rows = tape.concat_rows(&[p.slice_rows(0, 2)?, col.gather_rows(&[3, 0])?])?;
    let tr = rows.transpose()?.add_row(p.mean_over_rows())?;
    let ent = tr.mean_over_rows().ln_clamped(PROB_EPS).sum();
    let ls = d.log_softmax_rows().mean();
    let ce = d.cross_entropy(&[0, 1, 2, 3])?;
    ent.add(ls)?.add(ce)?.add(tr.mean())
}

#[test]
fn composite_gradient_over_many_seeds() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_off_zero(&mut rng, 4, 3, 0.05);
        let aux = [random(&mut rng, 3, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4)];
        let err = finite_diff_check(|tape, v| composite(tape, v, &aux), &x, 1e-4).unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 4, 3);
    let aux = [random(&mut rng, 3, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4)];
    let run = || {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let out = composite(&tape, v, &aux).unwrap();
        let g = tape.backward(out).unwrap();
        (out.item().to_bits(), g.wrt(v).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let tape = Tape::new();
            let x = tape.constant(T::new(vec![3, 4], data).unwrap());
            let y = x.softmax_rows().to_tensor();
            for r in 0..3 {
                let row = y.row(r);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn leaf_ops_pass_gradient_check(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_off_zero(&mut rng, 3, 4, 0.05);
            let w = random(&mut rng, 3, 4);
            type Check<'a> = dyn for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> + 'a;
            let checks: [&Check<'_>; 6] = [
                &scalar_fn(|t, v| v.sigmoid().mul(t.constant(w.clone())).map(|y| y.sum())),
                &scalar_fn(|t, v| v.softmax_rows().mul(t.constant(w.clone())).map(|y| y.sum())),
                &scalar_fn(|t, v| v.log_softmax_rows().mul(t.constant(w.clone())).map(|y| y.sum())),
                &scalar_fn(|_, v| v.cross_entropy(&[3, 0, 1])),
                &scalar_fn(|t, v| v.relu().add(v.abs())?.mul(t.constant(w.clone())).map(|y| y.sum())),
                &scalar_fn(|t, v| v.transpose()?.matmul(t.constant(w.clone())).map(|y| y.sum())),
            ];
            for f in checks {
                let err = finite_diff_check(|t, v| f(t, v), &x, 1e-4).unwrap();
                prop_assert!(err < 1e-4, "{}", err);
            }
        }
    }
}
