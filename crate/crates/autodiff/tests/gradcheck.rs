//! Reverse and forward mode against central finite differences.

use autodiff::nn::{lift_dual, GruCell, Mlp, ParamStore};
use autodiff::{time_jvp, Array, Dual, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn rand_array(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array {
    Array::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of a scalar function of several arrays.
fn fd_grad(inputs: &[Array], f: &dyn Fn(&[Array]) -> f64) -> Vec<Array> {
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut g = Array::zeros(inputs[k].rows(), inputs[k].cols());
        for idx in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= STEP;
            g.data_mut()[idx] = (f(&plus) - f(&minus)) / (2.0 * STEP);
        }
        out.push(g);
    }
    out
}

fn flatten(a: &[Array]) -> Vec<f64> {
    a.iter().flat_map(|x| x.data().to_vec()).collect()
}

/// Reverse-mode gradient of `sum(weights * op(inputs))` vs finite differences.
fn check_primitive(
    name: &str,
    shapes: &[(usize, usize)],
    domain: (f64, f64),
    weight_shape: (usize, usize),
    op_var: &dyn Fn(&[Var]) -> Var,
    op_arr: &dyn Fn(&[Array]) -> Array,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inputs: Vec<Array> = shapes
            .iter()
            .map(|&(r, c)| rand_array(&mut rng, r, c, domain.0, domain.1))
            .collect();
        let w = rand_array(&mut rng, weight_shape.0, weight_shape.1, -1.0, 1.0);

        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = op_var(&vars).mul(&tape.constant(w.clone())).unwrap().sum();
        let analytic = tape.backward(&loss).unwrap().into_vec();

        let numeric = fd_grad(&inputs, &|xs| op_arr(xs).mul(&w).unwrap().sum());
        worst = worst.max(norm_rel_err(&flatten(&analytic), &flatten(&numeric)));
    }
    println!("{name}: worst rel err {worst:.2e}");
    assert!(worst <= 1e-4, "{name}: rel err {worst}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    let s = (3, 4);
    let unary: Vec<(&str, (f64, f64), fn(&Var) -> Var, fn(&Array) -> Array)> = vec![
        ("tanh", (-2.0, 2.0), |x| x.tanh(), |x| Tensor::tanh(x)),
        ("sigmoid", (-3.0, 3.0), |x| x.sigmoid(), |x| Tensor::sigmoid(x)),
        ("softplus", (-5.0, 5.0), |x| x.softplus(), |x| Tensor::softplus(x)),
        ("exp", (-2.0, 2.0), |x| x.exp(), |x| Tensor::exp(x)),
        ("log", (0.2, 3.0), |x| x.log(), |x| Tensor::log(x)),
        ("sqrt", (0.2, 3.0), |x| x.sqrt(), |x| Tensor::sqrt(x)),
        ("square", (-2.0, 2.0), |x| x.square(), |x| Tensor::square(x)),
        ("neg", (-2.0, 2.0), |x| x.neg(), |x| Tensor::neg(x)),
        ("scale", (-2.0, 2.0), |x| x.scale(-1.7), |x| Tensor::scale(x, -1.7)),
        ("add_scalar", (-2.0, 2.0), |x| x.add_scalar(0.3), |x| Tensor::add_scalar(x, 0.3)),
    ];
    for (name, dom, fv, fa) in unary {
        check_primitive(name, &[s], dom, s, &|v| fv(&v[0]), &|a| fa(&a[0]));
    }

    check_primitive("add", &[s, (1, 4)], (-2.0, 2.0), s, &|v| v[0].add(&v[1]).unwrap(), &|a| a[0].add(&a[1]).unwrap());
    check_primitive("sub", &[s, (3, 1)], (-2.0, 2.0), s, &|v| v[0].sub(&v[1]).unwrap(), &|a| a[0].sub(&a[1]).unwrap());
    check_primitive("mul", &[s, s], (-2.0, 2.0), s, &|v| v[0].mul(&v[1]).unwrap(), &|a| a[0].mul(&a[1]).unwrap());
    check_primitive("mul_scalar_bcast", &[s, (1, 1)], (-2.0, 2.0), s, &|v| v[0].mul(&v[1]).unwrap(), &|a| a[0].mul(&a[1]).unwrap());
    check_primitive("div", &[s, s], (0.5, 2.0), s, &|v| v[0].div(&v[1]).unwrap(), &|a| a[0].div(&a[1]).unwrap());
    check_primitive("div_row_bcast", &[s, (1, 4)], (0.5, 2.0), s, &|v| v[0].div(&v[1]).unwrap(), &|a| a[0].div(&a[1]).unwrap());
    check_primitive("matmul", &[(3, 4), (4, 2)], (-1.0, 1.0), (3, 2), &|v| v[0].matmul(&v[1]).unwrap(), &|a| a[0].matmul(&a[1]).unwrap());
    check_primitive("sum", &[s], (-2.0, 2.0), (1, 1), &|v| v[0].sum(), &|a| Tensor::sum(&a[0]));
    check_primitive("mean", &[s], (-2.0, 2.0), (1, 1), &|v| v[0].mean(), &|a| Tensor::mean(&a[0]));
    check_primitive("row_sum", &[s], (-2.0, 2.0), (3, 1), &|v| v[0].row_sum(), &|a| Tensor::row_sum(&a[0]));
    check_primitive(
        "concat_cols",
        &[(3, 2), (3, 3)],
        (-2.0, 2.0),
        (3, 5),
        &|v| Var::concat_cols(&[v[0].clone(), v[1].clone()]).unwrap(),
        &|a| Array::concat_cols(&[&a[0], &a[1]]).unwrap(),
    );
    check_primitive(
        "concat_rows",
        &[(2, 3), (1, 3)],
        (-2.0, 2.0),
        (3, 3),
        &|v| Var::concat_rows(&[v[0].clone(), v[1].clone()]).unwrap(),
        &|a| Array::concat_rows(&[&a[0], &a[1]]).unwrap(),
    );
    check_primitive("slice_cols", &[s], (-2.0, 2.0), (3, 2), &|v| v[0].slice_cols(1, 2).unwrap(), &|a| a[0].slice_cols(1, 2).unwrap());
    check_primitive("slice_rows", &[s], (-2.0, 2.0), (2, 4), &|v| v[0].slice_rows(1, 2).unwrap(), &|a| a[0].slice_rows(1, 2).unwrap());
}

#[test]
fn matmul_gradient_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_array(&mut rng, 3, 4, -1.0, 1.0);
    let b = rand_array(&mut rng, 4, 2, -1.0, 1.0);
    let w = rand_array(&mut rng, 3, 2, -1.0, 1.0);
    let tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let loss = va.matmul(&vb).unwrap().mul(&tape.constant(w.clone())).unwrap().sum();
    let g = loss.backward().unwrap().into_vec();
    let fd = fd_grad(&[a, b], &|x| x[0].matmul(&x[1]).unwrap().mul(&w).unwrap().sum());
    for (an, nu) in g.iter().zip(&fd) {
        let err = an.max_rel_diff(nu, 1e-3);
        assert!(err <= 1e-6, "matmul rel err {err}");
    }
}

fn build_mlp(seed: u64, sizes: &[usize]) -> (ParamStore, Mlp) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", sizes, &mut rng);
    (store, mlp)
}

#[test]
fn two_layer_mlp_loss_matches_finite_differences() {
    let (store, mlp) = build_mlp(11, &[3, 16, 16, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_array(&mut rng, 5, 3, -1.0, 1.0);
    let target = rand_array(&mut rng, 5, 2, -1.0, 1.0);
    let loss_arr = |p: &[Array]| mlp.forward(p, &x).unwrap().sub(&target).unwrap().square().mean();

    let tape = Tape::new();
    let bound = store.bind(&tape);
    let xv = tape.constant(x.clone());
    let loss = mlp.forward(&bound, &xv).unwrap().sub(&tape.constant(target.clone())).unwrap().square().mean();
    let analytic = loss.backward().unwrap().into_vec();
    let numeric = fd_grad(store.values(), &loss_arr);

    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(a.max_rel_diff(n, 1e-4));
    }
    assert!(worst <= 1e-4, "mlp max rel err {worst}");
}

#[test]
fn gru_recurrence_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 2, 6, &mut rng);
    let xs: Vec<Array> = (0..4).map(|_| rand_array(&mut rng, 1, 2, -1.0, 1.0)).collect();
    let run = |p: &[Array]| {
        let mut h = Array::zeros(1, 6);
        for x in xs.iter().rev() {
            h = gru.step(p, x, &h).unwrap();
        }
        Tensor::square(&h).sum()
    };
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let mut h = tape.constant(Array::zeros(1, 6));
    for x in xs.iter().rev() {
        h = gru.step(&bound, &tape.constant(x.clone()), &h).unwrap();
    }
    let analytic = h.square().sum().backward().unwrap().into_vec();
    let numeric = fd_grad(store.values(), &run);
    assert!(norm_rel_err(&flatten(&analytic), &flatten(&numeric)) <= 1e-6);
}

#[test]
fn mlp_time_tangent_matches_finite_differences() {
    let (store, mlp) = build_mlp(31, &[3, 32, 32, 2]);
    let ctx = Array::row(&[0.4, -0.9]);
    let eval = |t: f64| {
        let x = Array::concat_cols(&[&ctx, &Array::scalar(t)]).unwrap();
        mlp.forward(store.values(), &x).unwrap()
    };
    let params = lift_dual(store.values());
    for &t0 in &[0.0, 0.13, 0.5, 0.91] {
        let d = time_jvp(&Array::scalar(t0), |t| {
            let x = Dual::concat_cols(&[Dual::constant_of(ctx.clone()), t.clone()])?;
            mlp.forward(&params, &x)
        })
        .unwrap();
        assert_eq!(d.primal(), &eval(t0));
        let fd = eval(t0 + STEP).sub(&eval(t0 - STEP)).unwrap().scale(0.5 / STEP);
        let err = d.tangent().max_rel_diff(&fd, 1e-6);
        assert!(err <= 1e-5, "t={t0}: tangent rel err {err}");
    }
}

/// Composite of every forward-mode rule, compared with finite differences in t.
#[test]
fn composed_forward_mode_matches_finite_differences() {
    let f = |t: &Dual<Array>| -> autodiff::Result<Dual<Array>> {
        let a = t.square().add_scalar(1.0).sqrt().log();
        let b = t.scale(3.0).sigmoid().mul(&t.softplus())?;
        let c = t.exp().div(&t.tanh().add_scalar(2.0))?;
        let m = Dual::concat_cols(&[a, b.neg(), c])?;
        let w = m.constant(Array::from_fn(3, 2, |i, j| (i as f64 + 1.0) * if j == 0 { 1.0 } else { -0.5 }));
        Ok(m.matmul(&w)?.slice_cols(1, 1)?.mean())
    };
    let g = |t: f64| f(&Dual::constant_of(Array::scalar(t))).unwrap().primal().item();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let t0 = rng.random_range(-2.0..2.0);
        let d = time_jvp(&Array::scalar(t0), f).unwrap();
        let fd = (g(t0 + STEP) - g(t0 - STEP)) / (2.0 * STEP);
        let err = (d.tangent().item() - fd).abs() / d.tangent().item().abs().max(fd.abs()).max(1e-6);
        assert!(err <= 1e-4, "t={t0}: {err}");
    }
}

/// Gradients of a time derivative: the tangent of `Dual<Var>` is itself on the tape.
#[test]
fn reverse_over_forward_matches_finite_differences() {
    let (store, mlp) = build_mlp(41, &[2, 16, 16, 1]);
    let ctx = Array::scalar(0.3);
    let t0 = 0.37;
    let dfdt = |p: &[Array]| {
        let params = lift_dual(p);
        time_jvp(&Array::scalar(t0), |t| {
            let x = Dual::concat_cols(&[Dual::constant_of(ctx.clone()), t.clone()])?;
            mlp.forward(&params, &x)
        })
        .unwrap()
        .tangent()
        .item()
    };
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let params = lift_dual(&bound);
    let d = time_jvp(&tape.constant(Array::scalar(t0)), |t| {
        let x = Dual::concat_cols(&[Dual::constant_of(tape.constant(ctx.clone())), t.clone()])?;
        mlp.forward(&params, &x)
    })
    .unwrap();
    assert_eq!(d.tangent().item(), dfdt(store.values()));
    let analytic = d.tangent().backward().unwrap().into_vec();
    let numeric = fd_grad(store.values(), &dfdt);
    let err = norm_rel_err(&flatten(&analytic), &flatten(&numeric));
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn identical_tapes_give_bitwise_identical_gradients() {
    let (store, mlp) = build_mlp(51, &[4, 32, 32, 3]);
    let x = Array::from_fn(7, 4, |i, j| ((i * 3 + j) as f64).sin());
    let run = || {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let y = mlp.forward(&bound, &tape.constant(x.clone())).unwrap();
        y.softplus().sum().backward().unwrap().into_vec()
    };
    assert_eq!(run(), run());
}
