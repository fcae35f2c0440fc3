use super::*;
use crate::rng::{fill_normal, stream_rng, Stream};
use proptest::prelude::*;

fn random_params(arch: &FieldArch, seed: u64, scale: f64) -> FieldParams<f64> {
    let mut rng = stream_rng(seed, Stream::Eval, 99);
    let mut v = vec![0.0; arch.parameter_count()];
    fill_normal(&mut rng, &mut v);
    FieldParams::from_values(arch.clone(), v.into_iter().map(|x| x * scale).collect(), 0).unwrap()
}

fn random_point(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::Eval, 7);
    let mut v = vec![0.0; d];
    fill_normal(&mut rng, &mut v);
    v
}

fn tanh_arch(d: usize) -> FieldArch {
    FieldArch::new(d, vec![16, 16], Activation::Tanh).unwrap()
}

/// max |a - b| / max |b|
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn init_is_deterministic() {
    let arch = tanh_arch(3);
    let a: FieldParams<f64> = init_params(&arch, 42).unwrap();
    let b: FieldParams<f64> = init_params(&arch, 42).unwrap();
    assert_eq!(a.values(), b.values());
    let c: FieldParams<f64> = init_params(&arch, 43).unwrap();
    assert_ne!(a.values(), c.values());
}

#[test]
fn parameter_count_matches_hand_count() {
    let arch = FieldArch::new(2, vec![64, 64, 64, 64], Activation::Elu).unwrap();
    // [3 -> 64] + 3 x [64 -> 64] + [64 -> 2]
    let hand = (3 * 64 + 64) + 3 * (64 * 64 + 64) + (64 * 2 + 2);
    assert_eq!(hand, 12866);
    assert_eq!(arch.parameter_count(), hand);
}

#[test]
fn fresh_field_is_near_zero() {
    let arch = FieldArch::new(2, vec![64, 64, 64, 64], Activation::Tanh).unwrap();
    let p: FieldParams<f64> = init_params(&arch, 1).unwrap();
    let mut rng = stream_rng(5, Stream::Eval, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..2).map(|_| crate::rng::normal::<f64, _>(&mut rng) * 3.0).collect();
        let t: f64 = rand::Rng::gen(&mut rng);
        let v = eval_field(&p, &x, t).unwrap();
        worst = v.iter().fold(worst, |m, a| m.max(a.abs()));
    }
    assert!(worst <= 0.1, "max |v| = {worst}");
}

#[test]
fn invalid_architectures_are_rejected() {
    assert!(FieldArch::new(0, vec![4], Activation::Tanh).is_err());
    assert!(FieldArch::new(2, vec![], Activation::Tanh).is_err());
    assert!(FieldArch::new(2, vec![4, 0], Activation::Tanh).is_err());
    let a = FieldArch::new(5, vec![4], Activation::Tanh).unwrap();
    assert!(a.with_symmetry(Symmetry::MeanFree { space_dim: 2 }).is_err());
}

#[test]
fn zero_weights_give_zero_field() {
    let p = FieldParams::<f64>::zeros(tanh_arch(3)).unwrap();
    assert_eq!(eval_field(&p, &[0.3, -1.0, 2.0], 0.4).unwrap(), vec![0.0; 3]);
    assert_eq!(jacobian(&p, &[0.3, -1.0, 2.0], 0.4).unwrap(), vec![0.0; 9]);
    assert_eq!(grad_x_divergence(&p, &[0.3, -1.0, 2.0], 0.4, &DivergenceMethod::Exact).unwrap(), vec![0.0; 3]);
}

#[test]
fn affine_field_is_a_matrix_multiply() {
    let a = [0.5, -1.25, 2.0, 0.75];
    let p = affine_field::<f64>(&a, &[0.0, 0.0], 50.0).unwrap();
    let x = [0.3, -0.7];
    let v = eval_field(&p, &x, 0.2).unwrap();
    let expect = [a[0] * x[0] + a[1] * x[1], a[2] * x[0] + a[3] * x[1]];
    assert!(rel_err(&v, &expect) < 1e-12);
    assert_eq!(jacobian(&p, &x, 0.2).unwrap(), a.to_vec());
    let div = divergence(&p, &x, 0.2, &DivergenceMethod::Exact).unwrap();
    assert_eq!(div, 0.5 + 0.75);
    assert_eq!(grad_x_divergence(&p, &x, 0.2, &DivergenceMethod::Exact).unwrap(), vec![0.0, 0.0]);
    // e_1 cotangent pulls back to the first row of A
    let cot = Cotangents { d_velocity: vec![1.0, 0.0], d_divergence: 0.0 };
    let r = vjp(&p, &x, 0.2, &cot, &DivergenceMethod::Exact).unwrap();
    assert_eq!(r.d_x, vec![a[0], a[1]]);
}

#[test]
fn time_input_matters() {
    let arch = tanh_arch(2);
    let p = random_params(&arch, 3, 0.7);
    let x = [0.1, 0.2];
    assert_ne!(eval_field(&p, &x, 0.0).unwrap(), eval_field(&p, &x, 1.0).unwrap());
}

#[test]
fn non_finite_inputs_are_domain_errors() {
    let p = random_params(&tanh_arch(2), 3, 0.7);
    assert!(matches!(eval_field(&p, &[f64::NAN, 0.0], 0.5), Err(FlowError::Domain(_))));
    assert!(matches!(eval_field(&p, &[0.0, 0.0], 1.5), Err(FlowError::Domain(_))));
    assert!(matches!(eval_field(&p, &[0.0], 0.5), Err(FlowError::Shape(_))));
}

#[test]
fn probes_must_be_signs() {
    assert!(ProbeVector::new(vec![1.0, 0.0], 0).is_err());
    assert!(ProbeVector::new(vec![1.0, -1.0], 0).is_ok());
}

#[test]
fn jacobian_matches_central_differences() {
    for (seed, act) in [(1, Activation::Tanh), (2, Activation::Tanh), (3, Activation::Elu)] {
        let arch = FieldArch::new(4, vec![16, 16], act).unwrap();
        let p = random_params(&arch, seed, 0.6);
        let x = random_point(4, seed);
        let jac = jacobian(&p, &x, 0.3).unwrap();
        let h = 1e-5;
        let mut fd = vec![0.0; 16];
        for k in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let vp = eval_field(&p, &xp, 0.3).unwrap();
            let vm = eval_field(&p, &xm, 0.3).unwrap();
            for i in 0..4 {
                fd[i * 4 + k] = (vp[i] - vm[i]) / (2.0 * h);
            }
        }
        assert!(rel_err(&jac, &fd) < 1e-5, "seed {seed}: {}", rel_err(&jac, &fd));
    }
}

#[test]
fn hand_derived_single_unit_divergence_gradient() {
    // v(x) = a tanh(w x + b) in one dimension (time weight zero):
    // div = a w (1 - s^2), d div/dx = -2 a w^2 s (1 - s^2)
    let (w, b, a, c): (f64, f64, f64, f64) = (1.3, -0.4, 0.8, 0.1);
    let arch = FieldArch::new(1, vec![1], Activation::Tanh).unwrap();
    let p = FieldParams::from_values(arch, vec![w, 0.0, b, a, c], 0).unwrap();
    let x: f64 = 0.37;
    let s = (w * x + b).tanh();
    let div = divergence(&p, &[x], 0.5, &DivergenceMethod::Exact).unwrap();
    assert!((div - a * w * (1.0 - s * s)).abs() < 1e-14);
    let g = grad_x_divergence(&p, &[x], 0.5, &DivergenceMethod::Exact).unwrap();
    assert!((g[0] + 2.0 * a * w * w * s * (1.0 - s * s)).abs() < 1e-14);
}

#[test]
fn grad_divergence_matches_central_differences() {
    for seed in 0..3u64 {
        let arch = tanh_arch(3);
        let p = random_params(&arch, seed, 0.6);
        let x = random_point(3, seed + 10);
        let probe = ProbeVector::new(vec![1.0, -1.0, -1.0], 0).unwrap();
        for method in [DivergenceMethod::Exact, DivergenceMethod::Hutchinson(probe)] {
            let g = grad_x_divergence(&p, &x, 0.6, &method).unwrap();
            let fd = fd_grad(|y| divergence(&p, y, 0.6, &method).unwrap(), &x, 1e-5);
            assert!(rel_err(&g, &fd) < 1e-4, "{}", rel_err(&g, &fd));
        }
    }
}

#[test]
fn vjp_matches_directional_differences() {
    let arch = tanh_arch(3);
    let p = random_params(&arch, 11, 0.5);
    let x = random_point(3, 12);
    let t = 0.45;
    let cot = Cotangents { d_velocity: vec![0.3, -1.1, 0.7], d_divergence: 0.9 };
    let method = DivergenceMethod::Exact;
    let r = vjp(&p, &x, t, &cot, &method).unwrap();
    let loss = |q: &FieldParams<f64>, y: &[f64]| {
        let v = eval_field(q, y, t).unwrap();
        crate::scalar::dot(&cot.d_velocity, &v) + cot.d_divergence * divergence(q, y, t, &method).unwrap()
    };
    let fd_x = fd_grad(|y| loss(&p, y), &x, 1e-5);
    assert!(rel_err(&r.d_x, &fd_x) < 1e-4);

    let mut rng = stream_rng(13, Stream::Eval, 0);
    let mut dir = vec![0.0; p.len()];
    fill_normal(&mut rng, &mut dir);
    let h = 1e-5;
    let shift = |s: f64| {
        let vals = p.values().iter().zip(&dir).map(|(a, b)| a + s * b).collect();
        p.with_values(vals).unwrap()
    };
    let fd = (loss(&shift(h), &x) - loss(&shift(-h), &x)) / (2.0 * h);
    let analytic = crate::scalar::dot(&r.d_theta, &dir);
    assert!(((analytic - fd) / fd).abs() < 1e-4, "{analytic} vs {fd}");
}

#[test]
fn zero_cotangent_gives_zero_pullback() {
    let p = random_params(&tanh_arch(2), 1, 0.5);
    let cot = Cotangents { d_velocity: vec![0.0, 0.0], d_divergence: 0.0 };
    let r = vjp(&p, &[0.2, 0.1], 0.5, &cot, &DivergenceMethod::Exact).unwrap();
    assert!(r.d_x.iter().chain(&r.d_theta).all(|&v| v == 0.0));
}

#[test]
fn hutchinson_average_approaches_trace() {
    // One-hidden-layer tanh field with tied weights W_out = W_in^T / width:
    // J = W^T diag(s') W / width is symmetric and trace dominated, so 10^3
    // probes resolve the trace to well under 1%.
    let (d, width) = (4, 256);
    let arch = FieldArch::new(d, vec![width], Activation::Tanh).unwrap();
    let mut rng = stream_rng(21, Stream::Eval, 0);
    let mut w_in = vec![0.0; width * (d + 1)];
    fill_normal(&mut rng, &mut w_in);
    let mut b_in = vec![0.0; width];
    fill_normal(&mut rng, &mut b_in);
    let mut values = w_in.clone();
    values.extend(&b_in);
    for i in 0..d {
        for k in 0..width {
            values.push(w_in[k * (d + 1) + i] / width as f64);
        }
    }
    values.extend(vec![0.0; d]);
    let p = FieldParams::from_values(arch, values, 0).unwrap();
    let x = random_point(d, 22);
    let exact = divergence(&p, &x, 0.5, &DivergenceMethod::Exact).unwrap();
    let mut rng = stream_rng(23, Stream::Probe, 0);
    let n = 1000;
    let mean: f64 = (0..n)
        .map(|i| {
            let pr = ProbeVector::draw(d, &mut rng, i);
            divergence(&p, &x, 0.5, &DivergenceMethod::Hutchinson(pr)).unwrap()
        })
        .sum::<f64>()
        / n as f64;
    assert!(((mean - exact) / exact).abs() < 0.01, "mean {mean} exact {exact}");
}

#[test]
fn hutchinson_is_unbiased_at_three_sigma() {
    let arch = tanh_arch(4);
    let p = random_params(&arch, 31, 0.7);
    let x = random_point(4, 32);
    let exact = divergence(&p, &x, 0.2, &DivergenceMethod::Exact).unwrap();
    let mut rng = stream_rng(33, Stream::Probe, 0);
    let n = 10_000;
    let draws: Vec<f64> = (0..n)
        .map(|i| {
            let pr = ProbeVector::draw(4, &mut rng, i);
            divergence(&p, &x, 0.2, &DivergenceMethod::Hutchinson(pr)).unwrap()
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - exact).abs() < 3.0 * (var / n as f64).sqrt());
}

#[test]
fn mean_free_field_keeps_centre_of_mass() {
    let arch = FieldArch::new(6, vec![16], Activation::Tanh)
        .unwrap()
        .with_symmetry(Symmetry::MeanFree { space_dim: 2 })
        .unwrap();
    let p = random_params(&arch, 41, 0.8);
    let x = random_point(6, 42);
    let v = eval_field(&p, &x, 0.3).unwrap();
    assert!((v[0] + v[2] + v[4]).abs() < 1e-14 && (v[1] + v[3] + v[5]).abs() < 1e-14);
    // translating the input leaves the field unchanged
    let shifted: Vec<f64> = x.iter().enumerate().map(|(i, a)| a + if i % 2 == 0 { 0.7 } else { -0.2 }).collect();
    let v2 = eval_field(&p, &shifted, 0.3).unwrap();
    assert!(rel_err(&v2, &v) < 1e-12);
    let g = grad_x_divergence(&p, &x, 0.3, &DivergenceMethod::Exact).unwrap();
    let fd = fd_grad(|y| divergence(&p, y, 0.3, &DivergenceMethod::Exact).unwrap(), &x, 1e-5);
    assert!(rel_err(&g, &fd) < 1e-4);
}

#[test]
fn single_precision_field_agrees_with_double() {
    let p = random_params(&tanh_arch(3), 51, 0.5);
    let pf: FieldParams<f32> = p.cast();
    let x = random_point(3, 52);
    let xf: Vec<f32> = x.iter().map(|&a| a as f32).collect();
    let v = eval_field(&p, &x, 0.5).unwrap();
    let vf = eval_field(&pf, &xf, 0.5f32).unwrap();
    for (a, b) in v.iter().zip(vf) {
        assert!((a - b as f64).abs() < 1e-4);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let p = random_params(&tanh_arch(3), 61, 0.5).with_values(random_params(&tanh_arch(3), 62, 0.5).values().to_vec()).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&p, &mut buf).unwrap();
    let q: FieldParams<f64> = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(p, q);
    let mut buf2 = Vec::new();
    write_checkpoint(&q, &mut buf2).unwrap();
    assert_eq!(buf, buf2);
    buf[0] = b'X';
    assert!(read_checkpoint::<f64, _>(buf.as_slice()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exact_divergence_is_jacobian_trace(seed in 0u64..1000, t in 0.0f64..1.0) {
        let arch = tanh_arch(3);
        let p = random_params(&arch, seed, 0.8);
        let x = random_point(3, seed + 1);
        let jac = jacobian(&p, &x, t).unwrap();
        let div = divergence(&p, &x, t, &DivergenceMethod::Exact).unwrap();
        prop_assert!((div - (jac[0] + jac[4] + jac[8])).abs() < 1e-12);
    }

    #[test]
    fn derivatives_are_deterministic(seed in 0u64..1000) {
        let arch = tanh_arch(2);
        let p = random_params(&arch, seed, 0.8);
        let x = random_point(2, seed + 1);
        let probe = ProbeVector::new(vec![-1.0, 1.0], 3).unwrap();
        let m = DivergenceMethod::Hutchinson(probe);
        prop_assert_eq!(grad_x_divergence(&p, &x, 0.3, &m).unwrap(), grad_x_divergence(&p, &x, 0.3, &m).unwrap());
        prop_assert_eq!(eval_field(&p, &x, 0.3).unwrap(), eval_field(&p, &x, 0.3).unwrap());
    }
}
