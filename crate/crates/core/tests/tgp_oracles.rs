mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use twinkern::data::Stream;
use twinkern::tgp::predict_many;
use twinkern::{
    hsic_objective, kernel_matrix, kernel_row, kl_objective, learn_transforms, predict, tgp_fit,
    BasisKind, BasisSpec, Criterion, Dataset, Error, KernelParams, LearnedTransforms,
    OptimizerOpts, TgpModel, TgpOptions, TransformSpec,
};

fn dataset(s: &mut Stream, m: usize, p: usize, q: usize) -> Dataset {
    let x = random_points(s, m, p, 1.0);
    let y = DMatrix::from_fn(m, q, |i, j| {
        (1.7 * x[(i, 0)] + j as f64).sin() + 0.05 * s.normal()
    });
    Dataset::new(x, y).unwrap()
}

fn identity_transforms(kx: KernelParams, ky: KernelParams) -> LearnedTransforms {
    let t = TransformSpec::first_order(BasisSpec::monomial()).unwrap();
    LearnedTransforms {
        input: t.clone(),
        output: t,
        objective_value: 0.0,
        kernel_x: kx,
        kernel_y: ky,
        c_matrix: None,
        warnings: Vec::new(),
    }
}

fn map_with(spec: Option<&TransformSpec>, t: f64) -> f64 {
    spec.map_or(t, |s| s.eval(t).unwrap())
}

/// Dense KL cost with explicit inverses.
fn kl_oracle(
    model: &TgpModel,
    x_star: &[f64],
    y: &[f64],
    kx: &KernelParams,
    ky: &KernelParams,
) -> f64 {
    let (k, g) = model.grams();
    let m = k.nrows();
    let reg = model.options().regularization;
    let jitter = model.jitter().unwrap();
    let add_k = (reg + jitter) * k.trace() / m as f64;
    let add_g = (reg + jitter) * g.trace() / m as f64;
    let phi = model.transforms().map(|t| &t.input);
    let psi = model.transforms().map(|t| &t.output);
    let kt = k + DMatrix::identity(m, m) * add_k;
    let gt = g + DMatrix::identity(m, m) * add_g;
    let kvec = kernel_row(model.train().inputs(), x_star, kx)
        .unwrap()
        .map(|t| map_with(phi, t));
    let gvec = kernel_row(model.train().outputs(), y, ky)
        .unwrap()
        .map(|t| map_with(psi, t));
    let kinv = kt.try_inverse().unwrap();
    let ginv = gt.try_inverse().unwrap();
    let u = &kinv * &kvec;
    let eta = map_with(phi, 1.0) + add_k - kvec.dot(&u);
    let g_self = map_with(psi, 1.0) + add_g;
    let arg = g_self - gvec.dot(&(&ginv * &gvec));
    g_self - 2.0 * gvec.dot(&u) - eta * arg.ln()
}

/// HSIC of explicitly augmented transformed kernels.
fn hsic_oracle(
    model: &TgpModel,
    x_star: &[f64],
    y: &[f64],
    kx: &KernelParams,
    ky: &KernelParams,
) -> f64 {
    let train = model.train();
    let m = train.len();
    let augment = |data: &DMatrix<f64>, extra: &[f64]| {
        let mut a = data.clone().insert_row(m, 0.0);
        for (d, v) in extra.iter().enumerate() {
            a[(m, d)] = *v;
        }
        a
    };
    let k = kernel_matrix(&augment(train.inputs(), x_star), kx).unwrap();
    let g = kernel_matrix(&augment(train.outputs(), y), ky).unwrap();
    let phi = model.transforms().map(|t| &t.input);
    let psi = model.transforms().map(|t| &t.output);
    dense_hsic(
        &k.values().map(|t| map_with(phi, t)),
        &g.values().map(|t| map_with(psi, t)),
    )
}

fn random_probe(s: &mut Stream, p: usize, q: usize) -> (Vec<f64>, Vec<f64>) {
    (
        (0..p).map(|_| uniform_in(s, -1.2, 1.2)).collect(),
        (0..q).map(|_| uniform_in(s, -1.5, 1.5)).collect(),
    )
}

#[test]
fn kl_objective_matches_dense_oracle() {
    let mut s = Stream::new(41);
    for trial in 0..10 {
        let data = dataset(&mut s, 15, 2, 2);
        let kx = KernelParams::rbf(0.9).unwrap();
        let ky = KernelParams::rbf(0.6).unwrap();
        let lt = learn_transforms(
            &data,
            &kx,
            &ky,
            &BasisSpec::monomial(),
            1 + trial % 5,
            1 + trial % 3,
        )
        .unwrap();
        let transforms = if trial % 2 == 0 { Some(&lt) } else { None };
        let model = tgp_fit(
            &data,
            &kx,
            &ky,
            transforms,
            Criterion::KlDiv,
            TgpOptions::default(),
        )
        .unwrap();
        for _ in 0..10 {
            let (x, y) = random_probe(&mut s, 2, 2);
            let (v, _) = kl_objective(&model, &x, &y).unwrap();
            let oracle = kl_oracle(&model, &x, &y, &kx, &ky);
            assert!(
                (v - oracle).abs() < 1e-8 * oracle.abs().max(1.0),
                "{v} vs {oracle}"
            );
        }
    }
}

#[test]
fn hsic_objective_matches_augmented_oracle() {
    let mut s = Stream::new(42);
    for trial in 0..10 {
        let data = dataset(&mut s, 12, 1, 2);
        let kx = KernelParams::rbf(1.1).unwrap();
        let ky = KernelParams::rbf(0.7).unwrap();
        let basis = if trial % 2 == 0 {
            BasisSpec::monomial()
        } else {
            BasisSpec::gegenbauer(0.51).unwrap()
        };
        let lt = learn_transforms(&data, &kx, &ky, &basis, 1 + trial % 4, 2).unwrap();
        let model = tgp_fit(
            &data,
            &kx,
            &ky,
            Some(&lt),
            Criterion::Hsic,
            TgpOptions::default(),
        )
        .unwrap();
        for _ in 0..10 {
            let (x, y) = random_probe(&mut s, 1, 2);
            let (v, _) = hsic_objective(&model, &x, &y).unwrap();
            let oracle = hsic_oracle(&model, &x, &y, &kx, &ky);
            assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
        }
    }
}

#[test]
fn two_point_hsic_matches_hand_expansion() {
    // Two training points plus the query: H = I - J/3.
    let data = Dataset::new(
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_column_slice(2, 1, &[0.0, 2.0]),
    )
    .unwrap();
    let kp = KernelParams::rbf(1.0).unwrap();
    let model = tgp_fit(
        &data,
        &kp,
        &kp,
        None,
        Criterion::Hsic,
        TgpOptions::default(),
    )
    .unwrap();
    let (x, y) = (0.5f64, 1.0f64);
    let k = DMatrix::from_fn(3, 3, |i, j| {
        let pts = [0.0, 1.0, x];
        (-(pts[i] - pts[j]).powi(2)).exp()
    });
    let g = DMatrix::from_fn(3, 3, |i, j| {
        let pts = [0.0, 2.0, y];
        (-(pts[i] - pts[j]).powi(2)).exp()
    });
    let mut hand = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let ki = k.row(i).sum() / 3.0;
            let kj = k.column(j).sum() / 3.0;
            let centered = k[(i, j)] - ki - kj + k.sum() / 9.0;
            hand += centered * g[(i, j)];
        }
    }
    hand /= 4.0;
    let (v, _) = hsic_objective(&model, &[x], &[y]).unwrap();
    assert!((v - hand).abs() < 1e-14);
}

fn check_gradients(criterion: Criterion, seed: u64) {
    let mut s = Stream::new(seed);
    let mut probes = 0;
    let mut gegenbauer_probes = 0;
    let mut trial = 0;
    while probes < 120 {
        trial += 1;
        let (p, q) = (1 + trial % 3, 1 + trial % 2);
        let data = dataset(&mut s, 20, p, q);
        let kx = KernelParams::rbf(uniform_in(&mut s, 0.3, 2.0)).unwrap();
        let ky = KernelParams::rbf(uniform_in(&mut s, 0.3, 2.0)).unwrap();
        let basis = if trial % 2 == 0 {
            BasisSpec::monomial()
        } else {
            BasisSpec::gegenbauer(uniform_in(&mut s, 0.5, 2.0)).unwrap()
        };
        let (d1, d2) = (1 + s.below(11), 1 + s.below(11));
        let lt = learn_transforms(&data, &kx, &ky, &basis, d1, d2).unwrap();
        let model = match tgp_fit(&data, &kx, &ky, Some(&lt), criterion, TgpOptions::default()) {
            Ok(m) => m,
            // Indefinite Gegenbauer Gram matrices may defeat the jittered factorization.
            Err(Error::IllConditionedKernel { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        for _ in 0..10 {
            let (x, y) = random_probe(&mut s, p, q);
            let eval = |y: &[f64]| match criterion {
                Criterion::KlDiv => kl_objective(&model, &x, y),
                Criterion::Hsic => hsic_objective(&model, &x, y),
            };
            let Ok((_, grad)) = eval(&y) else { continue };
            let fd = fd_gradient(|yy| eval(yy).unwrap().0, &y, 1e-5);
            let floor = match criterion {
                Criterion::KlDiv => 1e-6,
                Criterion::Hsic => 1e-9,
            };
            let err = rel_err(&grad, &fd, floor);
            assert!(
                err < 1e-4,
                "{criterion} basis {basis:?} ({d1},{d2}): {grad:?} vs {fd:?}"
            );
            probes += 1;
            if basis.kind == BasisKind::Gegenbauer {
                gegenbauer_probes += 1;
            }
        }
    }
    assert!(
        gegenbauer_probes >= 30,
        "only {gegenbauer_probes} Gegenbauer probes"
    );
}

#[test]
fn kl_gradient_matches_finite_differences() {
    check_gradients(Criterion::KlDiv, 43);
}

#[test]
fn hsic_gradient_matches_finite_differences() {
    check_gradients(Criterion::Hsic, 44);
}

#[test]
fn identity_transforms_reduce_to_plain_model() {
    let mut s = Stream::new(45);
    let data = dataset(&mut s, 25, 2, 2);
    let kx = KernelParams::rbf(0.8).unwrap();
    let ky = KernelParams::rbf(1.2).unwrap();
    let ident = identity_transforms(kx, ky);
    for criterion in [Criterion::KlDiv, Criterion::Hsic] {
        let plain = tgp_fit(&data, &kx, &ky, None, criterion, TgpOptions::default()).unwrap();
        let mapped = tgp_fit(
            &data,
            &kx,
            &ky,
            Some(&ident),
            criterion,
            TgpOptions::default(),
        )
        .unwrap();
        assert!((plain.grams().0 - mapped.grams().0).amax() <= 1e-12);
        assert!((plain.grams().1 - mapped.grams().1).amax() <= 1e-12);
        for _ in 0..100 {
            let (x, y) = random_probe(&mut s, 2, 2);
            let f = |m: &TgpModel| match criterion {
                Criterion::KlDiv => kl_objective(m, &x, &y).unwrap(),
                Criterion::Hsic => hsic_objective(m, &x, &y).unwrap(),
            };
            let (a, ga) = f(&plain);
            let (b, gb) = f(&mapped);
            assert!((a - b).abs() <= 1e-12);
            assert!(rel_err(&ga, &gb, 1.0) <= 1e-12);
        }
    }
}

#[test]
fn barrier_argument_stays_positive_for_psd_transforms() {
    let mut s = Stream::new(46);
    for trial in 0..10 {
        let data = dataset(&mut s, 20, 1, 1);
        let kp = KernelParams::rbf(1.0).unwrap();
        let lt = learn_transforms(
            &data,
            &kp,
            &kp,
            &BasisSpec::monomial(),
            1 + trial,
            1 + trial,
        )
        .unwrap();
        let opts = TgpOptions {
            regularization: 0.0,
        };
        let model = tgp_fit(&data, &kp, &kp, Some(&lt), Criterion::KlDiv, opts).unwrap();
        for _ in 0..20 {
            let (x, y) = random_probe(&mut s, 1, 1);
            assert!(!matches!(
                kl_objective(&model, &x, &y),
                Err(Error::BarrierViolation(_))
            ));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hsic_objective_is_invariant_to_training_order(seed in any::<u64>()) {
        let mut s = Stream::new(seed);
        let data = dataset(&mut s, 10, 2, 1);
        let perm = permutation(&mut s, 10);
        let shuffled = data.select(&perm).unwrap();
        let kp = KernelParams::rbf(1.0).unwrap();
        let lt = learn_transforms(&data, &kp, &kp, &BasisSpec::monomial(), 3, 2).unwrap();
        let a = tgp_fit(&data, &kp, &kp, Some(&lt), Criterion::Hsic, TgpOptions::default()).unwrap();
        let b = tgp_fit(&shuffled, &kp, &kp, Some(&lt), Criterion::Hsic, TgpOptions::default()).unwrap();
        let (x, y) = random_probe(&mut s, 2, 1);
        let va = hsic_objective(&a, &x, &y).unwrap().0;
        let vb = hsic_objective(&b, &x, &y).unwrap().0;
        prop_assert!((va - vb).abs() < 1e-12);
    }
}

#[test]
fn duplicated_outputs_are_interchangeable() {
    let x = DMatrix::from_column_slice(4, 1, &[0.0, 0.4, 0.9, 1.3]);
    let y = DMatrix::from_column_slice(4, 1, &[0.2, 0.7, 0.7, -0.1]);
    let data = Dataset::new(x, y).unwrap();
    let kp = KernelParams::rbf(1.0).unwrap();
    let model = tgp_fit(
        &data,
        &kp,
        &kp,
        None,
        Criterion::Hsic,
        TgpOptions::default(),
    )
    .unwrap();
    let swapped = data.select(&[0, 2, 1, 3]).unwrap();
    let other = tgp_fit(
        &swapped,
        &kp,
        &kp,
        None,
        Criterion::Hsic,
        TgpOptions::default(),
    )
    .unwrap();
    let a = hsic_objective(&model, &[0.6], &[0.7]).unwrap().0;
    let b = hsic_objective(&other, &[0.6], &[0.7]).unwrap().0;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn prediction_reproduces_training_pairs() {
    let x = DMatrix::from_column_slice(6, 1, &[0.0, 0.3, 0.6, 0.9, 1.2, 1.5]);
    let y = x.map(|v| 0.5 * v + 0.1);
    let data = Dataset::new(x.clone(), y.clone()).unwrap();
    let kp = KernelParams::rbf(1.0).unwrap();
    let ident = identity_transforms(kp, kp);
    let model = tgp_fit(
        &data,
        &kp,
        &kp,
        Some(&ident),
        Criterion::KlDiv,
        TgpOptions {
            regularization: 0.0,
        },
    )
    .unwrap();
    let opts = OptimizerOpts {
        gtol: 1e-10,
        ftol: 0.0,
        ..Default::default()
    };
    for i in 0..6 {
        let p = predict(&model, &[x[(i, 0)]], &opts).unwrap();
        assert!(
            (p.output[0] - y[(i, 0)]).abs() < 1e-4,
            "row {i}: {:?}",
            p.output
        );
    }
}

#[test]
fn predictions_are_deterministic_and_parallel_safe() {
    let mut s = Stream::new(47);
    let data = dataset(&mut s, 40, 1, 2);
    let kp = KernelParams::rbf(1.0).unwrap();
    let lt = learn_transforms(&data, &kp, &kp, &BasisSpec::monomial(), 3, 3).unwrap();
    let test = random_points(&mut s, 12, 1, 1.0);
    for criterion in [Criterion::KlDiv, Criterion::Hsic] {
        let model = tgp_fit(&data, &kp, &kp, Some(&lt), criterion, TgpOptions::default()).unwrap();
        let opts = OptimizerOpts::default();
        let a = predict_many(&model, &test, &opts).unwrap();
        let b = predict_many(&model, &test, &opts).unwrap();
        assert_eq!(a, b);
        for (i, pa) in a.iter().enumerate() {
            let single = predict(&model, &[test[(i, 0)]], &opts).unwrap();
            assert_eq!(&single, pa);
            assert!(pa.output.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn reconstruction_invariant_holds_on_sshape() {
    let data = twinkern::data::gen_sshape(&Default::default()).unwrap();
    let kp = KernelParams::rbf(1.0).unwrap();
    let lt = learn_transforms(&data, &kp, &kp, &BasisSpec::monomial(), 11, 11).unwrap();
    let model = tgp_fit(
        &data,
        &kp,
        &kp,
        Some(&lt),
        Criterion::KlDiv,
        TgpOptions::default(),
    )
    .unwrap();
    let (ek, eg) = model.reconstruction_errors().unwrap();
    assert!(ek < 1e-10 && eg < 1e-10, "{ek} {eg}");
    assert!(model.jitter().unwrap() <= 1e-4);
}
