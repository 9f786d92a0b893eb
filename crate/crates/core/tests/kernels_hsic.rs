mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use twinkern::data::Stream;
use twinkern::{
    hsic, hsic_dense, kernel_gradient, kernel_matrix, kernel_row, KernelMatrix, KernelParams,
};

fn kernel_pair(seed: u64, m: usize) -> (KernelMatrix, KernelMatrix) {
    let mut s = Stream::new(seed);
    let gx = uniform_in(&mut s, 0.1, 3.0);
    let gy = uniform_in(&mut s, 0.1, 3.0);
    (rbf_gram(&mut s, m, 2, gx), rbf_gram(&mut s, m, 3, gy))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hsic_is_symmetric(seed in any::<u64>(), m in 2usize..24) {
        let (k, g) = kernel_pair(seed, m);
        prop_assert!((hsic(&k, &g).unwrap() - hsic(&g, &k).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn hsic_is_invariant_to_joint_permutation(seed in any::<u64>(), m in 2usize..24) {
        let (k, g) = kernel_pair(seed, m);
        let mut s = Stream::new(seed ^ 0x5eed);
        let p = permutation(&mut s, m);
        let kp = KernelMatrix::new(permute(k.values(), &p), true).unwrap();
        let gp = KernelMatrix::new(permute(g.values(), &p), true).unwrap();
        prop_assert!((hsic(&kp, &gp).unwrap() - hsic(&k, &g).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn hsic_is_nonnegative_for_psd_inputs(seed in any::<u64>(), m in 2usize..24, r in 1usize..6) {
        let mut s = Stream::new(seed);
        let k = random_psd(&mut s, m, r);
        let g = random_psd(&mut s, m, r);
        prop_assert!(hsic_dense(&k, &g).unwrap() >= -1e-10);
    }

    #[test]
    fn constant_kernel_is_annihilated(seed in any::<u64>(), m in 2usize..24, c in 0.1f64..5.0) {
        let mut s = Stream::new(seed);
        let g = random_psd(&mut s, m, 3);
        let j = DMatrix::from_element(m, m, c);
        prop_assert!(hsic_dense(&j, &g).unwrap().abs() < 1e-10);
    }

    #[test]
    fn hsic_matches_explicit_centering(seed in any::<u64>(), m in 2usize..16) {
        let mut s = Stream::new(seed);
        let k = random_psd(&mut s, m, 4);
        let g = random_psd(&mut s, m, 4);
        let expected = dense_hsic(&k, &g);
        prop_assert!((hsic_dense(&k, &g).unwrap() - expected).abs() < 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn kernel_matrix_is_symmetric_with_unit_diagonal(seed in any::<u64>(), m in 2usize..20, gamma in 0.01f64..10.0) {
        let mut s = Stream::new(seed);
        let x = random_points(&mut s, m, 3, 2.0);
        let k = kernel_matrix(&x, &KernelParams::rbf(gamma).unwrap()).unwrap();
        for i in 0..m {
            prop_assert_eq!(k.values()[(i, i)], 1.0);
            for j in 0..m {
                prop_assert_eq!(k.values()[(i, j)], k.values()[(j, i)]);
            }
        }
    }
}

#[test]
fn rbf_matches_double_loop() {
    let mut s = Stream::new(11);
    let x = random_points(&mut s, 5, 3, 1.0);
    let k = kernel_matrix(&x, &KernelParams::rbf(0.7).unwrap()).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let d2: f64 = (0..3).map(|d| (x[(i, d)] - x[(j, d)]).powi(2)).sum();
            assert!((k.values()[(i, j)] - (-0.7 * d2).exp()).abs() < 1e-12);
        }
    }
}

#[test]
fn kernel_row_matches_scalar_evaluation() {
    let mut s = Stream::new(12);
    let x = random_points(&mut s, 4, 2, 1.0);
    let q = [0.3, -0.4];
    for params in [
        KernelParams::rbf(1.3).unwrap(),
        KernelParams::linear(2.0).unwrap(),
    ] {
        let row = kernel_row(&x, &q, &params).unwrap();
        for i in 0..4 {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            assert!((row[i] - params.eval(&xi, &q).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn small_hsic_cases() {
    let k = KernelMatrix::new(DMatrix::identity(2, 2), true).unwrap();
    assert!((hsic(&k, &k).unwrap() - 1.0).abs() < 1e-15);
    let (k, _) = kernel_pair(3, 6);
    let (_, g) = kernel_pair(4, 6);
    assert!((hsic(&k, &g).unwrap() - dense_hsic(k.values(), g.values())).abs() < 1e-10);
}

fn check_kernel_gradients(params: KernelParams, seed: u64, tol: f64) {
    let mut s = Stream::new(seed);
    for _ in 0..120 {
        let m = 1 + s.below(6);
        let p = 1 + s.below(4);
        let x = random_points(&mut s, m, p, 1.5);
        let q: Vec<f64> = (0..p).map(|_| uniform_in(&mut s, -1.5, 1.5)).collect();
        let analytic = kernel_gradient(&x, &q, &params).unwrap();
        for i in 0..m {
            let fd = fd_gradient(|y| kernel_row(&x, y, &params).unwrap()[i], &q, 1e-5);
            let a: Vec<f64> = analytic.row(i).iter().copied().collect();
            assert!(rel_err(&a, &fd, 1e-3) < tol, "row {i}: {a:?} vs {fd:?}");
        }
    }
}

#[test]
fn rbf_gradient_matches_finite_differences() {
    check_kernel_gradients(KernelParams::rbf(0.8).unwrap(), 21, 1e-5);
}

#[test]
fn linear_gradient_matches_finite_differences() {
    check_kernel_gradients(KernelParams::linear(1.0).unwrap(), 22, 1e-5);
}
