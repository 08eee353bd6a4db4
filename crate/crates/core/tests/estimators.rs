use std::sync::Arc;

use vradapt_core::compress::{rand_k_with_subset, subsets, top_k, CompressedVector, RandK, TopK};
use vradapt_core::estimators::*;
use vradapt_core::problem::{grad_vec, partition_problem, PartitionScheme, ProblemRef, QuadraticProblem};
use vradapt_core::rng::{normal_vec, seeded};
use vradapt_core::verify::{sample_mean_estimate, standard_fixture};

/// Two components in two dimensions:
/// `∇f_0(x) = (x1 + 1, 2 x2)`, `∇f_1(x) = (3 x1 − 1, 4 x2)`, `∇f(x) = (2 x1, 3 x2)`.
fn pair() -> ProblemRef {
    Arc::new(
        QuadraticProblem::new(
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            vec![0.0, 0.0],
            Some(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]),
            None,
        )
        .unwrap(),
    )
}

/// Four dimensions: `∇f_0(x) = x + e_0`, `∇f_1(x) = 2x − e_0`.
fn pair4() -> ProblemRef {
    Arc::new(
        QuadraticProblem::new(
            vec![vec![1.0; 4], vec![2.0; 4]],
            vec![0.0; 4],
            Some(vec![vec![1.0, 0.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0, 0.0]]),
            None,
        )
        .unwrap(),
    )
}

fn clients_of(p: &ProblemRef, m: usize) -> Vec<ProblemRef> {
    partition_problem(p.clone(), m, PartitionScheme::Contiguous).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn h() -> HyperParams {
    HyperParams {
        n: 20,
        b: 4,
        p: 0.5,
        d: 10,
        delta: 2.0,
        omega: 2.0,
    }
}

// ---------------------------------------------------------------------------
// Registered constants

#[test]
fn page_full_probability_has_no_b() {
    let c = constants(Method::Page, &HyperParams { p: 1.0, b: 8, ..h() }).unwrap();
    assert_eq!(c.b, 0.0);
    assert_eq!(c.a, 0.0);
    assert_eq!(nu_of(&c), 1.0);
}

#[test]
fn lsvrg_unit_batch_and_probability() {
    let c = constants(Method::LSvrg, &HyperParams { b: 1, p: 1.0, ..h() }).unwrap();
    assert_eq!(c.c, 3.0);
}

#[test]
fn jaguar_full_block() {
    let c = constants(Method::Jaguar, &HyperParams { b: 10, d: 10, ..h() }).unwrap();
    assert_eq!(c.rho1, 0.5);
    assert_eq!(c.b, 3.0);
    assert_eq!(nu_of(&c), 6.0);
}

#[test]
fn saga_full_batch_rho2() {
    let c = constants(Method::Saga, &HyperParams { b: 20, n: 20, ..h() }).unwrap();
    assert_eq!(c.rho2, 0.5);
}

#[test]
fn dasha_unit_omega() {
    let c = constants(Method::Dasha, &HyperParams { omega: 1.0, ..h() }).unwrap();
    assert!((c.rho1 - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn constants_reject_bad_hyperparams() {
    assert!(constants(Method::Saga, &HyperParams { b: 0, ..h() }).is_err());
    assert!(constants(Method::Saga, &HyperParams { b: 21, ..h() }).is_err());
    assert!(constants(Method::Page, &HyperParams { p: 0.0, ..h() }).is_err());
    assert!(constants(Method::Ef21, &HyperParams { delta: 0.5, ..h() }).is_err());
    assert!(constants(Method::Diana, &HyperParams { omega: 0.9, ..h() }).is_err());
    assert!(constants(Method::Sega, &HyperParams { b: 11, ..h() }).is_err());
}

#[test]
fn constants_never_leave_unit_interval() {
    let mut rng = seeded(5);
    for _ in 0..200 {
        use rand::Rng;
        let n = rng.random_range(1..500usize);
        let d = rng.random_range(1..200usize);
        for m in Method::ALL {
            let b = if m.is_coordinate() { rng.random_range(1..=d) } else { rng.random_range(1..=n) };
            let hp = HyperParams {
                n,
                b,
                p: rng.random_range(0.01..=1.0),
                d,
                delta: rng.random_range(1.0..50.0),
                omega: rng.random_range(1.0..50.0),
            };
            let c = constants(m, &hp).unwrap();
            assert!(c.rho1 > 0.0 && c.rho1 <= 1.0, "{m} {hp:?} {c:?}");
            assert!(c.rho2 > 0.0 && c.rho2 <= 1.0, "{m} {hp:?} {c:?}");
            assert!(c.a >= 0.0 && c.b >= 0.0 && c.c >= 0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization

#[test]
fn init_is_exact_and_costs_one_pass() {
    for m in Method::ALL {
        let f = standard_fixture(m, 1).unwrap();
        let mut est = build_estimator(&f.spec, f.problem.clone(), f.clients.as_deref()).unwrap();
        let x0 = normal_vec(&mut seeded(2), 10);
        est.init(&x0).unwrap();
        assert_close(est.estimate(), &grad_vec(f.problem.as_ref(), &x0).unwrap(), 1e-12);
        assert!(est.sigma_sq().unwrap() < 1e-24, "{m}");
        assert_eq!(est.counters().grad_calls, 20, "{m}");
    }
}

#[test]
fn saga_init_fills_table() {
    let p = pair();
    let mut s = Saga::new(p.clone(), 1);
    s.init(&[1.0, 1.0]).unwrap();
    assert_eq!(s.table_row(0), &[2.0, 2.0]);
    assert_eq!(s.table_row(1), &[2.0, 4.0]);
}

#[test]
fn ef21_init_sets_client_gradients() {
    let p = pair();
    let mut e = Ef21::new(clients_of(&p, 2), Arc::new(TopK::new(2, 1).unwrap()), 32, 32);
    e.init(&[1.0, 1.0]).unwrap();
    assert_eq!(e.client_estimate(0), &[2.0, 2.0]);
    assert_eq!(e.client_estimate(1), &[2.0, 4.0]);
    assert_eq!(e.estimate(), &[2.0, 3.0]);
}

// ---------------------------------------------------------------------------
// Pencil arithmetic on hand-built states

#[test]
fn lsvrg_forced_refresh() {
    let mut e = LSvrg::new(pair(), 1, 1.0, true);
    e.init(&[1.0, 1.0]).unwrap();
    // w = (1,1), ∇f(w) = (2,3), ∇f_1(x) = (5,−4), ∇f_1(w) = (2,4)
    let g = e.step_with(&[2.0, -1.0], true, &[1]).unwrap().to_vec();
    assert_eq!(g, vec![5.0, -5.0]);
    assert_eq!(e.anchor(), &[1.0, 1.0]);
    assert_eq!(e.counters().grad_calls, 2 + 2 + 2);
}

#[test]
fn lsvrg_sigma_follows_anchor() {
    let mut e = LSvrg::new(pair(), 1, 1.0, true);
    e.init(&[1.0, 1.0]).unwrap();
    e.step_with(&[2.0, -1.0], false, &[0]).unwrap();
    // anchor (1,1), x_prev (2,−1): component differences (1,−4) and (3,−8)
    assert!((e.sigma_sq().unwrap() - (17.0 + 73.0) / 2.0).abs() < 1e-12);
    e.step_with(&[2.0, -1.0], true, &[0]).unwrap();
    assert_eq!(e.anchor(), &[2.0, -1.0]);
    assert!(e.sigma_sq().unwrap().abs() < 1e-24);
}

#[test]
fn saga_hand_table() {
    let mut s = Saga::new(pair(), 1);
    s.init(&[0.0, 0.0]).unwrap();
    s.set_table_row(0, &[1.0, 1.0]).unwrap();
    s.set_table_row(1, &[3.0, -1.0]).unwrap();
    // mean y = (2,0), ∇f_0(x) = (3,−2)
    let g = s.step_with(&[2.0, -1.0], &[0]).unwrap().to_vec();
    assert_eq!(g, vec![4.0, -3.0]);
    assert_eq!(s.table_row(0), &[3.0, -2.0]);
    // ½(0 + ‖(5,−4) − (3,−1)‖²)
    assert!((s.sigma_sq().unwrap() - 6.5).abs() < 1e-12);
    assert_eq!(s.counters().grad_calls, 2 + 1);
}

#[test]
fn saga_at_init_point_is_exact_for_any_batch() {
    let f = standard_fixture(Method::Saga, 3).unwrap();
    let x0 = normal_vec(&mut seeded(4), 10);
    let grad = grad_vec(f.problem.as_ref(), &x0).unwrap();
    for batch in [vec![0], vec![3, 7], vec![1, 2, 19]] {
        let mut s = Saga::new(f.problem.clone(), batch.len());
        s.init(&x0).unwrap();
        assert_close(s.step_with(&x0, &batch).unwrap(), &grad, 1e-12);
    }
}

#[test]
fn page_hand_branch() {
    let mut e = Page::new(pair(), 1, 0.5, false);
    e.init(&[1.0, 1.0]).unwrap();
    // (2,3) + (5,−4) − (2,4)
    assert_eq!(e.step_with(&[2.0, -1.0], false, &[1]).unwrap(), &[5.0, -5.0]);
    assert_eq!(e.counters().grad_calls, 4);
    assert_eq!(e.step_with(&[1.0, 2.0], true, &[]).unwrap(), &[2.0, 6.0]);
    assert_eq!(e.counters().grad_calls, 6);
}

#[test]
fn zerosarah_hand_table() {
    let mut z = ZeroSarah::new(pair(), 1);
    z.init(&[1.0, 1.0]).unwrap();
    z.set_table_row(0, &[0.0, 0.0]).unwrap();
    // λ = 1/4, g = (2,3), mean y = (1,2), ∇f_0(x) − ∇f_0(x_prev) = (1,−4),
    // λ(∇f_0(x_prev) − y_0) = (0.5, 0.5)
    let g = z.step_with(&[2.0, -1.0], &[0]).unwrap().to_vec();
    assert_close(&g, &[3.25, -0.75], 1e-15);
    assert_eq!(z.counters().grad_calls, 2 + 2);
}

#[test]
fn zerosarah_full_batch_induction() {
    let p: ProblemRef = Arc::new(QuadraticProblem::random(3, 4, 1.0, 2.0, 1.0, 9).unwrap());
    let mut z = ZeroSarah::new(p.clone(), 3);
    let mut rng = seeded(10);
    z.init(&normal_vec(&mut rng, 4)).unwrap();
    for _ in 0..10 {
        let x = normal_vec(&mut rng, 4);
        let g = z.step_with(&x, &[0, 1, 2]).unwrap().to_vec();
        assert_close(&g, &grad_vec(p.as_ref(), &x).unwrap(), 1e-12);
    }
}

#[test]
fn zerosarah_never_pays_a_full_pass_after_init() {
    let f = standard_fixture(Method::ZeroSarah, 2).unwrap();
    let mut est = build_estimator(&f.spec, f.problem.clone(), None).unwrap();
    let mut rng = seeded(3);
    est.init(&vec![0.0; 10]).unwrap();
    for t in 1..=50u64 {
        est.step(&normal_vec(&mut rng, 10), &mut rng).unwrap();
        assert_eq!(est.counters().grad_calls, 20 + t * 2 * 4);
    }
}

#[test]
fn ef21_top1_hand_states() {
    let p = pair();
    let mut e = Ef21::new(clients_of(&p, 2), Arc::new(TopK::new(2, 1).unwrap()), 32, 32);
    e.init(&[0.0, 0.0]).unwrap();
    e.set_client_estimate(0, &[0.0, 0.0]).unwrap();
    e.set_client_estimate(1, &[1.0, 1.0]).unwrap();
    // diffs (3,−2) → (3,0) and (4,−5) → (0,−5)
    let g = e.step(&[2.0, -1.0], &mut seeded(0)).unwrap().to_vec();
    assert_eq!(g, vec![2.0, -2.0]);
    assert_eq!(e.client_estimate(0), &[3.0, 0.0]);
    assert_eq!(e.client_estimate(1), &[1.0, -4.0]);
    let c = e.counters();
    assert_eq!(c.bits, 2 * 2 * 32 + 2 * 64);
    assert_eq!((c.dense_messages, c.sparse_messages), (2, 2));
}

#[test]
fn diana_is_unbiased_under_enumeration() {
    let p = pair4();
    let subs = subsets(4, 2);
    let mut base = Diana::new(clients_of(&p, 2), Arc::new(RandK::new(4, 2).unwrap()), 32, 32);
    base.init(&[0.0; 4]).unwrap();
    base.set_shift(0, &[0.5, -1.0, 2.0, 0.0]).unwrap();
    base.set_shift(1, &[1.0, 1.0, -3.0, 0.25]).unwrap();
    let x = [1.0, -2.0, 0.5, 3.0];
    let mut mean = [0.0; 4];
    for s0 in &subs {
        for s1 in &subs {
            let mut e = base.clone();
            let g = e
                .step_with(&x, &mut |c, v| rand_k_with_subset(v, if c == 0 { s0 } else { s1 }).unwrap())
                .unwrap();
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v / (subs.len() * subs.len()) as f64;
            }
        }
    }
    assert_close(&mean, &grad_vec(p.as_ref(), &x).unwrap(), 1e-12);
}

#[test]
fn diana_shift_update() {
    let p = pair4();
    let mut e = Diana::new(clients_of(&p, 2), Arc::new(RandK::new(4, 2).unwrap()), 32, 32);
    e.init(&[0.0; 4]).unwrap();
    // shifts (1,0,0,0) and (−1,0,0,0), h = 0, ω = 2.
    // x = 1: diffs (1,1,1,1) and (2,2,2,2) → Q on {0,1} and {2,3}: (2,2,0,0), (0,0,4,4)
    let subs = [vec![0, 1], vec![2, 3]];
    let g = e
        .step_with(&[1.0; 4], &mut |c, v| rand_k_with_subset(v, &subs[c]).unwrap())
        .unwrap()
        .to_vec();
    assert_eq!(g, vec![1.0, 1.0, 2.0, 2.0]);
    assert_close(e.client_shift(0), &[1.0 + 2.0 / 3.0, 2.0 / 3.0, 0.0, 0.0], 1e-15);
    assert_close(e.client_shift(1), &[-1.0, 0.0, 4.0 / 3.0, 4.0 / 3.0], 1e-15);
    assert_close(e.server_shift(), &[1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0], 1e-15);
}

#[test]
fn dasha_hand_states() {
    let p = pair4();
    let mut e = Dasha::new(clients_of(&p, 2), Arc::new(RandK::new(4, 2).unwrap()), 32, 32);
    e.init(&[0.0; 4]).unwrap();
    e.set_client_estimate(0, &[1.0, 1.0, 0.0, 0.0]).unwrap();
    // a = 1/5; z_0 = (1,1,1,1) − 0.2(0,1,0,0), z_1 = (2,2,2,2)
    let subs = [vec![0, 2], vec![1, 3]];
    let g = e
        .step_with(&[1.0; 4], &mut |c, v| rand_k_with_subset(v, &subs[c]).unwrap())
        .unwrap()
        .to_vec();
    assert_close(&g, &[1.0, 2.5, 1.0, 2.0], 1e-15);
    assert_close(e.client_estimate(0), &[3.0, 1.0, 2.0, 0.0], 1e-15);
    assert_close(e.client_estimate(1), &[-1.0, 4.0, 0.0, 4.0], 1e-15);
}

#[test]
fn dasha_stationary_point_keeps_estimate() {
    let f = standard_fixture(Method::Dasha, 4).unwrap();
    let mut rng = seeded(1);
    let x1 = normal_vec(&mut rng, 10);
    let mut e = Dasha::new(f.clients.clone().unwrap(), Arc::new(RandK::new(10, 3).unwrap()), 32, 32);
    e.init(&x1).unwrap();
    let g0 = e.estimate().to_vec();
    assert_close(e.step(&x1, &mut rng).unwrap(), &g0, 0.0);
}

#[test]
fn dasha_is_biased_when_clients_lag() {
    let p = pair4();
    let subs = subsets(4, 2);
    let mut base = Dasha::new(clients_of(&p, 2), Arc::new(RandK::new(4, 2).unwrap()), 32, 32);
    base.init(&[0.0; 4]).unwrap();
    base.set_client_estimate(0, &[1.0, 1.0, 0.0, 0.0]).unwrap();
    let x = [1.0; 4];
    let mut mean = [0.0; 4];
    for s0 in &subs {
        for s1 in &subs {
            let mut e = base.clone();
            let g = e
                .step_with(&x, &mut |c, v| rand_k_with_subset(v, if c == 0 { s0 } else { s1 }).unwrap())
                .unwrap();
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v / 36.0;
            }
        }
    }
    // E g = g_prev + mean z_c = (0,0.5,0,0) + (1.5, 1.4, 1.5, 1.5)
    assert_close(&mean, &[1.5, 1.9, 1.5, 1.5], 1e-12);
    let grad = grad_vec(p.as_ref(), &x).unwrap();
    assert!((mean[1] - grad[1]).abs() > 0.3);
}

fn line3() -> ProblemRef {
    Arc::new(QuadraticProblem::new(vec![vec![1.0, 2.0, 3.0]], vec![0.0; 3], None, None).unwrap())
}

#[test]
fn sega_scalar_is_exact() {
    let p: ProblemRef = Arc::new(QuadraticProblem::new(vec![vec![2.0]], vec![1.0], None, None).unwrap());
    let mut s = Sega::new(p, 1);
    s.init(&[0.0]).unwrap();
    assert_eq!(s.step(&[3.0], &mut seeded(0)).unwrap(), &[4.0]);
}

#[test]
fn sega_unbiased_when_memory_tracks_previous_point() {
    let p = line3();
    let mut base = Sega::new(p.clone(), 1);
    base.init(&[1.0, 1.0, 1.0]).unwrap();
    base.set_memory(&[1.0, 2.0, 3.0]).unwrap();
    let x = [2.0, -1.0, 0.5];
    let mut mean = [0.0; 3];
    for j in 0..3 {
        let mut e = base.clone();
        for (m, v) in mean.iter_mut().zip(e.step_with(&x, &[j]).unwrap()) {
            *m += v / 3.0;
        }
    }
    assert_close(&mean, &[2.0, -2.0, 1.5], 1e-12);
}

#[test]
fn sega_exact_when_memory_is_current() {
    let p = line3();
    let mut s = Sega::new(p, 2);
    let x = [0.3, -0.7, 2.0];
    s.init(&x).unwrap();
    for coords in [[0, 1], [1, 2], [0, 2]] {
        let mut e = s.clone();
        assert_close(e.step_with(&x, &coords).unwrap(), &[0.3, -1.4, 6.0], 1e-15);
    }
}

#[test]
fn sega_counts_two_partials_per_coordinate() {
    let mut s = Sega::new(line3(), 2);
    s.init(&[0.0; 3]).unwrap();
    s.step_with(&[1.0; 3], &[0, 2]).unwrap();
    assert_eq!(s.counters().partial_calls, 4);
    assert!(s.step_with(&[1.0; 3], &[0, 0]).is_err());
    assert!(s.step_with(&[1.0; 3], &[3]).is_err());
}

#[test]
fn jaguar_forced_coordinate_and_bias() {
    let p = line3();
    let mut base = Jaguar::new(p.clone(), 1);
    base.init(&[1.0, 1.0, 1.0]).unwrap();
    let x = [2.0, -1.0, 0.5];
    let mut e = base.clone();
    assert_eq!(e.step_with(&x, &[1]).unwrap(), &[1.0, -2.0, 3.0]);
    assert_eq!(e.counters().partial_calls, 1);
    let mut mean = [0.0; 3];
    for j in 0..3 {
        let mut e = base.clone();
        for (m, v) in mean.iter_mut().zip(e.step_with(&x, &[j]).unwrap()) {
            *m += v / 3.0;
        }
    }
    // (1/3) ∇f(x) + (2/3) g_prev
    let want = [(2.0 + 2.0) / 3.0, (-2.0 + 4.0) / 3.0, (1.5 + 6.0) / 3.0];
    assert_close(&mean, &want, 1e-12);
}

#[test]
fn jaguar_keeps_estimate_at_its_own_gradient() {
    let mut j = Jaguar::new(line3(), 1);
    let x = [0.5, 0.5, 0.5];
    j.init(&x).unwrap();
    let g0 = j.estimate().to_vec();
    assert_eq!(j.step(&x, &mut seeded(0)).unwrap(), g0.as_slice());
}

#[test]
fn page_and_jaguar_have_no_sigma() {
    for m in [Method::Page, Method::Jaguar] {
        let f = standard_fixture(m, 1).unwrap();
        let mut est = build_estimator(&f.spec, f.problem.clone(), None).unwrap();
        let mut rng = seeded(0);
        est.init(&normal_vec(&mut rng, 10)).unwrap();
        for _ in 0..5 {
            est.step(&normal_vec(&mut rng, 10), &mut rng).unwrap();
            assert_eq!(est.sigma_sq().unwrap(), 0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Degenerate hyperparameters reproduce the gradient

fn degenerate(method: Method) -> EstimatorSpec {
    match method {
        Method::LSvrg => EstimatorSpec::new(method).with_b(20).with_p(0.3),
        Method::Saga | Method::ZeroSarah | Method::Sgd => EstimatorSpec::new(method).with_b(20),
        Method::Page => EstimatorSpec::new(method).with_b(2).with_p(1.0),
        Method::Ef21 | Method::Diana | Method::Dasha => EstimatorSpec::new(method),
        Method::Sega | Method::Jaguar => EstimatorSpec::new(method).with_b(10),
    }
}

#[test]
fn degenerate_hyperparameters_are_exact() {
    let mut methods = Method::ALL.to_vec();
    methods.push(Method::Sgd);
    for m in methods {
        let f = standard_fixture(m, 11).unwrap();
        let spec = degenerate(m);
        let mut est = build_estimator(&spec, f.problem.clone(), f.clients.as_deref()).unwrap();
        let mut rng = seeded(12);
        est.init(&normal_vec(&mut rng, 10)).unwrap();
        for _ in 0..10 {
            let x = normal_vec(&mut rng, 10);
            let g = est.step(&x, &mut rng).unwrap().to_vec();
            assert_close(&g, &grad_vec(f.problem.as_ref(), &x).unwrap(), 1e-12);
        }
    }
}

#[test]
fn full_size_compressors_match_identity() {
    for (m, c) in [
        (Method::Ef21, CompressorSpec::TopK(10)),
        (Method::Diana, CompressorSpec::RandK(10)),
        (Method::Dasha, CompressorSpec::RandK(10)),
    ] {
        let f = standard_fixture(m, 13).unwrap();
        let spec = EstimatorSpec::new(m).with_compressor(c);
        let mut est = build_estimator(&spec, f.problem.clone(), f.clients.as_deref()).unwrap();
        let mut rng = seeded(14);
        est.init(&normal_vec(&mut rng, 10)).unwrap();
        for _ in 0..10 {
            let x = normal_vec(&mut rng, 10);
            let g = est.step(&x, &mut rng).unwrap().to_vec();
            assert_close(&g, &grad_vec(f.problem.as_ref(), &x).unwrap(), 1e-12);
        }
    }
}

// ---------------------------------------------------------------------------
// Monte-Carlo unbiasedness at frozen states

fn frozen(method: Method, seed: u64) -> (Box<dyn Estimator>, ProblemRef, Vec<f64>) {
    let f = standard_fixture(method, seed).unwrap();
    let mut est = build_estimator(&f.spec, f.problem.clone(), f.clients.as_deref()).unwrap();
    let mut rng = seeded(seed + 100);
    let mut x = normal_vec(&mut rng, 10);
    est.init(&x).unwrap();
    for _ in 0..5 {
        let g = est.estimate().to_vec();
        x.iter_mut().zip(&g).for_each(|(a, b)| *a -= 0.1 * b);
        est.step(&x, &mut rng).unwrap();
    }
    let x_next: Vec<f64> = x.iter().map(|v| v + 0.3).collect();
    (est, f.problem, x_next)
}

fn max_z(mean: &[f64], se: &[f64], target: &[f64]) -> f64 {
    mean.iter()
        .zip(se)
        .zip(target)
        .map(|((m, s), t)| (m - t).abs() / s.max(1e-300))
        .fold(0.0, f64::max)
}

#[test]
fn unbiased_estimators_pass_sample_mean_test() {
    for m in [Method::LSvrg, Method::Saga, Method::Diana] {
        let (est, p, x) = frozen(m, 21);
        let (mean, se) = sample_mean_estimate(est.as_ref(), &x, 20000, 22).unwrap();
        let z = max_z(&mean, &se, &grad_vec(p.as_ref(), &x).unwrap());
        assert!(z <= 3.0, "{m}: max z = {z}");
    }
}

#[test]
fn sega_unbiased_given_current_memory() {
    let f = standard_fixture(Method::Sega, 23).unwrap();
    let mut s = Sega::new(f.problem.clone(), 3);
    let mut rng = seeded(24);
    let x0 = normal_vec(&mut rng, 10);
    s.init(&x0).unwrap();
    let x = normal_vec(&mut rng, 10);
    let (mean, se) = sample_mean_estimate(&s, &x, 20000, 25).unwrap();
    let z = max_z(&mean, &se, &grad_vec(f.problem.as_ref(), &x).unwrap());
    assert!(z <= 3.0, "max z = {z}");
}

#[test]
fn biased_estimators_are_detected() {
    for m in [Method::Jaguar, Method::Ef21, Method::Dasha] {
        let (est, p, x) = frozen(m, 26);
        let (mean, se) = sample_mean_estimate(est.as_ref(), &x, 20000, 27).unwrap();
        let grad = grad_vec(p.as_ref(), &x).unwrap();
        let err: f64 = mean.iter().zip(&grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let z = max_z(&mean, &se, &grad);
        assert!(z > 10.0 || (se.iter().all(|s| *s == 0.0) && err > 1e-6), "{m}: z = {z}, err = {err}");
    }
}

#[test]
fn page_non_refresh_branch_is_biased_from_a_perturbed_estimate() {
    let f = standard_fixture(Method::Page, 28).unwrap();
    let mut base = Page::new(f.problem.clone(), 1, 0.5, false);
    let mut rng = seeded(29);
    let x0 = normal_vec(&mut rng, 10);
    base.init(&x0).unwrap();
    let g_off: Vec<f64> = base.estimate().iter().map(|v| v + 1.0).collect();
    base.set_prev(&x0, &g_off).unwrap();
    let x = normal_vec(&mut rng, 10);
    let mut mean = vec![0.0; 10];
    for i in 0..20 {
        let mut e = base.clone();
        for (m, v) in mean.iter_mut().zip(e.step_with(&x, false, &[i]).unwrap()) {
            *m += v / 20.0;
        }
    }
    let grad = grad_vec(f.problem.as_ref(), &x).unwrap();
    assert_close(&mean, &grad.iter().map(|v| v + 1.0).collect::<Vec<_>>(), 1e-12);
}

// ---------------------------------------------------------------------------
// Bookkeeping

#[test]
fn counters_reproduce_with_seed() {
    for m in Method::ALL {
        let run = || {
            let f = standard_fixture(m, 30).unwrap();
            let mut est = build_estimator(&f.spec, f.problem.clone(), f.clients.as_deref()).unwrap();
            let mut rng = seeded(31);
            est.init(&[0.0; 10]).unwrap();
            for _ in 0..20 {
                let x = normal_vec(&mut rng, 10);
                est.step(&x, &mut rng).unwrap();
            }
            (est.counters(), est.estimate().to_vec())
        };
        assert_eq!(run(), run(), "{m}");
    }
}

#[test]
fn distributed_methods_need_clients() {
    let f = standard_fixture(Method::Ef21, 1).unwrap();
    assert!(build_estimator(&f.spec, f.problem.clone(), None).is_err());
    let spec = EstimatorSpec::new(Method::Diana).with_compressor(CompressorSpec::TopK(2));
    assert!(build_estimator(&spec, f.problem.clone(), f.clients.as_deref()).is_err());
}

#[test]
fn dimension_errors_surface() {
    let f = standard_fixture(Method::Saga, 1).unwrap();
    let mut est = build_estimator(&f.spec, f.problem.clone(), None).unwrap();
    assert!(est.init(&[0.0; 3]).is_err());
    est.init(&[0.0; 10]).unwrap();
    assert!(est.step(&[0.0; 9], &mut seeded(0)).is_err());
}

#[test]
fn compressed_messages_are_sparse_for_topk() {
    let v = top_k(&[0.0, -4.0, 1.0], 1).unwrap();
    assert_eq!(v, CompressedVector::sparse(3, vec![(1, -4.0)]).unwrap());
}
