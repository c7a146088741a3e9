use coreals::metrics::{converged_at, is_non_increasing};
use coreals::{
    ces_sketch, compute_diagnostics, fit, leverage_scores, rmse, update_item_full, update_row_sampled, update_user_core,
    update_user_full, FactorDist, FactorPair, InitScheme, Method, RatingMatrix, RowSample, SolverConfig, SparseSketch,
    SyntheticConfig,
};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian elimination with partial pivoting on a dense copy.
fn gauss(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

/// `(sum_k w_k a_k x_k^T + lambda count I)^-1 sum_k w_k a_k y_k` over rows `rows`.
fn ridge(a: &Array2<f64>, x: &Array2<f64>, y: &[f64], rows: &[(usize, f64)], lambda: f64, count: usize) -> Vec<f64> {
    let p = x.ncols();
    let mut g = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for &(k, w) in rows {
        for i in 0..p {
            rhs[i] += w * a[[k, i]] * y[k];
            for j in 0..p {
                g[i][j] += w * a[[k, i]] * x[[k, j]];
            }
        }
    }
    for (i, row) in g.iter_mut().enumerate() {
        row[i] += lambda * count as f64;
    }
    gauss(g, rhs)
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0))
}

fn random_ratings(rng: &mut ChaCha8Rng, nu: usize, nm: usize, density: f64) -> RatingMatrix {
    let mut e = Vec::new();
    for u in 0..nu {
        for m in 0..nm {
            if rng.random::<f64>() < density || m == u % nm {
                e.push((u, m, rng.random_range(1.0..5.0)));
            }
        }
    }
    RatingMatrix::new(nu, nm, &e).unwrap()
}

fn synth(dist: FactorDist, n: usize, m: usize, rank: usize, alpha: f64, seed: u64) -> coreals::SyntheticData {
    coreals::generate_rating_matrix(&SyntheticConfig::new(dist, n, m, rank, alpha).with_seed(seed)).unwrap()
}

#[test]
fn user_update_satisfies_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = random_ratings(&mut rng, 12, 30, 0.3);
    let items = random_matrix(&mut rng, 30, 4);
    for u in 0..12 {
        let sol = update_user_full(&items, &r, u, 0.2).unwrap().unwrap();
        let (idx, y) = r.user_ratings(u);
        let x = items.select(ndarray::Axis(0), &idx.iter().map(|&i| i as usize).collect::<Vec<_>>());
        let gram = x.t().dot(&x) + Array2::<f64>::eye(4) * (0.2 * idx.len() as f64);
        let xty = x.t().dot(&Array1::from(y.to_vec()));
        let resid = gram.dot(&sol) - &xty;
        assert!(resid.dot(&resid).sqrt() <= 1e-9 * xty.dot(&xty).sqrt());
    }
}

#[test]
fn item_update_on_transpose_matches_user_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = random_ratings(&mut rng, 15, 9, 0.4);
    let rt = r.transpose();
    let items = random_matrix(&mut rng, 9, 3);
    for u in 0..15 {
        let a = update_user_full(&items, &r, u, 0.05).unwrap().unwrap();
        let b = update_item_full(&items, &rt, u, 0.05).unwrap().unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn duplicated_rows_match_count_scaled_gram() {
    // One item rated identically by three users sharing the same factor row.
    let users = array![[0.3, -0.2], [0.3, -0.2], [0.3, -0.2], [1.0, 0.5]];
    let r = RatingMatrix::new(4, 1, &[(0, 0, 2.0), (1, 0, 2.0), (2, 0, 2.0), (3, 0, 1.0)]).unwrap();
    let got = update_item_full(&users, &r, 0, 0.1).unwrap().unwrap();
    let want = ridge(&users, &users, &[2.0, 2.0, 2.0, 1.0], &[(0, 3.0), (3, 1.0)], 0.1, 4);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn rank_one_fully_observed_is_recovered() {
    let u: Vec<f64> = (0..20).map(|i| 0.5 + 0.05 * i as f64).collect();
    let v: Vec<f64> = (0..15).map(|j| 1.0 - 0.03 * j as f64).collect();
    let e: Vec<_> = (0..20).flat_map(|i| (0..15).map(move |j| (i, j))).map(|(i, j)| (i, j, u[i] * v[j])).collect();
    let r = RatingMatrix::new(20, 15, &e).unwrap();
    let cfg = SolverConfig::new(Method::Full, 1, 1e-8).with_max_iters(10).with_tol(1e-12);
    let (f, rep) = fit(&r, &cfg).unwrap();
    assert!(rep.iters_run <= 10);
    assert!(rmse(&r, &f).unwrap() < 1e-3);
}

#[test]
fn full_objective_never_increases() {
    for seed in 0..6 {
        let d = synth(FactorDist::ALL[seed % 3], 50, 40, 4, 0.5, seed as u64);
        let cfg = SolverConfig::new(Method::Full, 4, 0.05).with_max_iters(12).with_tol(1e-12).with_seed(seed as u64);
        let (_, rep) = fit(&d.ratings, &cfg).unwrap();
        assert_eq!(rep.objective_trace.len(), rep.iters_run);
        assert!(is_non_increasing(&rep.objective_trace, 1e-12), "seed {seed}: {:?}", rep.objective_trace);
    }
}

#[test]
fn single_thread_fits_are_bit_identical() {
    let d = synth(FactorDist::Normal, 60, 50, 5, 0.4, 3);
    for m in Method::ALL {
        let cfg = SolverConfig::new(m, 5, 0.1).with_rate(0.3).with_max_iters(4).with_seed(9).with_threads(1);
        let (fa, ra) = fit(&d.ratings, &cfg).unwrap();
        let (fb, rb) = fit(&d.ratings, &cfg).unwrap();
        assert_eq!(fa, fb, "{m}");
        assert_eq!(ra.objective_trace, rb.objective_trace, "{m}");
    }
}

#[test]
fn parallel_fit_agrees_with_serial() {
    let d = synth(FactorDist::Normal, 80, 60, 5, 0.5, 4);
    let cfg = SolverConfig::new(Method::Core, 5, 0.1).with_rate(0.4).with_max_iters(5).with_seed(2);
    let (_, a) = fit(&d.ratings, &cfg.clone().with_threads(1)).unwrap();
    let (_, b) = fit(&d.ratings, &cfg.with_threads(3)).unwrap();
    for (x, y) in a.objective_trace.iter().zip(&b.objective_trace) {
        assert!((x - y).abs() <= 1e-10 * x.abs());
    }
}

#[test]
fn given_init_is_used_verbatim() {
    let d = synth(FactorDist::Normal, 30, 20, 3, 0.6, 5);
    let init = Array2::from_elem((20, 3), 0.25);
    let cfg = SolverConfig {
        init: InitScheme::Given(init.clone()),
        ..SolverConfig::new(Method::Full, 3, 0.1).with_max_iters(0)
    };
    let (f, rep) = fit(&d.ratings, &cfg).unwrap();
    assert_eq!(f.items, init);
    assert!(rep.objective_trace.is_empty());
}

#[test]
fn core_update_matches_dense_sketch_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..40 {
        let (n, p) = (5 + trial % 20, 1 + trial % 4);
        let x = random_matrix(&mut rng, n, p);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rate = [0.2, 0.5, 0.8][trial % 3];
        let sk = ces_sketch(&x.view(), rate).unwrap();
        let xs = sk.to_dense();
        let got = update_user_core(&x.view(), &sk, &y, 0.1, n).unwrap();
        let rows: Vec<_> = (0..n).map(|k| (k, 1.0)).collect();
        let want = ridge(&xs, &x, &y, &rows, 0.1, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()), "trial {trial}");
        }
    }
}

#[test]
fn core_at_half_rate_tracks_full_on_rank_one() {
    let d = synth(FactorDist::Lognormal, 120, 100, 1, 0.5, 7);
    let base = SolverConfig::new(Method::Full, 1, 0.1).with_max_iters(30).with_seed(1);
    let (ff, _) = fit(&d.ratings, &base).unwrap();
    let (fc, rc) = fit(&d.ratings, &SolverConfig { method: Method::Core, ..base }.with_rate(0.5)).unwrap();
    assert!(rc.converged && rc.iters_run <= 30);
    assert!(converged_at(&rc.objective_trace, 0.01).is_some());
    assert!(rmse(&d.ratings, &fc).unwrap() <= 1.1 * rmse(&d.ratings, &ff).unwrap());
}

#[test]
fn fast_core_equals_core_when_fully_observed() {
    let d = synth(FactorDist::Normal, 40, 30, 4, 1.0, 8);
    let base = SolverConfig::new(Method::Core, 4, 0.1).with_rate(0.3).with_max_iters(5).with_tol(1e-12).with_threads(1);
    let (fa, a) = fit(&d.ratings, &base).unwrap();
    let (fb, b) = fit(&d.ratings, &SolverConfig { method: Method::FastCore, ..base }).unwrap();
    assert_eq!(a.objective_trace, b.objective_trace);
    assert_eq!(fa, fb);
}

#[test]
fn sampled_update_matches_weighted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_matrix(&mut rng, 10, 2);
    let y: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..4.0)).collect();
    let sample = RowSample {
        indices: vec![0, 3, 3, 7, 9],
        probabilities: vec![0.1; 10],
        weights: vec![2.0, 2.0, 2.0, 2.0, 2.0],
    };
    let got = update_row_sampled(&x.view(), &y, &sample, 0.3, 10).unwrap();
    let want = ridge(&x, &x, &y, &[(0, 2.0), (3, 4.0), (7, 2.0), (9, 2.0)], 0.3, 10);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn subsampling_baselines_collapse_at_full_rate() {
    let d = synth(FactorDist::T4, 50, 40, 3, 0.5, 10);
    let base = SolverConfig::new(Method::Full, 3, 0.1).with_max_iters(6).with_tol(1e-12).with_threads(1);
    let (_, full) = fit(&d.ratings, &base).unwrap();
    let (_, unif) = fit(&d.ratings, &SolverConfig { method: Method::Unif, ..base }).unwrap();
    for (a, b) in full.objective_trace.iter().zip(&unif.objective_trace) {
        assert!((a - b).abs() <= 1e-9 * a.abs());
    }
}

#[test]
fn leverage_of_orthonormal_columns_is_uniform() {
    // Columns of a 4x4 Hadamard matrix scaled to unit norm.
    let h = array![[1.0, 1.0, 1.0, 1.0], [1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, -1.0, 1.0]] * 0.5;
    let lev = leverage_scores(&h.slice(ndarray::s![.., ..2])).unwrap();
    assert_eq!(lev.rank, 2);
    for p in lev.probabilities() {
        assert!((p - 0.25).abs() < 1e-12);
    }
}

#[test]
fn leverage_scores_are_bounded_and_sum_to_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [3, 7, 20, 50] {
        let x = random_matrix(&mut rng, n, 3);
        let lev = leverage_scores(&x.view()).unwrap();
        assert!(lev.scores.iter().all(|&h| (-1e-12..=1.0 + 1e-12).contains(&h)));
        assert!((lev.scores.iter().sum::<f64>() - lev.rank as f64).abs() < 1e-9);
    }
}

#[test]
fn baselines_land_near_full_at_quarter_rate() {
    let d = synth(FactorDist::Normal, 800, 800, 10, 0.4, 12);
    let base = SolverConfig::new(Method::Full, 10, 0.1).with_max_iters(15).with_seed(3);
    let (ff, _) = fit(&d.ratings, &base).unwrap();
    let full = rmse(&d.ratings, &ff).unwrap();
    for m in [Method::Unif, Method::Blev] {
        let (f, _) = fit(&d.ratings, &SolverConfig { method: m, ..base.clone() }.with_rate(0.25)).unwrap();
        let got = rmse(&d.ratings, &f).unwrap();
        assert!(got <= 1.25 * full, "{m}: {got} vs {full}");
    }
}

#[test]
fn zeroed_sketch_column_gives_column_norm_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_matrix(&mut rng, 9, 3);
    let cols = (0..3)
        .map(|c| if c == 1 { vec![] } else { (0..9).map(|k| (k, x[[k, c]])).collect() })
        .collect();
    let sk = SparseSketch::from_columns(9, cols).unwrap();
    let y: Vec<f64> = (0..9).map(|_| rng.random()).collect();
    let u = vec![0.1, 0.2, 0.3];
    let rec = compute_diagnostics(&x.view(), &sk, &y, 0.1, 9, &u, &u).unwrap();
    let col = x.column(1).dot(&x.column(1)).sqrt();
    let gram = x.t().dot(&x);
    // Largest eigenvalue of the 3x3 Gram by dense power iteration.
    let mut v = Array1::from_elem(3, 1.0);
    for _ in 0..2000 {
        v = gram.dot(&v);
        v /= v.dot(&v).sqrt();
    }
    let norm = v.dot(&gram.dot(&v)).sqrt();
    assert!((rec.spectral_ratio - col / norm).abs() < 1e-5, "{} vs {}", rec.spectral_ratio, col / norm);
}

#[test]
fn diagnostics_gamma_matches_two_by_two_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let x = random_matrix(&mut rng, 8, 2);
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sk = ces_sketch(&x.view(), 0.5).unwrap();
        let rows: Vec<_> = (0..8).map(|k| (k, 1.0)).collect();
        let uf = ridge(&x, &x, &y, &rows, 0.1, 8);
        let uc = ridge(&sk.to_dense(), &x, &y, &rows, 0.1, 8);
        let rec = compute_diagnostics(&x.view(), &sk, &y, 0.1, 8, &uf, &uc).unwrap();
        assert!(rec.gamma.is_finite() && rec.gamma >= 0.0);
        assert!(rec.rss_ratio.is_finite() && rec.spectral_ratio > 0.0 && rec.spectral_ratio <= 1.0 + 1e-9);
        // L = X - X*, whose spectral norm relative to X is the reported ratio.
        let l = &x - &sk.to_dense();
        let top = |m: &Array2<f64>| {
            let g = m.t().dot(m);
            let (a, b, d) = (g[[0, 0]], g[[0, 1]], g[[1, 1]]);
            (0.5 * (a + d) + (0.25 * (a - d).powi(2) + b * b).sqrt()).sqrt()
        };
        assert!((rec.spectral_ratio - top(&l) / top(&x)).abs() < 1e-5);
    }
}

#[test]
fn rss_ratio_falls_as_rate_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (mut lo, mut hi) = (0.0, 0.0);
    for _ in 0..60 {
        let x = random_matrix(&mut rng, 40, 3);
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<_> = (0..40).map(|k| (k, 1.0)).collect();
        let uf = ridge(&x, &x, &y, &rows, 0.1, 40);
        for (rate, acc) in [(0.1, &mut lo), (0.3, &mut hi)] {
            let sk = ces_sketch(&x.view(), rate).unwrap();
            let uc = update_user_core(&x.view(), &sk, &y, 0.1, 40).unwrap();
            *acc += compute_diagnostics(&x.view(), &sk, &y, 0.1, 40, &uf, uc.as_slice().unwrap()).unwrap().rss_ratio;
        }
    }
    assert!(hi <= lo, "mean rss ratio at 0.3 = {} vs 0.1 = {}", hi / 60.0, lo / 60.0);
}

#[test]
fn predict_is_a_dot_product() {
    let f = FactorPair::new(array![[1.0, 2.0], [0.0, -1.0]], array![[3.0, 0.5], [1.0, 1.0], [0.0, 0.0]]).unwrap();
    assert_eq!(f.predict(0, 0).unwrap(), 4.0);
    assert_eq!(f.predict(1, 1).unwrap(), -1.0);
    assert!(f.predict(2, 0).is_err());
    assert!(f.predict(0, 3).is_err());
}
