use coreals::ces::sketch_gram;
use coreals::config::retained_count;
use coreals::linalg::slice_rows;
use coreals::metrics::{hit_at_k_with, ndcg_at_k_with};
use coreals::{
    ces_sketch, fit, prmse, rmse, split_holdout, FactorPair, HoldoutSplit, Method, RatingMatrix, SolverConfig, TestSets,
};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(n, p)| {
        // Coarse values so ties are common.
        prop::collection::vec((-4i32..=4).prop_map(|v| v as f64 * 0.5), n * p)
            .prop_map(move |v| Array2::from_shape_vec((n, p), v).unwrap())
    })
}

fn ratings() -> impl Strategy<Value = RatingMatrix> {
    (1usize..12, 1usize..12).prop_flat_map(|(nu, nm)| {
        prop::collection::btree_map((0..nu, 0..nm), (1u8..=10).prop_map(|v| v as f64 * 0.5), 1..=nu * nm).prop_map(
            move |cells| {
                let e: Vec<_> = cells.into_iter().map(|((u, m), r)| (u, m, r)).collect();
                RatingMatrix::new(nu, nm, &e).unwrap()
            },
        )
    })
}

fn per_user_tests() -> impl Strategy<Value = (TestSets, Vec<Vec<f64>>)> {
    prop::collection::vec(
        prop::collection::vec(((0u8..5).prop_map(f64::from), (0u8..6).prop_map(f64::from)), 1..=8),
        1..=6,
    )
    .prop_map(|users| {
        let mut test = Vec::new();
        let mut scores = Vec::new();
        for (u, items) in users.iter().enumerate() {
            scores.push(items.iter().map(|p| p.1).collect());
            for (i, &(truth, _)) in items.iter().enumerate() {
                test.push((u, i, truth));
            }
        }
        (TestSets::with_threshold(users.len(), &test, 3.0).unwrap(), scores)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sketch_keeps_a_top_budget_per_column(x in matrix(30, 4), rate in 0.01f64..=1.0) {
        let sk = ces_sketch(&x.view(), rate).unwrap();
        let s = retained_count(x.nrows(), rate).min(x.nrows());
        for c in 0..x.ncols() {
            let (rows, vals) = sk.column(c);
            prop_assert_eq!(rows.len(), s);
            let mut mags: Vec<f64> = x.column(c).iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.total_cmp(a));
            let kept: f64 = vals.iter().map(|v| v.abs()).sum();
            let best: f64 = mags[..s].iter().sum();
            prop_assert_eq!(kept, best);
            let cutoff = mags[s - 1];
            for (&r, &v) in rows.iter().zip(vals) {
                prop_assert_eq!(v, x[[r as usize, c]]);
                prop_assert!(v.abs() >= cutoff);
            }
            // Among entries tied at the cutoff, the smallest rows win.
            let tied_kept: Vec<u32> = rows.iter().copied().filter(|&r| x[[r as usize, c]].abs() == cutoff).collect();
            let tied_all: Vec<u32> = (0..x.nrows() as u32).filter(|&r| x[[r as usize, c]].abs() == cutoff).collect();
            prop_assert_eq!(&tied_all[..tied_kept.len()], &tied_kept[..]);
        }
    }

    #[test]
    fn sketch_gram_matches_dense(x in matrix(20, 5), rate in 0.05f64..=1.0) {
        let sk = ces_sketch(&x.view(), rate).unwrap();
        let got = sketch_gram(&sk, &x.view()).unwrap();
        let want = sk.to_dense().t().dot(&x);
        for (a, b) in got.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_preserves_entries(r in ratings()) {
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let back = RatingMatrix::read_csv(buf.as_slice()).unwrap();
        let mut a: Vec<_> = r.entries().map(|e| (r.user_ids().id_of(e.user).to_string(), r.item_ids().id_of(e.item).to_string(), e.rating)).collect();
        let mut b: Vec<_> = back.entries().map(|e| (back.user_ids().id_of(e.user).to_string(), back.item_ids().id_of(e.item).to_string(), e.rating)).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn column_index_is_the_row_index_transposed(r in ratings()) {
        for m in 0..r.n_items() {
            let (users, vals) = r.item_ratings(m);
            let brute: Vec<(u32, f64)> = (0..r.n_users())
                .filter_map(|u| {
                    let (items, v) = r.user_ratings(u);
                    items.iter().position(|&i| i as usize == m).map(|k| (u as u32, v[k]))
                })
                .collect();
            prop_assert_eq!(users.iter().copied().zip(vals.iter().copied()).collect::<Vec<_>>(), brute);
        }
    }

    #[test]
    fn holdout_partitions_entries(r in ratings(), frac in 0.01f64..0.9, seed in any::<u64>()) {
        prop_assume!(((frac * r.nnz() as f64).round() as usize) < r.nnz());
        let split = split_holdout(&r, frac, seed).unwrap();
        let mut all: Vec<_> = split.train.triples();
        all.extend(split.test.iter().copied());
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut src = r.triples();
        src.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(all, src);
        prop_assert_eq!(split.test.len(), (frac * r.nnz() as f64).round() as usize);
        let again = split_holdout(&r, frac, seed).unwrap();
        prop_assert_eq!(&again.test, &split.test);
        let mut buf = Vec::new();
        split.write_manifest(&mut buf).unwrap();
        let back = HoldoutSplit::read_manifest(buf.as_slice()).unwrap();
        prop_assert_eq!(back.train.nnz(), split.train.nnz());
        prop_assert_eq!(back.test.len(), split.test.len());
    }

    #[test]
    fn slice_rows_copies_selected_rows(x in matrix(8, 3), picks in prop::collection::vec(0usize..8, 0..10)) {
        let idx: Vec<usize> = picks.into_iter().filter(|&i| i < x.nrows()).collect();
        let s = slice_rows(&x, &idx).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            prop_assert_eq!(s.row(k), x.row(i));
        }
    }

    #[test]
    fn ranking_metrics_are_bounded_and_order_invariant((sets, scores) in per_user_tests(), k in 1usize..6) {
        let score = |u: usize, i: usize| scores[u][i];
        let warped = |u: usize, i: usize| (scores[u][i] * 0.7).exp() - 3.0;
        if let Ok(h) = hit_at_k_with(&sets, k, score) {
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert_eq!(h, hit_at_k_with(&sets, k, warped).unwrap());
        }
        if let Ok(n) = ndcg_at_k_with(&sets, k, score) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
            prop_assert!((n - ndcg_at_k_with(&sets, k, warped).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_errors_ignore_common_scale(r in ratings(), c in 0.1f64..10.0, seed in 0u64..1000) {
        let rank = 2;
        let f = FactorPair::new(
            Array2::from_shape_fn((r.n_users(), rank), |(i, j)| ((i * 7 + j * 3 + seed as usize) % 5) as f64 * 0.3),
            Array2::from_shape_fn((r.n_items(), rank), |(i, j)| ((i * 5 + j + 1) % 4) as f64 * 0.4),
        ).unwrap();
        let scaled_r = RatingMatrix::new(r.n_users(), r.n_items(), &r.triples().iter().map(|&(u, m, v)| (u, m, v * c)).collect::<Vec<_>>()).unwrap();
        let scaled_f = FactorPair::new(&f.users * c, f.items.clone()).unwrap();
        let a = rmse(&r, &f).unwrap();
        prop_assert!((a - rmse(&scaled_r, &scaled_f).unwrap()).abs() <= 1e-12 * (1.0 + a));
        let held = r.triples();
        let scaled_held: Vec<_> = held.iter().map(|&(u, m, v)| (u, m, v * c)).collect();
        let p = prmse(&held, &f).unwrap();
        prop_assert!((p - prmse(&scaled_held, &scaled_f).unwrap()).abs() <= 1e-12 * (1.0 + p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_fit_objective_is_monotone(r in ratings(), rank in 1usize..4, lambda in 0.01f64..1.0, seed in any::<u64>()) {
        let cfg = SolverConfig::new(Method::Full, rank, lambda).with_max_iters(10).with_tol(1e-12).with_seed(seed);
        let (f, rep) = fit(&r, &cfg).unwrap();
        prop_assert!(f.is_finite());
        for w in rep.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", rep.objective_trace);
        }
    }

    #[test]
    fn core_at_full_rate_is_the_full_fit(r in ratings(), rank in 1usize..4, seed in any::<u64>()) {
        let base = SolverConfig::new(Method::Full, rank, 0.1).with_max_iters(5).with_tol(1e-12).with_seed(seed).with_threads(1);
        let (ff, full) = fit(&r, &base).unwrap();
        for m in [Method::Core, Method::FastCore] {
            let (fc, core) = fit(&r, &SolverConfig { method: m, ..base.clone() }).unwrap();
            prop_assert_eq!(&core.objective_trace, &full.objective_trace);
            prop_assert_eq!(&fc, &ff);
        }
    }
}
