"""Exercises the bindings end to end; exits non-zero on any failure."""

import math

import coreals


def main():
    ratings, truth = coreals.synth(80, 60, rank=4, alpha=0.5, seed=3)
    assert ratings.nnz == 2400, ratings
    assert len(truth) == 80 and len(truth[0]) == 60

    train, test = ratings.split(0.2, seed=1)
    assert train.nnz + len(test) == ratings.nnz

    f_full, rep_full = coreals.fit(train, method="full", rank=4, max_iters=6, tol=1e-9, threads=1)
    f_core, rep_core = coreals.fit(train, method="core", rate=1.0, rank=4, max_iters=6, tol=1e-9, threads=1)
    assert rep_full.objective_trace == rep_core.objective_trace
    assert all(b <= a for a, b in zip(rep_full.objective_trace, rep_full.objective_trace[1:]))

    f, rep = coreals.fit(train, method="core", rate=0.3, rank=4, max_iters=20)
    print(rep)
    heldout = [(u, i, truth[u][i]) for (u, i, _) in test]
    for name, value in [
        ("rmse", coreals.rmse(train, f)),
        ("prmse", coreals.prmse(heldout, f)),
        ("hit@5", coreals.hit_at_k(test, f, k=5)),
        ("ndcg@10", coreals.ndcg_at_k(test, f, k=10)),
    ]:
        assert math.isfinite(value), (name, value)
        print(f"{name}: {value:.4f}")

    sk = coreals.ces_sketch([[3.0, -1.0], [-5.0, 0.5], [1.0, 2.0], [0.0, -4.0]], 0.5)
    assert sk == [[3.0, 0.0], [-5.0, 0.0], [0.0, 2.0], [0.0, -4.0]], sk

    a = [[0.5] * 4 for _ in range(3)]
    b = [[0.6] * 4 for _ in range(3)]
    assert abs(coreals.psnr(a, b) - 20.0) < 1e-9

    try:
        coreals.fit(train, method="core", rate=1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid rate accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
