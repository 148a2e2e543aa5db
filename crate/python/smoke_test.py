"""Smoke test for the Python bindings.

Build and install the module first, e.g. ``maturin develop -m crates/py/Cargo.toml``.
"""

import math
import tempfile

import sals


def main():
    train, test, truth = sals.generate([20, 18, 16], 3000, 3, noise=0.05, test_fraction=0.1, seed=1)
    assert train.nnz == 2700 and len(test) == 300
    assert train.dims == [20, 18, 16]

    model, history = sals.factorize(
        train, 3, columns=2, outer_iters=15, lambda_=0.01, seed=2, test=test
    )
    assert len(history) == 15
    assert history[-1]["train_loss"] <= history[0]["train_loss"]
    err = sals.rmse(model, test)
    assert math.isclose(err, history[-1]["test_rmse"], rel_tol=1e-12)
    print(f"sals  test rmse {err:.4f} (truth {sals.rmse(truth, test):.4f})")

    als, _ = sals.factorize(train, 3, alg="als", outer_iters=3)
    same, _ = sals.factorize(train, 3, columns=3, inner_iters=1, outer_iters=3)
    assert als == same

    cd, _ = sals.factorize(train, 3, alg="cdtf", outer_iters=15, lambda_=0.01, test=test)
    print(f"cdtf  test rmse {sals.rmse(cd, test):.4f}")

    sgd, _ = sals.psgd(train, 3, lambda_=0.01, eta0=0.01, outer_iters=15, shards=2, test=test)
    print(f"psgd  test rmse {sals.rmse(sgd, test):.4f}")

    dist, hist, log = sals.run_distributed(train, 3, 3, columns=2, outer_iters=3, seed=4)
    serial, _ = sals.factorize(train, 3, columns=2, outer_iters=3, seed=4)
    assert dist == serial
    sent = sum(r[2] for r in log if r[0] == 1)
    assert sent == hist[0]["params_sent"] == 3 * sum(train.dims)

    stats = {s: sals.partition_stats(train, 4, s) for s in ("greedy", "sequential", "random")}
    for mode in range(3):
        assert stats["greedy"][mode]["max_entries"] <= stats["sequential"][mode]["max_entries"]

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        assert sals.FactorModel.load(d, model.lambda_) == model
        train.to_coo(f"{d}/train.coo")
        assert sals.TensorStore.from_coo(f"{d}/train.coo").entries() == train.entries()

    try:
        sals.factorize(train, 3, columns=5)
    except ValueError:
        pass
    else:
        raise AssertionError("columns > rank accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
