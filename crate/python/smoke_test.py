"""Smoke test for the dyhsl_py extension.

Build and install it first, for example with
    maturin develop -m crates/py/Cargo.toml
then run
    python python/smoke_test.py
"""

import math
import os
import tempfile

import dyhsl_py as dy


def main():
    signals, network, membership = dy.synth(nodes=8, communities=2, steps=120, seed=3)
    t, n, f = signals.shape
    assert (t, n, f) == (120, 8, 1)
    assert network.n_nodes == 8 and network.nnz > 0
    assert sorted(set(membership)) == [0, 1]

    model = dy.Model(network, d=8, hyperedges=4, windows=[1, 2, 3], lp=2, ls=1, seed=0)
    assert model.n_parameters > 0
    assert model.config["windows"] == [1, 2, 3]

    history = model.fit(signals, epochs=2, batch_size=8, lr=0.01)
    assert history["steps"] > 0
    assert len(history["history"]) >= 2

    report = model.evaluate(signals, split="test")
    ha = dy.ha_evaluate(signals, split="test")
    for r in (report, ha):
        assert math.isfinite(r["mae"]) and r["rmse"] >= r["mae"]

    window = signals.values()[: 12 * n * f]
    forecast = model.predict(window)
    assert len(forecast) == 12 and all(len(row) == n for row in forecast)
    incidences = model.incidences(window)
    assert [len(m) for m in incidences] == [12 * n, 6 * n, 4 * n]

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = dy.Model.load(path, network)
        assert again.predict(window) == forecast

    try:
        dy.Model(network, windows=[5])
    except ValueError:
        pass
    else:
        raise AssertionError("window 5 does not divide lookback 12")

    results = dy.verify(seed=0)
    assert len(results) >= 6 and all(r["passed"] for r in results), results

    print(f"smoke test ok: test mae {report['mae']:.3f}, ha mae {ha['mae']:.3f}")


if __name__ == "__main__":
    main()
