"""Smoke test for the `dgp` Python extension.

Build and run from the repository root:

    cargo build --release -p dgp-py --features extension-module
    cp target/release/libdgp.so python/dgp.so
    python python/smoke_test.py
"""

import os
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dgp  # noqa: E402


def main():
    err = dgp.manufactured_error(32)
    assert 0.0 < err < 0.05, err

    spec = dgp.FieldSpec(grid=16, out_grid=8, k_xi=10)
    data = spec.generate(40, seed=1)
    assert data["K"].shape == (40, 256)
    assert data["p"].shape == (40, 64)
    again = spec.generate(40, seed=1)
    assert np.array_equal(data["p"], again["p"])

    x, y = data["K"][:30], data["p"][:30]
    model = dgp.DeepGP.train(x, y, dims=[3, 3], inducing=[10, 10], iters=20, seed=0,
                             log_inputs=True, shared_lengthscale=True)
    trace = model.elbo_trace()
    assert np.all(np.diff(trace) >= -1e-6)
    assert [len(w) for w in model.ard_weights()] == [3, 3]

    mean, var = model.predict(data["K"][30:])
    assert mean.shape == (10, 64) and var.shape == (10, 64)
    assert np.all(var > 0)
    rmse = np.sqrt(np.mean((mean - data["p"][30:]) ** 2))
    spread = np.std(data["p"][30:])
    print(f"held-out RMSE {rmse:.4f} (output sd {spread:.4f})")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        model.save(path)
        back = dgp.DeepGP.load(path)
        m2, v2 = back.predict(data["K"][30:])
        assert np.array_equal(mean, m2) and np.array_equal(var, v2)

    report = model.uq(spec, inner=20, repeats=5, seed=3)
    assert report["mean_of_mean"].shape == (64,)
    assert np.all(report["errorbar_mean"] >= 0)
    assert np.all(report["mean_of_variance"] >= 0)

    try:
        model.predict(np.ones((2, 5)))
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch was accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
