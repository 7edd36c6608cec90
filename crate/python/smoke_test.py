"""Smoke test for the samplenet Python extension.

Build first, for example:

    cargo build --release -p samplenet-py --features extension-module

The script imports an installed ``samplenet`` module if there is one,
otherwise it loads the freshly built library from target/release.
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import samplenet

        return samplenet
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libsamplenet.so", "libsamplenet.dylib", "samplenet.dll"):
            lib = ROOT / "target" / profile / name
            if lib.exists():
                loader = importlib.machinery.ExtensionFileLoader("samplenet", str(lib))
                spec = importlib.util.spec_from_loader("samplenet", loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                return module
    sys.exit("samplenet extension not found; build it with cargo first")


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    sn = load_module()

    assert close(sn.energy_score([[[0.0, 0.0]]], [[3.0, 4.0]]), 5.0)
    assert close(sn.energy_score([[[-1.0], [1.0]]], [[0.0]]), 0.5)
    assert close(sn.gaussian_nll([[0.0]], [[1.0]], [[0.0]]), 0.5 * math.log(2 * math.pi))
    assert close(sn.sinkhorn_divergence([[0.0]], [[2.0]]), 2.0, 1e-6)

    normed, flags = sn.normalize_samples([[1.0], [2.0], [3.0]], "uniform")
    assert [r[0] for r in normed] == [0.0, 0.5, 1.0] and flags == [False]

    mean, var = sn.sample_moments([[1.0], [3.0]])
    assert mean == [2.0] and var == [2.0]
    lo, hi = sn.central_interval([float(i) for i in range(1, 101)], 0.5)
    assert close(lo, 25.75) and close(hi, 75.25)
    cluster = [0.01 * (i % 10) for i in range(40)] + [10 + 0.01 * (i % 10) for i in range(40)]
    intervals, mass = sn.hpd_intervals(cluster, 0.75)
    assert len(intervals) == 2 and mass >= 0.75
    d, p = sn.ks_two_sided([1.0, 2.0, 3.0, 4.0], [2.0, 3.0, 4.0, 5.0])
    assert close(d, 0.25) and 0.0 <= p <= 1.0

    x, y = sn.gen_unimodal(200, outliers=5, seed=3)
    assert len(x) == len(y) == 205
    rows = [[v / 10.0] for v in x]
    targets = [[v] for v in y]

    model = sn.Model(1, hidden_sizes=[16], m=20, seed=1)
    losses = model.fit(rows, targets, steps=200, batch=64, k=10, eta=0.5, sinkhorn_iters=20)
    assert len(losses) == 200 and all(math.isfinite(v) for v in losses)
    assert sum(losses[-20:]) < sum(losses[:20])
    samples = model.sample(rows[:3])
    assert len(samples) == 3 and len(samples[0]) == 20 and len(samples[0][0]) == 1
    es, nll, rmse = model.evaluate(rows, targets)
    assert all(math.isfinite(v) for v in (es, nll, rmse))

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        model.save(path)
        again = sn.Model.load(path)
        assert again.sample(rows[:3]) == samples

    baseline = sn.Model(1, hidden_sizes=[16], gaussian=True, seed=2)
    baseline.fit(rows, targets, steps=100, beta=0.5)
    mean, var = baseline.predict_gaussian(rows[:2])
    assert all(v[0] > 0 for v in var)

    try:
        sn.energy_score([[[0.0]]], [[1.0, 2.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch should raise ValueError")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
