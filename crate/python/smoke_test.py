"""Smoke test for the ghive_py extension module.

Build first with `cargo build --release -p ghive-py`. The script imports
`ghive_py` from the path if it is installed, otherwise it loads
target/release/libghive_py.so through a temporary copy named ghive_py.so.
"""

import math
import pathlib
import shutil
import sys
import tempfile


def load():
    try:
        import ghive_py  # noqa: F401
    except ImportError:
        root = pathlib.Path(__file__).resolve().parent.parent
        lib = root / "target" / "release" / "libghive_py.so"
        if not lib.exists():
            sys.exit(f"{lib} not found; run `cargo build --release -p ghive-py`")
        tmp = tempfile.mkdtemp()
        shutil.copy(lib, pathlib.Path(tmp) / "ghive_py.so")
        sys.path.insert(0, tmp)
    import ghive_py

    return ghive_py


def main():
    g = load()

    b, b1, b2 = g.cumulant("bernoulli", 0.0)
    assert abs(b - math.log(2.0)) < 1e-12 and b1 == 0.5 and b2 == 0.25
    assert abs(g.quasi_loglik_term("gaussian", 1.0, 1.0) - 0.5) < 1e-12

    d1, d2 = g.make_split(11, seed=3)
    assert len(d1) == 6 and len(d2) == 5 and sorted(d1 + d2) == list(range(11))

    x, y, truth = g.simulate(150, 4, 4, 3, 4.0, "bernoulli", seed=7)
    assert len(x) == 150 and len(x[0]) == 4 and set(v for row in y for v in row) <= {0.0, 1.0}

    fit = g.ghive_fit(x, y, "bernoulli", seed=1)
    assert len(fit.theta_hat) == 4 and len(fit.theta_hat[0]) == 4
    assert 1 <= fit.k_hat <= 3
    again = g.Fit.from_json(fit.to_json())
    assert again.theta_hat == fit.theta_hat

    ci = g.confidence_interval(fit, x, y, [1, 0, 0, 0], [1, 0, 0, 0], alpha=0.05)
    assert ci["ci_lo"] <= ci["estimate"] <= ci["ci_hi"]
    assert abs((ci["ci_hi"] - ci["estimate"]) - 1.959964 * ci["se"]) < 1e-5 * (1 + ci["se"])
    assert ci["estimate"] == fit.theta_hat[0][0]

    ident = [[float(i == j) for j in range(4)] for i in range(4)]
    oracle = g.ghive_fit(x, y, "bernoulli", seed=1, projector=ident)
    assert oracle.theta_hat == oracle.f_hat

    naive = g.fit_naive_mle(x, y, "bernoulli")
    assert len(naive) == 4

    try:
        import numpy as np
    except ImportError:
        np = None
    if np is not None:
        from_np = g.ghive_fit(np.asarray(x), np.asarray(y), "bernoulli", seed=1)
        assert from_np.theta_hat == fit.theta_hat

    try:
        g.ghive_fit(x, [[2.0] * 4] * 150, "bernoulli")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid responses were accepted")

    print(f"ok: {fit!r}, estimate {ci['estimate']:.4f} in [{ci['ci_lo']:.4f}, {ci['ci_hi']:.4f}]")


if __name__ == "__main__":
    main()
