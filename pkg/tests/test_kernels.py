import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lyari import _kernels_py, kernels
from lyari.oracle import GridSpec, oracle_slot
from lyari.source_dprd import entropy_rate

compiled = pytest.importorskip("lyari._kernels", reason="compiled core not built")


@given(st.lists(st.floats(min_value=1e-6, max_value=60.0), min_size=1, max_size=50),
       st.floats(min_value=0.0, max_value=0.9))
def test_entropy_parity(xs, mu):
    a = compiled.entropy_rate_batch(np.array(xs), mu)
    b = _kernels_py.entropy_rate_batch(np.array(xs), mu)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-300)
    np.testing.assert_allclose(b, [entropy_rate(x, mu) for x in xs], rtol=1e-13)


def test_entropy_rejects_nonpositive():
    for impl in (compiled, _kernels_py):
        with pytest.raises(ValueError):
            impl.entropy_rate_batch(np.array([1.0, 0.0]), 0.1)


def test_entropy_keeps_shape():
    x = np.linspace(0.5, 3.0, 6).reshape(2, 3)
    assert compiled.entropy_rate_batch(x, 0.1).shape == (2, 3)


def random_grid(rng, nl=5, nq=7, npt=11):
    return dict(
        re_term=rng.uniform(0, 2, (nl, nq)), de=rng.uniform(0, 0.01, (nl, nq)), dly=rng.uniform(1.5, 3.0, (nl, nq)),
        rc_term=rng.uniform(0, 1, npt), dc=rng.uniform(0, 0.5, npt), ptot=rng.uniform(1400, 2100, npt),
        tsend=rng.uniform(0.0, 0.4, npt),
    )


@pytest.mark.parametrize("seed", range(20))
def test_grid_search_parity(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng)
    args = (float(rng.uniform(0, 2)), g["re_term"], g["de"], g["dly"], g["rc_term"], g["dc"], g["ptot"], g["tsend"],
            4.0, 2.0, 0.01, 2.8, 0.2, 2000.0)
    a = compiled.grid_search(*args)
    b = _kernels_py.grid_search(*args)
    assert a[0] == b[0] and a[2:] == b[2:]
    assert a[1] == pytest.approx(b[1], rel=1e-14)


def test_grid_search_ties_go_first():
    z2, z1 = np.zeros((2, 2)), np.zeros(3)
    for impl in (compiled, _kernels_py):
        idx, obj, n, *_ = impl.grid_search(0.0, z2, z2, z2, z1, z1, z1, z1, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
        assert (idx, obj, n) == (0, 0.0, 12)


def test_grid_search_infeasible_counts():
    z2, z1 = np.zeros((2, 2)), np.zeros(3)
    for impl in (compiled, _kernels_py):
        idx, obj, n, nt, nd, npw = impl.grid_search(0.0, z2, z2, z2, z1, z1, z1 + 5.0, z1 + 2.0,
                                                    1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
        assert idx == -1 and obj == np.inf and n == 0
        assert (nt, nd, npw) == (12, 12, 12)


def test_pure_python_switch():
    env = dict(os.environ, LYARI_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import lyari; print(lyari.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND == "cython"


def test_pure_python_oracle_agrees(baseline, baseline_run):
    code = (
        "import json; from lyari import load_baseline, run_horizon\n"
        "from lyari.oracle import GridSpec, oracle_slot\n"
        "sc = load_baseline(); S, cfg = sc.system, sc.optimizer\n"
        "r = run_horizon(S, cfg, 3, sc.X1)[-1]\n"
        "o = oracle_slot(S, cfg, r.geometry.path_loss, max(r.X_before, 0.0), GridSpec.default(S, cfg, 60))\n"
        "print(json.dumps([o.lam, o.qp, o.Pt, o.objective, o.n_feasible]))"
    )
    env = dict(os.environ, LYARI_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    r = baseline_run[2]
    S, cfg = baseline.system, baseline.optimizer
    o = oracle_slot(S, cfg, r.geometry.path_loss, max(r.X_before, 0.0), GridSpec.default(S, cfg, 60))
    lam, qp, pt, obj, n = json.loads(out.stdout)
    assert (lam, qp, pt, n) == (o.lam, o.qp, o.Pt, o.n_feasible)
    assert obj == pytest.approx(o.objective, rel=1e-13)
