"""The compiled kernels and their numpy fallback must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from ogclab import _pykernels, kernels

try:
    from ogclab import _ckernels
except ImportError:  # pragma: no cover - only when the extension was not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def em_inputs(seed=0):
    rng = np.random.default_rng(seed)
    x = np.abs(np.concatenate([rng.normal(0.5, 0.2, 700), rng.normal(2.5, 0.6, 300)]))
    return x, np.quantile(x, [0.25, 0.75]), np.full(2, x.var()), np.array([0.5, 0.5])


def ratio_inputs(seed=0):
    rng = np.random.default_rng(seed)
    h = np.linspace(0, 5, 1024)
    return np.exp(h), rng.random(1024), rng.random(1024)


@needs_ext
@pytest.mark.parametrize("seed", range(4))
def test_em_agrees(seed):
    args = em_inputs(seed)
    a = _ckernels.em_fit(*args, 100, 1e-6, 1e-4)
    b = _pykernels.em_fit(*args, 100, 1e-6, 1e-4)
    assert a[4] == b[4]
    for u, v in zip(a[:4], b[:4]):
        np.testing.assert_allclose(u, v, rtol=1e-9)


@needs_ext
def test_ratio_agrees():
    g, wc, wn = ratio_inputs()
    taus = np.array([1.0, 1.5, 2.0, 10.0, 150.0])
    a = _ckernels.clipped_ratios(g, wc, wn, taus)
    b = _pykernels.clipped_ratios(g, wc, wn, taus)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    for t, r in zip(taus, b):
        assert _ckernels.clipped_ratio(g, wc, wn, t) == pytest.approx(r, rel=1e-12)
        assert _pykernels.clipped_ratio(g, wc, wn, t) == pytest.approx(r, rel=1e-12)


def test_ratio_reference():
    g, wc, wn = ratio_inputs(1)
    c = np.minimum(g, 3.0)
    expect = (np.sum(wn * c) / np.sum(wn)) / (np.sum(wc * c) / np.sum(wc))
    assert kernels.clipped_ratio(g, wc, wn, 3.0) == pytest.approx(expect, rel=1e-12)


def test_zero_clean_weight_raises():
    g, _, wn = ratio_inputs()
    with pytest.raises(ZeroDivisionError):
        kernels.clipped_ratio(g, np.zeros_like(g), wn, 2.0)


def test_env_forces_fallback():
    code = "from ogclab import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, OGCLAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.strip() == "python"


@needs_ext
def test_default_backend_is_compiled():
    if os.environ.get("OGCLAB_PURE_PYTHON", "") not in ("", "0"):
        pytest.skip("fallback forced by environment")
    assert kernels.BACKEND == "cython"
