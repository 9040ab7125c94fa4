import os
import subprocess
import sys

import numpy as np
import pytest

from trpoppo import kernels
from trpoppo.kernels import NUMBA_KERNELS, NUMPY_KERNELS


def test_gae_paths_agree():
    rng = np.random.default_rng(0)
    for n in (1, 7, 500):
        r, v = rng.normal(size=n), rng.normal(size=n)
        d = (rng.random(n) < 0.2).astype(float)
        a = NUMPY_KERNELS["gae"](r, v, d, 0.3, 0.99, 0.95)
        b = NUMBA_KERNELS["gae"](r, v, d, 0.3, 0.99, 0.95)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_auprc_paths_agree_with_ties():
    rng = np.random.default_rng(1)
    for _ in range(20):
        scores = np.sort(np.round(rng.normal(size=300), 1))[::-1].copy()
        labels = (rng.random(300) < 0.3).astype(float)
        labels[0] = 1.0
        a = NUMPY_KERNELS["auprc"](scores, labels)
        b = NUMBA_KERNELS["auprc"](scores, labels)
        assert abs(a - b) < 1e-12


def test_adam_paths_agree_over_many_steps():
    rng = np.random.default_rng(2)
    n = 257
    states = [[rng.normal(size=n), np.zeros(n), np.zeros(n)] for _ in range(2)]
    states[1][0] = states[0][0].copy()
    for step in range(1, 31):
        g = rng.normal(size=n)
        NUMPY_KERNELS["adam"](*states[0][:1], g, *states[0][1:], 1e-2, 0.9, 0.999, 1e-8, step)
        NUMBA_KERNELS["adam"](*states[1][:1], g, *states[1][1:], 1e-2, 0.9, 0.999, 1e-8, step)
    for a, b in zip(*states):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_dispatch_wrappers_coerce_inputs():
    adv = kernels.gae([1, 0, 2], [0, 0, 0], [0, 0, 1], 0, 1.0, 1.0)
    np.testing.assert_allclose(adv, [3.0, 2.0, 2.0])
    assert kernels.auprc_sorted([3, 2, 1], [1, 0, 1]) == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3))


@pytest.mark.parametrize("flag,expected", [("0", "False"), ("off", "False"), ("1", "True")])
def test_env_flag_selects_path(flag, expected):
    code = "from trpoppo import kernels; print(kernels.USE_NUMBA, kernels._ACTIVE is kernels.NUMPY_KERNELS)"
    env = dict(os.environ, TRPOPPO_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
    assert out[0] == expected
    assert out[1] == str(expected == "False")


def test_gae_identical_under_either_flag():
    code = (
        "import numpy as np; from trpoppo import kernels;"
        "r=np.linspace(-1,1,50); d=np.zeros(50); d[24]=1;"
        "print(repr(float(kernels.gae(r, np.sin(r), d, 0.5, 0.99, 0.95).sum())))"
    )
    sums = []
    for flag in ("0", "1"):
        env = dict(os.environ, TRPOPPO_NUMBA=flag)
        sums.append(float(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout))
    assert abs(sums[0] - sums[1]) < 1e-12
