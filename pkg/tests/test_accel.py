"""Kernel backend selection and agreement of the numba/numpy twins."""

from __future__ import annotations

import os
import subprocess
import sys

import numpy as np

from bschsim import _accel


def test_backend_name_matches_selection() -> None:
    assert _accel.active_backend() in ("numba", "numpy")
    if _accel.USE_NUMBA:
        assert _accel.resolvent_log is _accel.resolvent_log_numba
    else:
        assert _accel.resolvent_log is _accel.resolvent_log_numpy


def test_twin_implementations_agree_to_machine_precision() -> None:
    rng = np.random.default_rng(1234)
    samples = np.concatenate([
        rng.uniform(-4.0, 4.0, size=4096),
        np.array([0.0, 1.0, -1.0, 5.0, -5.0, 0.999, -0.999]),
    ])
    for lam in (1.0, 0.1, 0.01, 1e-3):
        fast = _accel.resolvent_log_numba(samples, lam, 1.0)
        plain = _accel.resolvent_log_numpy(samples, lam, 1.0)
        assert np.max(np.abs(fast - plain)) <= 1e-14


def test_env_flag_forces_numpy_backend() -> None:
    env = dict(os.environ)
    env["BSCHSIM_NO_NUMBA"] = "1"
    out = subprocess.run(
        [sys.executable, "-c",
         "from bschsim import _accel; print(_accel.active_backend())"],
        env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_shapes_and_scalars_round_trip() -> None:
    grid = np.linspace(-2.0, 2.0, 12).reshape(3, 4)
    out = _accel.resolvent_log(grid, 0.1, 1.0)
    assert out.shape == (3, 4)
    flat = _accel.resolvent_log(grid.ravel(), 0.1, 1.0)
    assert np.array_equal(out.ravel(), flat)
