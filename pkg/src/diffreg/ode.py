"""Embedded Runge-Kutta integration (Dormand-Prince 5(4)).

``integrate`` is an adaptive solver with mixed relative/absolute error
control. ``begin_step`` lets the caller refresh per-step context (for
example a rebuilt neighbor graph) before each attempted step; the context is
then held fixed for all stages of that step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StepFailure

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B_HIGH = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
B_LOW = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])

SAFETY = 0.9
# local error is held to this fraction of the requested tolerances so that the
# accumulated (global) error over the interval stays within them
LOCAL_TOL_FRACTION = 0.2
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0


@dataclass
class SolveStats:
    accepted: int = 0
    rejected: int = 0
    nfe: int = 0
    steps: list = field(default_factory=list)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x)))) if np.size(x) else 0.0


def _stages(f, t, y, h, k1):
    ks = [k1]
    for i in range(1, 7):
        incr = sum(a * k for a, k in zip(A[i], ks) if a != 0.0)
        ks.append(f(t + C[i] * h, y + h * incr))
    y_high = y + h * sum(b * k for b, k in zip(B_HIGH, ks) if b != 0.0)
    y_low = y + h * sum(b * k for b, k in zip(B_LOW, ks) if b != 0.0)
    return y_high, y_low, ks


def _initial_step(f, t0, y0, f0, rtol, atol):
    scale = atol + np.abs(y0) * rtol
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    f1 = f(t0 + h0, y0 + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1)


def integrate(f, y0, t_final, rtol=0.01, atol=0.01, *, begin_step=None,
              first_step=None, min_step=1e-8, max_step=1.0, max_steps=100_000, stats=None):
    """Integrate ``dy/dt = f(t, y)`` from 0 to ``t_final``.

    ``rtol``/``atol`` bound the error of the returned solution, not of a
    single step: the per-step estimate is compared against
    ``LOCAL_TOL_FRACTION`` times the tolerances. Steps are also capped at
    ``max_step`` because for long steps the embedded estimate falls well
    below the true local error.

    Raises:
        StepFailure: when the controller shrinks the step below ``min_step``.
    """
    y = np.array(y0, dtype=np.float64, copy=True)
    stats = stats if stats is not None else SolveStats()
    rtol, atol = rtol * LOCAL_TOL_FRACTION, atol * LOCAL_TOL_FRACTION
    if t_final <= 0:
        return y, stats

    def call(tt, yy):
        stats.nfe += 1
        return f(tt, yy)

    t = 0.0
    if begin_step is not None:
        begin_step(t, y)
    k1 = call(t, y)
    h = first_step if first_step is not None else _initial_step(call, t, y, k1, rtol, atol)
    for _ in range(max_steps):
        if t >= t_final:
            break
        h = min(h, max_step, t_final - t)
        if h < min_step and t_final - t > min_step:
            raise StepFailure(f"step size {h:.3g} underflowed at t={t:.6g}")
        y_high, y_low, ks = _stages(call, t, y, h, k1)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_high))
        err = _rms((y_high - y_low) / scale)
        if not np.isfinite(err):
            stats.rejected += 1
            h *= MIN_FACTOR
            continue
        if err <= 1.0:
            t = t_final if t_final - (t + h) < 1e-12 * t_final else t + h
            y = y_high
            stats.accepted += 1
            stats.steps.append(h)
            if t >= t_final:
                break
            if begin_step is not None:
                begin_step(t, y)
                k1 = call(t, y)
            else:
                k1 = ks[6]
        else:
            stats.rejected += 1
        factor = MAX_FACTOR if err == 0 else SAFETY * err ** (-1.0 / 5.0)
        h *= min(MAX_FACTOR, max(MIN_FACTOR, factor))
    else:
        raise StepFailure("maximum number of steps exceeded")
    return y, stats


def integrate_fixed(f, y0, t_final, n_steps, order="high"):
    """Fixed-step integration with either solution of the embedded pair."""
    y = np.array(y0, dtype=np.float64, copy=True)
    h = t_final / n_steps
    t = 0.0
    for _ in range(n_steps):
        y_high, y_low, _ = _stages(f, t, y, h, f(t, y))
        y = y_high if order == "high" else y_low
        t += h
    return y
