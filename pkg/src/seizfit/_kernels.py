"""Compiled Dormand-Prince loop for the built-in models.

Mirrors :func:`seizfit.integrator.integrate` step for step (same tableau,
controller, negativity rule and output interpolation) but runs the model
right-hand sides inside numba. The fitter solves thousands of trajectories,
which the interpreted loop cannot afford.
"""
import numpy as np
from numba import njit

from .integrator import A, B, C, E, MAX_FACTOR, MIN_FACTOR, P, PI_ALPHA, PI_BETA, SAFETY

KIND_CODES = {"sis": 0, "sir": 1, "seiz": 2}

STATUS_OK = 0
STATUS_BUDGET = 1
STATUS_STIFF = 2
STATUS_NUMERIC = 3

_A = np.zeros((7, 7))
for _i, _row in enumerate(A):
    _A[_i, : len(_row)] = _row


@njit(cache=True)
def _derivs(kind, y, theta, n, out):
    m = y.shape[0]
    for j in range(m):
        if kind == 0:
            s = y[j, 0]
            i = y[j, 1]
            flow = theta[j, 0] * s * i - theta[j, 1] * i
            out[j, 0] = -flow
            out[j, 1] = flow
        elif kind == 1:
            infection = theta[j, 0] * y[j, 0]
            recovery = theta[j, 1] * y[j, 1]
            out[j, 0] = -infection
            out[j, 1] = infection - recovery
            out[j, 2] = recovery
        else:
            s = y[j, 0]
            e = y[j, 1]
            i = y[j, 2]
            z = y[j, 3]
            nn = n[j]
            p = theta[j, 3]
            l = theta[j, 4]
            s_meets_i = theta[j, 0] * s * i / nn
            s_meets_z = theta[j, 1] * s * z / nn
            e_meets_i = theta[j, 2] * e * i / nn
            incubation = theta[j, 5] * e
            out[j, 0] = -s_meets_i - s_meets_z
            out[j, 1] = (1 - p) * s_meets_i + (1 - l) * s_meets_z - e_meets_i - incubation
            out[j, 2] = p * s_meets_i + e_meets_i + incubation
            out[j, 3] = l * s_meets_z


@njit(cache=True)
def _rms_worst(x):
    worst = 0.0
    m, c = x.shape
    for j in range(m):
        acc = 0.0
        for q in range(c):
            acc += x[j, q] * x[j, q]
        v = np.sqrt(acc / c)
        if v > worst or np.isnan(v):
            worst = v
    return worst


@njit(cache=True)
def _scaled(num, y, rtol, atol):
    m, c = num.shape
    res = np.empty((m, c))
    for j in range(m):
        for q in range(c):
            sc = atol + rtol * abs(y[j, q])
            if sc > 0:
                res[j, q] = num[j, q] / sc
            else:
                res[j, q] = 0.0
    return res


@njit(cache=True)
def _dense(t0, h, y0, y1, k, t_end, t, coef, out):
    if t == t0:
        out[:, :] = y0
        return
    if t == t_end:
        out[:, :] = y1
        return
    s = (t - t0) / h
    powers = np.array([s, s * s, s**3, s**4])
    w = coef @ powers
    out[:, :] = y0
    for i in range(7):
        out[:, :] += h * w[i] * k[i]


@njit(cache=True)
def dopri(kind, theta, n, y0, t0, times, rtol, atol, h_init, h_max, max_steps, a, b, c, e, coef):
    m, nc = y0.shape
    nt = times.shape[0]
    out = np.empty((nt, m, nc))
    accepted = 0
    rejected = 0
    n_rhs = 0
    idx = 0
    while idx < nt and times[idx] == t0:
        out[idx] = y0
        idx += 1

    t = t0
    t_final = times[nt - 1]
    y = y0.copy()
    f = np.empty((m, nc))
    _derivs(kind, y, theta, n, f)
    n_rhs += 1
    for j in range(m):
        for q in range(nc):
            if not np.isfinite(f[j, q]):
                return out, STATUS_NUMERIC, idx, accepted, rejected, n_rhs

    h = 0.0
    if idx < nt:
        if h_init > 0:
            h = min(h_init, t_final - t)
        else:
            span = t_final - t
            d0 = _rms_worst(_scaled(y, y, rtol, atol))
            d1 = _rms_worst(_scaled(f, y, rtol, atol))
            if d0 < 1e-5 or d1 < 1e-5:
                h0 = 1e-6
            else:
                h0 = 0.01 * d0 / d1
            h0 = min(h0, span)
            y1 = y + h0 * f
            f1 = np.empty((m, nc))
            _derivs(kind, y1, theta, n, f1)
            n_rhs += 1
            d2 = _rms_worst(_scaled(f1 - f, y, rtol, atol)) / h0
            if max(d1, d2) <= 1e-15:
                h1 = max(1e-6, h0 * 1e-3)
            else:
                h1 = (0.01 / max(d1, d2)) ** 0.2
            h = min(100 * h0, h1, span)
        h = min(h, h_max)

    k = np.empty((7, m, nc))
    ys = np.empty((m, nc))
    y_new = np.empty((m, nc))
    err = np.empty((m, nc))
    ratio = np.empty((m, nc))
    err_prev = 1e-4
    last_rejected = False
    trouble = False
    n_steps = 0
    while idx < nt:
        if n_steps >= max_steps:
            return out, STATUS_BUDGET, idx, accepted, rejected, n_rhs
        n_steps += 1
        h = min(h, h_max)
        remaining = t_final - t
        if h >= remaining or t + 1.01 * h >= t_final:
            h = remaining
        if h <= 16 * np.spacing(max(abs(t), 1.0)):
            if trouble:
                return out, STATUS_NUMERIC, idx, accepted, rejected, n_rhs
            return out, STATUS_STIFF, idx, accepted, rejected, n_rhs

        k[0] = f
        for i in range(1, 7):
            ys[:, :] = y
            for jj in range(i):
                if a[i, jj] != 0.0:
                    ys += h * a[i, jj] * k[jj]
            _derivs(kind, ys, theta, n, k[i])
        n_rhs += 6
        y_new[:, :] = y
        err[:, :] = 0.0
        for i in range(7):
            if i < 6 and b[i] != 0.0:
                y_new += h * b[i] * k[i]
            if e[i] != 0.0:
                err += h * e[i] * k[i]

        finite = True
        for i in range(7):
            for j in range(m):
                for q in range(nc):
                    if not np.isfinite(k[i, j, q]):
                        finite = False
        for j in range(m):
            for q in range(nc):
                if not np.isfinite(y_new[j, q]):
                    finite = False
        if not finite:
            rejected += 1
            trouble = True
            h *= MIN_FACTOR
            last_rejected = True
            continue

        for j in range(m):
            for q in range(nc):
                sc = atol + rtol * max(abs(y[j, q]), abs(y_new[j, q]))
                if sc > 0:
                    ratio[j, q] = err[j, q] / sc
                elif err[j, q] == 0:
                    ratio[j, q] = 0.0
                else:
                    ratio[j, q] = np.inf
        err_norm = _rms_worst(ratio)

        if err_norm > 1.0:
            rejected += 1
            h *= max(MIN_FACTOR, SAFETY * err_norm**-0.2)
            last_rejected = True
            continue
        dipped = False
        for j in range(m):
            for q in range(nc):
                if y_new[j, q] < -atol and y[j, q] >= -atol:
                    dipped = True
        if dipped:
            rejected += 1
            trouble = True
            h *= 0.5
            last_rejected = True
            continue

        t_new = t + h
        if t_new >= t_final or h == remaining:
            t_new = t_final
        while idx < nt and times[idx] <= t_new:
            _dense(t, t_new - t, y, y_new, k, t_new, times[idx], coef, out[idx])
            idx += 1
        accepted += 1

        if err_norm == 0.0:
            factor = MAX_FACTOR
        else:
            factor = SAFETY * err_norm**-PI_ALPHA * err_prev**PI_BETA
            factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
        if last_rejected:
            factor = min(1.0, factor)
        err_prev = max(err_norm, 1e-4)
        last_rejected = False
        trouble = False
        t = t_new
        y[:, :] = y_new
        f[:, :] = k[6]
        h *= factor

    return out, STATUS_OK, idx, accepted, rejected, n_rhs


def run(kind, theta, n, y0, times, rtol, atol, h_init, h_max, max_steps, t0=0.0):
    return dopri(
        KIND_CODES[kind], theta, n, y0, float(t0), times, float(rtol), float(atol),
        float(h_init), float(h_max), int(max_steps), _A, B, C, E, P,
    )
