"""Compiled loops for the selective scan, used when numba is available.

The transcendental terms ``abar = exp(delta*A)`` and ``coef = expm1(delta*A)/A``
are computed by numpy (vectorised) and passed in; the loops below fuse the
recurrence with everything else so no ``(B, L, E, N)`` temporaries are built
besides the stored states.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    if os.environ.get("SSMFLOW_NO_NUMBA"):
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def _scan_fwd(abar, coef, x, Bm, C):
    """States ``h`` ``(nb, L, E, N)`` and outputs ``y`` ``(nb, L, E)``."""
    nb, L, E, N = abar.shape
    h = np.empty_like(abar)
    y = np.empty_like(x)
    for b in range(nb):
        for t in range(L):
            for e in range(E):
                xv = x[b, t, e]
                acc = 0.0
                for n in range(N):
                    s = coef[b, t, e, n] * Bm[b, t, n] * xv
                    if t > 0:
                        s += abar[b, t, e, n] * h[b, t - 1, e, n]
                    h[b, t, e, n] = s
                    acc += C[b, t, n] * s
                y[b, t, e] = acc
    return h, y


def _scan_bwd(gy, abar, coef, h, x, delta, A, Bm, C):
    """Gradients ``(gx, gdelta, gA, gB, gC)`` of the scan given output cotangent ``gy``."""
    nb, L, E, N = abar.shape
    gx = np.empty_like(x)
    gdelta = np.empty_like(delta)
    gA = np.zeros((E, N))
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(C)
    carry = np.zeros((E, N), dtype=abar.dtype)
    for b in range(nb):
        carry[:] = 0.0
        for t in range(L - 1, -1, -1):
            for e in range(E):
                xv = x[b, t, e]
                d = delta[b, t, e]
                g = gy[b, t, e]
                acc_x = 0.0
                acc_d = 0.0
                for n in range(N):
                    a = abar[b, t, e, n]
                    c = coef[b, t, e, n]
                    a_en = A[e, n]
                    bv = Bm[b, t, n]
                    gh = g * C[b, t, n] + carry[e, n]
                    hp = h[b, t - 1, e, n] if t > 0 else 0.0
                    gc = gh * bv * xv
                    acc_x += gh * c * bv
                    gB[b, t, n] += gh * c * xv
                    gC[b, t, n] += g * h[b, t, e, n]
                    # d abar/dz = abar, d coef/dz = abar/A, d coef/dA|z = -coef/A
                    gz = a * (gh * hp + gc / a_en)
                    acc_d += gz * a_en
                    gA[e, n] += gz * d - gc * c / a_en
                    carry[e, n] = a * gh
                gx[b, t, e] = acc_x
                gdelta[b, t, e] = acc_d
    return gx, gdelta, gA, gB, gC


if HAVE_NUMBA:
    scan_fwd = njit(cache=True)(_scan_fwd)
    scan_bwd = njit(cache=True)(_scan_bwd)
else:  # pragma: no cover
    scan_fwd = _scan_fwd
    scan_bwd = _scan_bwd
