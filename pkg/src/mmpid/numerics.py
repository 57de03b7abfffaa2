"""Dense float64 kernels shared by every trainable module.

Softmax variants are computed with per-column max subtraction so large
Gram entries cannot overflow. All public functions reject non-finite
inputs and guarantee finite outputs.

Randomness contract: every random draw in this package flows through a
``numpy.random.Generator`` backed by PCG64. Seeds are plain 64-bit ints;
child generators are forked via ``SeedSequence`` (or a SHA-256 digest of
string labels), so equal seeds reproduce byte-identical streams and
parallel code never shares a generator.
"""

from __future__ import annotations

import hashlib

import numpy as np


def check_finite(a, name="array"):
    """Raise ValueError if `a` contains NaN or Inf."""
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def column_softmax(z):
    """Softmax over rows, independently per column.

    out[i, j] = exp(z[i, j]) / sum_i exp(z[i, j]); each column of the
    result sums to 1. Stable under large entries via max subtraction.
    """
    z = np.asarray(z, dtype=np.float64)
    check_finite(z, "softmax input")
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def gram(f):
    """Gram matrix F^T F of a feature map with one column per slot."""
    f = np.asarray(f, dtype=np.float64)
    check_finite(f, "gram input")
    return f.T @ f


def make_rng(seed):
    """Deterministic PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_seed(seed, *labels):
    """Stable 64-bit child seed from a base seed and hashable labels.

    Uses SHA-256 over the decimal seed and the label reprs, so the
    derivation is platform independent and labels may be strings.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for lab in labels:
        h.update(b"\x1f")
        h.update(repr(lab).encode())
    return int.from_bytes(h.digest()[:8], "little")


def spawn_rngs(seed, n):
    """n independent child generators, deterministic in (seed, n)."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(int(seed)).spawn(n)]


def grad_check(f, x, analytic_grad, eps=1e-5):
    """Max relative error between `analytic_grad` and central differences.

    f : callable mapping a 1-d parameter vector to a finite scalar
    x : point at which to check, 1-d float64
    analytic_grad : claimed gradient of f at x, same shape as x

    Per coordinate the error is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|); the max over coordinates is returned.
    Raises ValueError naming the coordinate if f evaluates non-finite.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if g.shape != x.shape:
        raise ValueError(f"gradient shape {g.shape} != point shape {x.shape}")
    worst = 0.0
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = eps
        fp = float(f(x + step))
        fm = float(f(x - step))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"f is non-finite at coordinate {k} (f+={fp}, f-={fm})")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(g[k] - numeric) / max(1.0, abs(g[k]), abs(numeric))
        worst = max(worst, err)
    return worst
