"""Central finite-difference oracle for the autodiff engine."""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation, OracleInvalidError
from .tensor import Tensor, backward


def _evaluate(f):
    out = f()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractViolation("gradcheck target must return a scalar Tensor")
    return float(out.data.reshape(-1)[0]), out


def _entries(t, max_entries, rng):
    n = t.size
    if max_entries is None or n <= max_entries:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_entries, replace=False))


def gradcheck(f, params, eps=1e-5, max_entries=None, seed=0):
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` is a zero-argument closure returning a scalar Tensor built from
    ``params``. Each parameter is perturbed in place and restored. When
    ``max_entries`` is set, that many entries per parameter are probed,
    chosen with ``seed``.

    Returns the max over probed entries of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    base, out = _evaluate(f)
    again, _ = _evaluate(f)
    if base != again:
        raise OracleInvalidError(f"function is not deterministic: {base!r} != {again!r}")
    backward(out, wrt=params)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in _entries(p, max_entries, rng):
            orig = flat[i]
            flat[i] = orig + eps
            fp, _ = _evaluate(f)
            flat[i] = orig - eps
            fm, _ = _evaluate(f)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst


def finite_diff_check(f, x, eps=1e-5, max_entries=None, seed=0):
    """Max relative error between d f(x)/dx and central differences.

    ``f`` maps the Tensor ``x`` to a scalar Tensor.
    """
    if not x.requires_grad:
        x.requires_grad = True
    return gradcheck(lambda: f(x), [x], eps=eps, max_entries=max_entries, seed=seed)
