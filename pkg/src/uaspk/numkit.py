"""Small deterministic numerical core.

Stable reductions used by the losses, a seeded random stream, a central
finite-difference gradient oracle and the correlation statistics used by the
analysis harness.  Everything works in float64.
"""
from dataclasses import dataclass

import numpy as np
import torch
from scipy.stats import rankdata

DTYPE = torch.float64


def as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def softmax(v, dim=-1):
    """Max-shifted softmax along ``dim``."""
    v = as_tensor(v)
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - v.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_sum_exp(v, dim=-1):
    """``log(sum(exp(v)))`` along ``dim`` with the max shifted out."""
    v = as_tensor(v)
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = v.max(dim=dim, keepdim=True).values.detach()
    return (m + torch.log(torch.exp(v - m).sum(dim=dim, keepdim=True))).squeeze(dim)


class RandomStream:
    """Seeded random stream backed by numpy's PCG64.

    PCG64 (O'Neill, PCG-XSL-RR 128/64) is fully specified and produces the
    same sequence on every platform for a given seed.  Child streams derived
    with :meth:`child` are keyed by ``(seed, *key)`` through ``SeedSequence``
    so that independent consumers never share draws.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.key]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *key):
        return RandomStream(self.seed, self.key + tuple(key))

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)


@dataclass(frozen=True)
class GradCheckReport:
    max_abs_diff: float
    max_rel_diff: float
    probe_count: int

    def ok(self, rtol=1e-4):
        return self.max_rel_diff <= rtol


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of a float64 vector.

    ``f`` receives a numpy array with the shape of ``x`` and must return a
    real number.  Raises ``FloatingPointError`` naming the coordinate when
    ``f`` is not finite at a probe point.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric):
    """Norm-wise relative error ``max|a - n| / max(max|a|, max|n|)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.max(np.abs(a - n)) if a.size else 0.0
    scale = max(np.max(np.abs(a)) if a.size else 0.0, np.max(np.abs(n)) if n.size else 0.0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else np.inf
    return float(diff / scale)


def check_gradient(fn, inputs, h=1e-5):
    """Compare torch autograd against central differences for one probe.

    ``fn`` maps a list of float64 tensors to a scalar tensor.  Every input is
    differentiated; returns ``(max_abs_diff, max_rel_diff)`` over inputs.
    """
    inputs = [as_tensor(t).detach().clone() for t in inputs]
    leaves = [t.clone().requires_grad_(True) for t in inputs]
    out = fn(leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    worst_abs, worst_rel = 0.0, 0.0
    for k, (t, g) in enumerate(zip(inputs, grads)):
        analytic = np.zeros(tuple(t.shape)) if g is None else g.detach().numpy()

        def f(xk, k=k):
            args = list(inputs)
            args[k] = torch.from_numpy(xk)
            with torch.no_grad():
                return fn(args).item()

        numeric = finite_difference_gradient(f, t.numpy(), h)
        worst_abs = max(worst_abs, float(np.max(np.abs(analytic - numeric), initial=0.0)))
        worst_rel = max(worst_rel, relative_error(analytic, numeric))
    return worst_abs, worst_rel


def gradient_suite(fn, draw, probes=20, h=1e-5):
    """Run :func:`check_gradient` on ``probes`` instances from ``draw(i)``."""
    worst_abs, worst_rel = 0.0, 0.0
    for i in range(probes):
        a, r = check_gradient(fn, draw(i), h)
        worst_abs, worst_rel = max(worst_abs, a), max(worst_rel, r)
    return GradCheckReport(worst_abs, worst_rel, probes)


def correlation(x, y, kind="pearson"):
    """Pearson or Spearman correlation of two equal-length vectors.

    Spearman is Pearson on fractional ranks, ties sharing their average rank.
    Zero variance raises ``ValueError`` instead of returning NaN.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("correlation needs at least two points")
    if kind == "spearman":
        x, y = rankdata(x, method="average"), rankdata(y, method="average")
    elif kind != "pearson":
        raise ValueError(f"unknown correlation kind {kind!r}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation undefined for zero-variance input")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))
