"""Central finite-difference check of reverse-mode gradients (float64)."""
from __future__ import annotations

import numpy as np

from . import tensor as T


def default_loss(net, x, y):
    return T.smooth_l1(net(x).outputs, y)


def relative_error(g_ad, g_fd):
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def _pattern(loss_fn, net, x, y):
    with T.record_kinks() as log:
        value = loss_fn(net, x, y).item()
    return value, log


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def grad_check(net, batch, eps=1e-4, loss_fn=None, extra_params=None, max_coords=200, seed=0, per_param=False,
               skip_kinks=False, stats=None):
    """Max relative error between backward and central differences.

    ``loss_fn(net, x, y)`` builds the scalar loss (plain smooth-L1 on the
    outputs by default). ``extra_params`` are additional leaf tensors the
    loss closes over, e.g. bias-correction parameters; they are promoted to
    float64 in place. Parameters larger than ``max_coords`` are checked on a
    random subsample of that many coordinates.

    With ``skip_kinks`` a coordinate is left out when the +eps or -eps
    evaluation takes a different branch of a relu, max pool or smooth-L1
    than the unperturbed one; there the central difference straddles a
    kink and says nothing about the gradient. ``stats`` (a dict) receives
    the number of checked and skipped coordinates.
    """
    loss_fn = loss_fn or default_loss
    x, y = batch
    net64 = net.copy(np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    params = dict(net64.params)
    for name, t in (extra_params or {}).items():
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        params[name] = t

    for t in params.values():
        t.grad = None
    loss_fn(net64, x, y).backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}

    rng = np.random.default_rng(seed)
    errors = {}
    checked = skipped = 0
    with T.no_grad():
        base = _pattern(loss_fn, net64, x, y)[1] if skip_kinks else None
        for name, t in params.items():
            flat = t.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
            worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                lp, kp = _pattern(loss_fn, net64, x, y)
                flat[i] = orig - eps
                lm, km = _pattern(loss_fn, net64, x, y)
                flat[i] = orig
                if skip_kinks and not (_same_branches(base, kp) and _same_branches(base, km)):
                    skipped += 1
                    continue
                checked += 1
                fd = (lp - lm) / (2 * eps)
                worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], fd)))
            errors[name] = worst
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return errors if per_param else max(errors.values())
