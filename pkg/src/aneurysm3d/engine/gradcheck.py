"""Central-difference verification of analytic gradients."""

import numpy as np


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-12, np.abs(a) + np.abs(n))


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x``
    (perturbed in place and restored).  Step is ``eps * max(1, |x_i|)``."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        h = eps * max(1.0, abs(old))
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def numeric_vjp(forward, x, r, eps=1e-5, entries=None):
    """Central differences of ``sum(r * forward())`` w.r.t. the entries of
    ``x`` (all, or the flat indices in ``entries``).  The two outputs are
    subtracted before the weighted sum, which avoids cancelling two large,
    nearly equal loss values."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        h = eps * max(1.0, abs(old))
        flat[i] = old + h
        op = np.array(forward(), dtype=np.float64)
        flat[i] = old - h
        om = np.array(forward(), dtype=np.float64)
        flat[i] = old
        gflat[i] = float(np.sum(r * (op - om))) / (2 * h)
    return grad


def grad_check(module, x, eps=1e-5, seed=0, check_input=True, max_entries=None):
    """Max relative error between analytic and numeric gradients of
    ``sum(r * module(x))`` for a fixed random ``r``, over all parameters and
    (optionally) the input.

    ``max_entries`` caps the number of checked entries per tensor; a seeded
    random subset is used for larger tensors.

    The module must already be in 64-bit and carry no active stochastic
    layers.  Returns ``(max_error, per_tensor)`` where ``per_tensor`` maps
    ``"input"`` and parameter names to their max error.
    """
    x = np.array(x, dtype=np.float64)
    out = module.forward(x)
    r = np.random.default_rng(seed).standard_normal(out.shape)

    def fwd():
        return module.forward(x)

    module.zero_grad()
    module.forward(x)
    dx = module.backward(r.copy())
    analytic = {name: p.grad.copy() for name, p in module.named_parameters()}

    pick = np.random.default_rng(seed + 1)

    def entries(size):
        if max_entries is None or size <= max_entries:
            return np.arange(size)
        return np.sort(pick.choice(size, max_entries, replace=False))

    def check(analytic_grad, value):
        idx = entries(value.size)
        num = numeric_vjp(fwd, value, r, eps, idx)
        return float(relative_error(analytic_grad.reshape(-1)[idx], num.reshape(-1)[idx]).max()) if idx.size else 0.0

    errors = {}
    if check_input:
        errors["input"] = check(dx, x)
    for name, p in module.named_parameters():
        errors[name] = check(analytic[name], p.value)
    return max(errors.values()), errors
