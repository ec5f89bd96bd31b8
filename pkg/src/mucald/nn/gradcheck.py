"""Finite-difference validation of backward passes.

The error metric per tensor is max |analytic - numeric| normalised by the
largest gradient magnitude in that tensor, so a sign-flipped backward
reports an error of 2.0 while finite-difference noise on near-zero
coordinates stays negligible.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import ConfigError


def _tensor_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if not np.all(np.isfinite(analytic)):
        return np.inf
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _coords(shape, max_coords, rng):
    total = int(np.prod(shape)) if shape else 1
    if max_coords is None or total <= max_coords:
        return np.arange(total)
    return rng.choice(total, size=max_coords, replace=False)


def central_difference(f, array, eps, max_coords=None, rng=None):
    """Central-difference gradient of scalar f with respect to array entries."""
    flat = array.reshape(-1)
    grad = np.zeros_like(flat)
    idx = _coords(array.shape, max_coords, rng)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return grad.reshape(array.shape), idx


def grad_check(module_forward, module_backward, probe, eps=1e-5, params=(),
               max_coords=None, seed=0):
    """Compare analytic gradients against central differences on a sum loss.

    ``module_forward(probe)`` returns an array; the loss is its element sum.
    ``module_backward(upstream)`` must return d(loss)/d(probe) and populate
    the ``grad`` buffers of any tensors passed in ``params`` (name, Tensor)
    pairs. Returns the max normalised error over the probe and all params.
    """
    if not (1e-8 <= eps <= 1e-4):
        raise ConfigError(f"grad_check: eps {eps} outside [1e-8, 1e-4]")
    probe = np.array(probe, dtype=np.float64)
    if probe.size and (np.abs(probe).max() > 2.0):
        raise ConfigError("grad_check: probe values must lie in [-2, 2]")
    rng = np.random.default_rng(seed)
    params = list(params)

    for _, t in params:
        t.zero_grad()
    out = module_forward(probe)
    analytic_dx = np.asarray(module_backward(np.ones_like(out)), dtype=np.float64)
    analytic_param_grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                            for _, t in params]

    def loss():
        return float(np.sum(module_forward(probe)))

    errors = []
    numeric_dx, idx = central_difference(loss, probe, eps, max_coords, rng)
    mask = np.zeros(probe.size, dtype=bool)
    mask[idx] = True
    errors.append(_tensor_error(analytic_dx.reshape(-1)[mask], numeric_dx.reshape(-1)[mask]))

    for (name, t), a_grad in zip(params, analytic_param_grads):
        numeric, idx = central_difference(loss, t.data, eps, max_coords, rng)
        mask = np.zeros(t.data.size, dtype=bool)
        mask[idx] = True
        errors.append(_tensor_error(a_grad.reshape(-1)[mask], numeric.reshape(-1)[mask]))

    return max(errors)


def grad_check_layer(layer, probe, eps=1e-5, max_coords=None, seed=0):
    """Gradient-check one layer's input and parameter gradients."""
    return grad_check(
        layer.forward,
        lambda up: layer.backward(up),
        probe,
        eps=eps,
        params=layer.param_items(),
        max_coords=max_coords,
        seed=seed,
    )
