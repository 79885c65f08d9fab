"""Central finite-difference verification of every backward pass.

The model must be in deterministic mode (BatchNorm frozen on running
statistics, no sampling) so repeated forward evaluations agree.
"""

from __future__ import annotations

import numpy as np

from offtrack.nn.autograd import Tensor


def grad_check(loss_fn, tensors: dict, eps: float = 1e-5,
               max_elements_per_tensor: int = 200, seed: int = 0,
               agreement_atol: float = 1e-11):
    """Compare analytic gradients of ``loss_fn()`` against central finite
    differences over every tensor in ``tensors`` (a seeded random subset of
    elements for large tensors).

    Returns (max_relative_error, per_tensor_report). Relative error is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|); differences at
    or below ``agreement_atol`` count as exact, since double-precision
    central differences cannot resolve below ~1e-12 absolute. Raises on
    non-finite analytic gradients, naming the tensor.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    loss.backward()

    rng = np.random.default_rng(seed)
    report = {}
    worst = 0.0
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(analytic).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
        flat = t.data.reshape(-1)
        n = flat.size
        if n > max_elements_per_tensor:
            idx = rng.choice(n, size=max_elements_per_tensor, replace=False)
        else:
            idx = np.arange(n)
        an = analytic.reshape(-1)
        tensor_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            diff = abs(an[i] - numeric)
            if diff <= agreement_atol:
                continue
            denom = max(1e-8, abs(an[i]) + abs(numeric))
            tensor_worst = max(tensor_worst, diff / denom)
        report[name] = tensor_worst
        worst = max(worst, tensor_worst)
    return worst, report
