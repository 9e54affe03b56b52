"""Shared oracles for the test suite."""

import numpy as np


def rel_err(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_fd(loss_fn, param, direction: np.ndarray, h: float = 1e-6) -> float:
    """Central finite difference of ``loss_fn()`` along ``direction`` in ``param``.

    Independent of the tape: it only nudges the raw value buffer and calls
    the forward pass twice.
    """
    base = param.value.data.copy()
    try:
        param.value.data[:] = base + h * direction
        lp = loss_fn().item()
        param.value.data[:] = base - h * direction
        lm = loss_fn().item()
    finally:
        param.value.data[:] = base
    return (lp - lm) / (2.0 * h)


def grad_close(fd: float, an: float, rtol: float, loss_scale: float,
               h: float = 1e-6) -> bool:
    """fd-vs-analytic agreement with a floor at the finite-difference resolution.

    Central differences cannot resolve derivatives below roughly
    eps * |loss| / h, so exactly-zero true gradients (for example a key bias
    under softmax shift invariance) are compared absolutely against that
    noise floor instead of relatively.
    """
    atol = 100.0 * np.finfo(float).eps * (1.0 + abs(loss_scale)) / h
    return abs(fd - an) <= atol + rtol * max(abs(fd), abs(an))


def check_param_grad(loss_fn, param, rng, tol: float, h: float = 1e-6,
                     n_directions: int = 2) -> None:
    """Compare tape gradient of ``param`` against directional finite differences."""
    param.zero_grad()
    loss = loss_fn()
    loss.backward()
    loss_scale = loss.item()
    grad = param.grad.data.copy()
    for _ in range(n_directions):
        direction = rng.normal(size=param.value.data.shape)
        fd = directional_fd(loss_fn, param, direction, h=h)
        an = float((grad * direction).sum())
        assert grad_close(fd, an, tol, loss_scale, h=h), \
            f"{param.name}: fd={fd} analytic={an}"
