import numpy as np

from .tensor import NonFiniteError, Tensor


def _scalar(f, arr):
    val = np.asarray(f(Tensor(arr)).data, dtype=np.float64)
    if val.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {val.shape}")
    val = float(val)
    if not np.isfinite(val):
        raise NonFiniteError("grad_check: f returned a non-finite value")
    return val


def grad_check(f, x, eps: float = 1e-5, indices=None, floor: float = 1e-8) -> float:
    """Max relative error between autodiff and central-difference gradients of ``f`` at ``x``.

    ``f`` maps a Tensor to a scalar Tensor. ``indices`` optionally restricts the
    finite-difference probes to a subset of flat positions. The error per entry
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteError("grad_check: f returned a non-finite value")
    y.backward()
    auto = np.zeros_like(x) if xt.grad is None else xt.grad
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        xp = flat.copy()
        xp[i] += eps
        xm = flat.copy()
        xm[i] -= eps
        num = (_scalar(f, xp.reshape(x.shape)) - _scalar(f, xm.reshape(x.shape))) / (2 * eps)
        a = auto.reshape(-1)[i]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
    return worst
