"""Shared test utilities: finite-difference gradient oracle.

The oracle is independent of the autodiff engine: it only calls a forward
function repeatedly and differences the results, so it can arbitrate any
gradient the tape produces.
"""

import numpy as np
import pytest

from patchjack import autodiff as ad


def numerical_gradient(fn, arrays, wrt, step=1e-3):
    """Central finite differences of ``fn(*arrays)`` w.r.t. ``arrays[wrt]``.

    ``fn`` must return a python float. Returns an array shaped like the
    perturbed input.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(base[wrt])
    flat = base[wrt].reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(*base)
        flat[i] = orig - step
        fm = fn(*base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a, b, floor=1e-4):
    """Normalized L2 error between two gradients (0 when both are ~zero)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


def check_gradients(build_out, params, rtol=1e-3, step=1e-3, floor=1e-4):
    """Assert tape gradients of ``sum(build_out(...))`` match finite differences.

    ``build_out(*tensors) -> Tensor`` (any shape) is evaluated once on a
    tape; the analytic path reduces it with the library's own sum.  The
    oracle re-evaluates the float32 forward but accumulates the final sum
    in float64, so finite differencing is not drowned by reduction
    round-off.  ``params`` is a list of numpy arrays; every one is checked.
    """
    tensors = [ad.tensor(p, requires_grad=True) for p in params]
    with ad.Tape() as tape:
        out = build_out(*tensors)
        loss = out if out.data.size == 1 else ad.reduce_sum(out)
    tape.backward(loss)

    def forward(*arrays):
        consts = [ad.tensor(a.astype(np.float32)) for a in arrays]
        return float(np.sum(build_out(*consts).data, dtype=np.float64))

    for i, t in enumerate(tensors):
        assert t.grad is not None, f"no gradient for parameter {i}"
        num = numerical_gradient(forward, params, i, step=step)
        err = relative_error(t.grad, num, floor=floor)
        assert err < rtol, f"parameter {i}: rel err {err:.3e} >= {rtol}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
