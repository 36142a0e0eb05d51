"""Central finite-difference oracle, independent of the tape."""
import numpy as np

from basis_transformer.autodiff import Tensor, no_grad


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """d f / d arr by central differences; ``f`` reads ``arr`` in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        plus = f()
        flat[i] = orig - eps
        minus = f()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_op(op, inputs, rng, eps=1e-5):
    """Worst relative error between tape gradients and finite differences.

    The scalar probed is ``sum(op(*inputs) * R)`` for a fixed random ``R``.
    """
    tensors = [Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
    out = op(*tensors)
    probe = rng.normal(size=out.shape)
    (out * Tensor(probe)).sum().backward()

    def scalar():
        with no_grad():
            return float(np.sum(op(*tensors).data * probe))

    worst = 0.0
    for t in tensors:
        num = numeric_grad(scalar, t.data, eps)
        worst = max(worst, rel_error(t.grad, num))
    return worst
