"""Central finite-difference gradient checking shared by the test modules."""
import numpy as np

from doufu.nn import backward


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(loss_fn, tensors, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` rebuilds the forward pass and returns a scalar Tensor; ``tensors``
    are the leaves (requires_grad) to check.
    """
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        numeric = numeric_grad(lambda: loss_fn().item(), t.data, eps)
        worst = max(worst, rel_error(analytic, numeric))
    return worst
