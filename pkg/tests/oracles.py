"""Independent reference computations used by several test modules."""
import numpy as np
import torch
from scipy.optimize import minimize

from lalm_edit.model import LossSpec, gradient, loss_value


def iterative_minimum(W, K1, V1, Kp, Vp, P):
    """L-BFGS on the free matrix X of an update X P, with the analytic gradient.

    Returns the minimal objective and the minimizing update."""
    shape = W.shape

    def f(x):
        D = x.reshape(shape) @ P
        r1 = (W + D) @ K1 - V1
        rp = (W + D) @ Kp - Vp
        val = np.sum(r1**2) + np.sum(rp**2) + np.sum(D**2)
        grad = 2 * (r1 @ K1.T + rp @ Kp.T + D) @ P
        return val, grad.ravel()

    res = minimize(f, np.zeros(W.size), jac=True, method="L-BFGS-B", options={"maxiter": 20000, "gtol": 1e-12, "ftol": 1e-15})
    return res.fun, res.x.reshape(shape) @ P


def finite_difference_errors(model, prompt, token: int, eps: float = 1e-4) -> dict[str, float]:
    """Per-parameter relative error between autograd and central differences.

    ``eps=1e-4`` keeps roundoff below the O(eps^2) truncation error even for
    parameters whose gradient is ~1e-6."""
    spec = LossSpec(token=token)
    names = [n for n, _ in model.named_parameters()]
    analytic = gradient(model, prompt, spec, names)
    params = dict(model.named_parameters())
    errors = {}
    for name in names:
        p = params[name]
        flat = p.data.view(-1)
        fd = np.zeros(flat.numel())
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = loss_value(model, prompt, spec)
                flat[i] = old - eps
                down = loss_value(model, prompt, spec)
                flat[i] = old
            fd[i] = (up - down) / (2 * eps)
        a = analytic[name].ravel()
        scale = max(np.linalg.norm(a), np.linalg.norm(fd))
        errors[name] = 0.0 if scale < 1e-12 else float(np.linalg.norm(a - fd) / scale)
    return errors
