"""
Gradient Check Module

Central finite differences for verifying analytic gradients.
"""

from typing import Callable

import numpy as np
import numpy.typing as npt

DEFAULT_EPS = 1e-5


def compute_gradient(func: Callable[[npt.NDArray[np.float64]], float], theta, eps: float = DEFAULT_EPS) -> npt.NDArray[np.float64]:
    """
    Numerical gradient of a scalar function by central differences

    Args:
        func: Function of a float array returning a scalar
        theta: Point to differentiate at (any shape)
        eps: Step size

    Returns:
        Gradient with the shape of theta
    """
    theta = np.array(theta, dtype=np.float64)
    flat = theta.ravel()
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        cost_p = float(func(theta))
        flat[i] = saved - eps
        cost_m = float(func(theta))
        flat[i] = saved
        grad[i] = (cost_p - cost_m) / (2.0 * eps)
    return grad.reshape(theta.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Norm of the difference over the norm of the sum, as in classic gradient checking"""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.linalg.norm(a + n)), floor)
    return float(np.linalg.norm(a - n)) / denom
