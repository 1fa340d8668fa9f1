"""Detection losses in closed form with analytic gradients.

The objectness term is a focal loss whose focusing exponent adapts
itself: gamma = -log(p_hat) where p_hat tracks the running expected
probability of a correct prediction,

    L_obj = -(1 - p)^(-log(p_hat)) * log(p)

with natural logarithms. When p_hat reaches 1 the exponent vanishes
and the loss reduces to plain cross-entropy. Box regression uses
smooth L1 (beta = 1); heading is smooth L1 on the (sin, cos)
encoding. The total is the unweighted sum.

All functions accept scalars or numpy arrays elementwise and return
(value, gradient); gradients are verified against finite differences
in the test suite. Probabilities are clamped to [1e-7, 1 - 1e-7]
before evaluation.
"""

from dataclasses import dataclass

import numpy as np

PROB_EPS = 1e-7


def _as_float_array(x):
    return np.asarray(x, dtype=np.float64)


def _match_input(result, like):
    return float(result) if np.isscalar(like) or np.ndim(like) == 0 else result


def automated_focal_loss(p_t, p_hat_t):
    """Self-tuning focal loss; returns (value, d value / d p_t).

    ``p_t`` is the predicted probability of the correct class,
    ``p_hat_t`` the running expected probability of a correct
    prediction (see update_p_hat).
    """
    p = np.clip(_as_float_array(p_t), PROB_EPS, 1.0 - PROB_EPS)
    ph = np.clip(_as_float_array(p_hat_t), PROB_EPS, 1.0)
    gamma = -np.log(ph)
    one_minus = 1.0 - p
    log_p = np.log(p)
    focus = one_minus ** gamma
    value = -focus * log_p
    grad = gamma * one_minus ** (gamma - 1.0) * log_p - focus / p
    return _match_input(value, p_t), _match_input(grad, p_t)


def update_p_hat(p_hat_t: float, batch_mean_p_t: float, momentum: float = 0.99) -> float:
    """Exponential moving average of the expected correct probability."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    new = momentum * p_hat_t + (1.0 - momentum) * batch_mean_p_t
    return float(np.clip(new, PROB_EPS, 1.0))


def smooth_l1(residual):
    """Smooth L1 with beta = 1: 0.5 r^2 inside |r| < 1, |r| - 0.5 outside.

    Vector residuals are summed into a single value; the gradient stays
    elementwise.
    """
    r = _as_float_array(residual)
    quad = np.abs(r) < 1.0
    value = np.where(quad, 0.5 * r * r, np.abs(r) - 0.5)
    grad = np.where(quad, r, np.sign(r))
    return float(np.sum(value)), _match_input(grad, residual)


def heading_loss(s_pred, c_pred, theta_gt):
    """Smooth L1 on the (sin, cos) heading encoding.

    Returns (value, (d/ds_pred, d/dc_pred)). Periodic in theta_gt by
    construction.
    """
    vs, gs = smooth_l1(s_pred - np.sin(theta_gt))
    vc, gc = smooth_l1(c_pred - np.cos(theta_gt))
    return vs + vc, (gs, gc)


@dataclass(frozen=True)
class LossSample:
    """Everything the total loss needs for one proposal."""

    p_t: float
    p_hat_t: float
    xyz_residual: tuple[float, float, float]
    lwh_residual: tuple[float, float, float]
    heading_residual: tuple[float, float]   # on the (sin, cos) encoding


def total_loss(sample: LossSample) -> float:
    """Unweighted sum of position, size, heading, and objectness terms."""
    v_xyz, _ = smooth_l1(np.asarray(sample.xyz_residual))
    v_lwh, _ = smooth_l1(np.asarray(sample.lwh_residual))
    v_heading, _ = smooth_l1(np.asarray(sample.heading_residual))
    v_obj, _ = automated_focal_loss(sample.p_t, sample.p_hat_t)
    return v_xyz + v_lwh + v_heading + v_obj
