"""
Mask Loss

Focal loss supervising the overlap mask predictor, its analytic gradient
with respect to the predicted probabilities, and the total-loss sum. The
coarse and fine matching losses are accepted as precomputed scalars.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from errors import LossError
from models import LossConfig, LossReport, OverlapMask, OverlapProbabilities

logger = logging.getLogger(__name__)


def _prepare(p: OverlapProbabilities, m_g: OverlapMask, cfg: LossConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamped probabilities, mask bits and p_t."""
    if len(p) != len(m_g):
        raise LossError(f"probability/mask length mismatch: {len(p)} vs {len(m_g)}")
    if len(p) == 0:
        raise LossError("empty mask")
    probabilities = np.clip(p.values, cfg.eps, 1.0 - cfg.eps)
    mask = m_g.values
    p_t = np.where(mask, probabilities, 1.0 - probabilities)
    return probabilities, mask, p_t


def focal_loss_gradient(p: OverlapProbabilities, m_g: OverlapMask, cfg: Optional[LossConfig] = None) -> np.ndarray:
    """
    dL/dp_i of the mean focal loss.

    For mask 1: (alpha/N) [gamma (1-p)^(gamma-1) ln p - (1-p)^gamma / p].
    For mask 0 the same expression is evaluated at 1-p with the sign
    flipped. Entries whose probability was clamped get a zero gradient.

    Raises:
        LossError: On a length mismatch
    """
    cfg = cfg or LossConfig()
    probabilities, mask, p_t = _prepare(p, m_g, cfg)
    n = p_t.shape[0]
    one_minus = 1.0 - p_t
    d_pt = cfg.alpha / n * (
        cfg.gamma * np.power(one_minus, cfg.gamma - 1.0) * np.log(p_t)
        - np.power(one_minus, cfg.gamma) / p_t
    )
    gradient = np.where(mask, d_pt, -d_pt)
    clamped = (p.values < cfg.eps) | (p.values > 1.0 - cfg.eps)
    gradient[clamped] = 0.0
    return gradient


def focal_mask_loss(p: OverlapProbabilities, m_g: OverlapMask, cfg: Optional[LossConfig] = None) -> LossReport:
    """
    Mean focal loss of predicted overlap probabilities against a GT mask.

    p_t is p where the mask is 1 and 1-p elsewhere; each element contributes
    -alpha (1-p_t)^gamma ln(p_t).

    Args:
        p: Predicted probabilities
        m_g: Ground-truth mask
        cfg: Focusing/balancing parameters and clamp

    Returns:
        LossReport: Loss, p_t, per-element loss and gradient

    Raises:
        LossError: On a length mismatch or empty input
    """
    cfg = cfg or LossConfig()
    _, _, p_t = _prepare(p, m_g, cfg)
    per_element = -cfg.alpha * np.power(1.0 - p_t, cfg.gamma) * np.log(p_t)
    # -0.0 at p_t = 1 would trip the ge=0 bound
    per_element = np.maximum(per_element, 0.0)
    loss = float(per_element.mean())
    logger.debug(f"Focal mask loss over {len(p)} superpoints: {loss:.6f}")
    return LossReport(
        loss=loss,
        p_t=p_t,
        per_element=per_element,
        gradient=focal_loss_gradient(p, m_g, cfg),
    )


def total_loss(mask_loss: float, coarse_loss: Optional[float] = None, fine_loss: Optional[float] = None) -> float:
    """L_total = L_coarse + L_fine + L_mask; missing terms count as zero."""
    return float(mask_loss) + float(coarse_loss or 0.0) + float(fine_loss or 0.0)
