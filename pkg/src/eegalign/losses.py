"""Contrastive alignment objectives.

Three ingredients, combined as a weighted sum:

* a symmetric InfoNCE term over the cosine similarity matrix, averaged
  over both retrieval directions with a 1/(2B) prefactor;
* a softened distribution-matching term that pulls the cross-modal
  softmax rows toward targets interpolated between the identity and the
  intra-modal similarity distribution;
* an off-diagonal relation term that matches how each modality
  distributes probability over its negatives.

The temperature is shared by every softmax here and is learned through
the exponential of a free scalar, so it stays positive by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, DomainError
from .tensor import (
    Tensor,
    as_tensor,
    clamp_min,
    kl_div_rows,
    l2_normalize,
    log_softmax_rows,
    matmul,
    softmax_rows,
    transpose,
)

DEFAULT_TAU_INIT = 1.0 / 14.0
ROW_SUM_TOL = 1e-9


@dataclass
class LossWeights:
    """Weights of the three loss terms plus softening and temperature."""

    mu: float = 0.6
    alpha: float = 0.3
    lam: float = 0.1
    beta: float = 0.3
    tau: Tensor | float = DEFAULT_TAU_INIT
    detach_targets: bool = True

    def __post_init__(self):
        if self.mu < 0 or self.alpha < 0 or self.lam < 0:
            raise DomainError(f"loss weights must be >= 0, got mu={self.mu} alpha={self.alpha} lambda={self.lam}")
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError(f"beta must lie in [0, 1], got {self.beta}")
        _validate_tau(self.tau)


def _validate_tau(tau) -> None:
    if isinstance(tau, Tensor):
        if tau.size != 1:
            raise DomainError(f"temperature must be scalar, got shape {tau.shape}")
        if tau.item() <= 0:
            raise DomainError(f"temperature must be positive, got {tau.item()}")
    elif float(tau) <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")


def cosine_sim_matrix(z_e: Tensor, z_i: Tensor) -> Tensor:
    """All-pairs cosine similarity; rows are EEG items, columns images.

    Inputs are re-normalized here even though the encoders already
    normalize, so the matrix is correct for any caller.
    """
    z_e, z_i = as_tensor(z_e), as_tensor(z_i)
    if z_e.ndim != 2 or z_i.ndim != 2 or z_e.shape[1] != z_i.shape[1]:
        raise DimensionError(f"embedding shapes do not align: {z_e.shape} vs {z_i.shape}")
    return matmul(l2_normalize(z_e), transpose(l2_normalize(z_i)))


def infonce(sim: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE over a square similarity matrix.

    Mean of the row-wise and column-wise cross entropies of the matched
    diagonal, i.e. a 1/(2B) prefactor over both directions. A batch of
    one has no negatives and scores exactly zero.
    """
    sim = as_tensor(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {sim.shape}")
    _validate_tau(tau)
    b = sim.shape[0]
    logits = sim / tau
    idx = np.arange(b)
    row_diag = log_softmax_rows(logits)[(idx, idx)]
    col_diag = log_softmax_rows(transpose(logits))[(idx, idx)]
    return (row_diag.sum() + col_diag.sum()) * (-1.0 / (2.0 * b))


def soft_targets(z_e: Tensor, z_i: Tensor, tau, beta: float, detach: bool = True) -> tuple[Tensor, Tensor]:
    """Identity targets softened toward the intra-modal distributions.

    T = (1 - beta) * I + beta * softmax(Z Z^T / tau). At beta 0 the
    targets are exactly the identity.
    """
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"beta must lie in [0, 1], got {beta}")
    _validate_tau(tau)
    z_e, z_i = l2_normalize(as_tensor(z_e)), l2_normalize(as_tensor(z_i))
    b = z_e.shape[0]
    eye = Tensor(np.eye(b))
    if beta == 0.0:
        return eye, Tensor(np.eye(b))
    p_ee = softmax_rows(matmul(z_e, transpose(z_e)), temperature=tau)
    p_ii = softmax_rows(matmul(z_i, transpose(z_i)), temperature=tau)
    t_e = eye * (1.0 - beta) + p_ee * beta
    t_i = eye * (1.0 - beta) + p_ii * beta
    if detach:
        t_e, t_i = t_e.detach(), t_i.detach()
    return t_e, t_i


def _require_row_stochastic(name: str, p: Tensor) -> None:
    sums = p.data.sum(axis=-1)
    if np.any(p.data < -ROW_SUM_TOL) or np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
        raise ContractError(f"{name} must be row-stochastic within {ROW_SUM_TOL}")


def soft_loss(t_e: Tensor, t_i: Tensor, p_ei: Tensor, p_ie: Tensor) -> Tensor:
    """Symmetric KL between softened targets and cross-modal rows.

    0.5 * [KL(T_E || P_EI) + KL(P_EI || T_E)] plus the same with the
    image-to-EEG direction. Each KL sums over a row and averages over
    the batch.
    """
    for name, p in (("t_e", t_e), ("t_i", t_i), ("p_ei", p_ei), ("p_ie", p_ie)):
        _require_row_stochastic(name, p)
    part_e = (kl_div_rows(t_e, p_ei) + kl_div_rows(p_ei, t_e)) * 0.5
    part_i = (kl_div_rows(t_i, p_ie) + kl_div_rows(p_ie, t_i)) * 0.5
    return part_e + part_i


def _off_diagonal_renormalize(p: Tensor) -> Tensor:
    """Zero the diagonal and rescale every row back to probability."""
    b = p.shape[0]
    masked = p * Tensor(1.0 - np.eye(b))
    return masked / clamp_min(masked.sum(axis=-1, keepdims=True), 1e-300)


def relation_loss(p_ee: Tensor, p_ii: Tensor, p_ei: Tensor, p_ie: Tensor) -> Tensor:
    """Match the negatives-only distributions across modalities.

    Rows are renormalized after removing the diagonal; a batch of one
    has no negatives and is rejected.
    """
    b = p_ee.shape[0]
    if b < 2:
        raise ContractError("relation matching needs a batch of at least 2 (no negatives otherwise)")
    for name, p in (("p_ee", p_ee), ("p_ii", p_ii), ("p_ei", p_ei), ("p_ie", p_ie)):
        if p.shape != (b, b):
            raise DimensionError(f"{name} must be ({b}, {b}), got {p.shape}")
        _require_row_stochastic(name, p)
    kl_e = kl_div_rows(_off_diagonal_renormalize(p_ee), _off_diagonal_renormalize(p_ei))
    kl_i = kl_div_rows(_off_diagonal_renormalize(p_ii), _off_diagonal_renormalize(p_ie))
    return (kl_e + kl_i) * 0.5


def total_loss(z_e: Tensor, z_i: Tensor, weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three terms with a per-component breakdown.

    Components with a zero weight are skipped entirely, so a (1, 0, 0)
    weighting reproduces plain InfoNCE exactly.
    """
    z_e, z_i = l2_normalize(as_tensor(z_e)), l2_normalize(as_tensor(z_i))
    if z_e.shape != z_i.shape:
        raise DimensionError(f"embedding shapes differ: {z_e.shape} vs {z_i.shape}")
    b = z_e.shape[0]
    if weights.lam > 0 and b < 2:
        raise ContractError("relation term requires a batch of at least 2")
    tau = weights.tau
    sim = matmul(z_e, transpose(z_i))

    l_clip = infonce(sim, tau)
    total = l_clip * weights.mu
    parts = {"l_clip": l_clip.item(), "l_soft": 0.0, "l_rel": 0.0}

    if weights.alpha > 0 or weights.lam > 0:
        p_ei = softmax_rows(sim, temperature=tau)
        p_ie = softmax_rows(transpose(sim), temperature=tau)

    if weights.alpha > 0:
        t_e, t_i = soft_targets(z_e, z_i, tau, weights.beta, detach=weights.detach_targets)
        l_soft = soft_loss(t_e, t_i, p_ei, p_ie)
        total = total + l_soft * weights.alpha
        parts["l_soft"] = l_soft.item()

    if weights.lam > 0:
        p_ee = softmax_rows(matmul(z_e, transpose(z_e)), temperature=tau)
        p_ii = softmax_rows(matmul(z_i, transpose(z_i)), temperature=tau)
        if weights.detach_targets:
            p_ee, p_ii = p_ee.detach(), p_ii.detach()
        l_rel = relation_loss(p_ee, p_ii, p_ei, p_ie)
        total = total + l_rel * weights.lam
        parts["l_rel"] = l_rel.item()

    parts["l_total"] = total.item()
    return total, parts
