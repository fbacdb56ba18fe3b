"""Bidirectional temperature-scaled contrastive loss over cosine similarities.

``S[j, k] = cos(a_j, v_k)``. The video-to-audio term for pair j is a softmax
over row j, the audio-to-video term a softmax over column j, and the batch
loss is ``(1/beta) * sum_j (l_av[j] + l_va[j])``.

Two negative sets are supported: ``standard`` keeps the positive pair in the
denominator (InfoNCE); ``paper_literal`` drops it, so the denominator only
holds the beta-1 negatives and the loss can go below zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .nn import l2_normalize_backward, l2_normalize_rows

STANDARD = "standard"
PAPER_LITERAL = "paper_literal"
_ALIASES = {
    "standard": STANDARD,
    "standard_include_positive": STANDARD,
    "paper_literal": PAPER_LITERAL,
    "paper-literal": PAPER_LITERAL,
    "paper_literal_exclude_positive": PAPER_LITERAL,
}


def canonical_negative_set(name: str) -> str:
    try:
        return _ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown negative set {name!r}; expected one of {sorted(_ALIASES)}") from None


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 1.0
    negative_set: str = STANDARD

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "negative_set", canonical_negative_set(self.negative_set))


def similarity_matrix(A: np.ndarray, V: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if A.ndim != 2 or A.shape != V.shape:
        raise ValueError(f"batches must have equal shapes, got {A.shape} and {V.shape}")
    return l2_normalize_rows(A) @ l2_normalize_rows(V).T


def _terms(S: np.ndarray, cfg: LossConfig):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {S.shape}")
    beta = S.shape[0]
    if beta < 1 or (cfg.negative_set == PAPER_LITERAL and beta < 2):
        raise ValueError(f"batch size {beta} leaves the {cfg.negative_set} denominator empty")
    logits = S / cfg.temperature
    pos = np.diag(logits)
    masked = logits.copy()
    if cfg.negative_set == PAPER_LITERAL:
        np.fill_diagonal(masked, -np.inf)
    lse_rows = logsumexp(masked, axis=1)
    lse_cols = logsumexp(masked, axis=0)
    l_va = lse_rows - pos  # row j: audio anchor a_j against videos v_k
    l_av = lse_cols - pos  # column j: video anchor v_j against audios a_k
    return masked, lse_rows, lse_cols, l_av, l_va


def contrastive_terms(S: np.ndarray, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair directional terms ``(l_av, l_va)``, each of length beta."""
    _, _, _, l_av, l_va = _terms(S, cfg)
    return l_av, l_va


def contrastive_loss(S: np.ndarray, cfg: LossConfig = LossConfig()) -> tuple[float, tuple[float, float]]:
    """Batch loss and its two directional parts (each already divided by beta)."""
    _, _, _, l_av, l_va = _terms(S, cfg)
    beta = len(l_av)
    av, va = float(l_av.sum() / beta), float(l_va.sum() / beta)
    return float((l_av + l_va).sum() / beta), (av, va)


def loss_grad_similarity(S: np.ndarray, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the similarity matrix."""
    masked, lse_rows, lse_cols, l_av, l_va = _terms(S, cfg)
    beta = S.shape[0]
    p_rows = np.exp(masked - lse_rows[:, None])
    p_cols = np.exp(masked - lse_cols[None, :])
    grad = (p_rows + p_cols - 2.0 * np.eye(beta)) / (cfg.temperature * beta)
    return float((l_av + l_va).sum() / beta), grad


def contrastive_loss_backward(
    A: np.ndarray, V: np.ndarray, cfg: LossConfig = LossConfig()
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and gradients with respect to the raw (unnormalized) embeddings."""
    A = np.asarray(A, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if A.ndim != 2 or A.shape != V.shape:
        raise ValueError(f"batches must have equal shapes, got {A.shape} and {V.shape}")
    Au, Vu = l2_normalize_rows(A), l2_normalize_rows(V)
    loss, gS = loss_grad_similarity(Au @ Vu.T, cfg)
    grad_A = l2_normalize_backward(A, gS @ Vu)
    grad_V = l2_normalize_backward(V, gS.T @ Au)
    return loss, grad_A, grad_V
