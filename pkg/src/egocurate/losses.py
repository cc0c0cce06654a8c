"""Reference numerics for the video-text alignment losses.

Everything operates on plain float64 feature matrices. Each differentiable
loss has a ``*_grad`` twin returning the analytic gradient, so the
formulas can be checked against finite differences without an autodiff
framework.
"""

from __future__ import annotations

import numpy as np

from . import DataError

KL_EPS = 1e-8
CLIP_TAU = 0.07
LAMBDA_SVSA = 0.2
LAMBDA_CF = 0.1


def _rows(x, name):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DataError(f"{name} must be a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} has non-finite values")
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0):
        raise DataError(f"{name} has a zero-norm row (row {int(np.flatnonzero(norms == 0)[0])})")
    return a, norms


def _check_tau(tau):
    if not tau > 0:
        raise DataError(f"tau must be > 0, got {tau}")


def cosine_matrix(F, T) -> np.ndarray:
    """``S[i, j] = cos(F[i], T[j])``."""
    F, nf = _rows(F, "F")
    T, nt = _rows(T, "T")
    if F.shape[1] != T.shape[1]:
        raise DataError(f"feature dimensions differ: {F.shape[1]} vs {T.shape[1]}")
    return np.clip((F / nf[:, None]) @ (T / nt[:, None]).T, -1.0, 1.0)


def _cosine_backward(F, T, G):
    """Gradients of ``sum(G * cos(F, T))`` with respect to ``F`` and ``T``."""
    F, nf = _rows(F, "F")
    T, nt = _rows(T, "T")
    Fh = F / nf[:, None]
    Th = T / nt[:, None]
    S = Fh @ Th.T
    gF = (G @ Th - np.sum(G * S, axis=1)[:, None] * Fh) / nf[:, None]
    gT = (G.T @ Fh - np.sum(G * S, axis=0)[:, None] * Th) / nt[:, None]
    return gF, gT


def ground_truth(y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw same-class matrix plus its row- and column-normalised versions."""
    y = np.asarray(y).reshape(-1)
    Q = (y[:, None] == y[None, :]).astype(np.float64)
    return Q, Q / Q.sum(axis=1, keepdims=True), Q / Q.sum(axis=0, keepdims=True)


def _log_softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _kl_parts(S, y, tau):
    B = S.shape[0]
    y = np.asarray(y).reshape(-1)
    if y.size != B:
        raise DataError(f"{y.size} labels for a batch of {B}")
    _, q_row, q_col = ground_truth(y)
    parts = []
    for axis, q in ((1, q_row), (0, q_col)):
        logp = _log_softmax(S / tau, axis)
        p = np.exp(logp)
        a = logp - np.log(q + KL_EPS)
        kl = np.sum(p * a, axis=axis, keepdims=True)
        parts.append((p, a, kl))
    return parts


def kl_contrastive(F, T, y, tau: float = CLIP_TAU) -> float:
    """Row and column KL between softmaxed similarities and the label matrix.

    ``KL(p || q) = sum p * log(p / (q + eps))`` with ``q`` the row- (or
    column-) normalised same-class matrix; each direction is averaged over
    the batch and the two are summed.
    """
    _check_tau(tau)
    S = cosine_matrix(F, T)
    B = S.shape[0]
    return float(sum(kl.sum() for _, _, kl in _kl_parts(S, y, tau)) / B)


def kl_contrastive_grad(F, T, y, tau: float = CLIP_TAU):
    _check_tau(tau)
    S = cosine_matrix(F, T)
    B = S.shape[0]
    G = np.zeros_like(S)
    for p, a, kl in _kl_parts(S, y, tau):
        G += p * (a - kl)
    return _cosine_backward(F, T, G / (B * tau))


def ce_contrastive(F_l, F_h, tau: float = CLIP_TAU) -> float:
    """Symmetric InfoNCE: matching rows of ``F_l`` and ``F_h`` are positives."""
    _check_tau(tau)
    S = cosine_matrix(F_l, F_h) / tau
    B = S.shape[0]
    diag = np.arange(B)
    row = -_log_softmax(S, 1)[diag, diag].mean()
    col = -_log_softmax(S, 0)[diag, diag].mean()
    return float(0.5 * (row + col))


def ce_contrastive_grad(F_l, F_h, tau: float = CLIP_TAU):
    _check_tau(tau)
    S = cosine_matrix(F_l, F_h) / tau
    B = S.shape[0]
    eye = np.eye(B)
    G = (np.exp(_log_softmax(S, 1)) - eye) + (np.exp(_log_softmax(S, 0)) - eye)
    return _cosine_backward(F_l, F_h, G * (0.5 / (B * tau)))


def combined_alignment(F_l, F_h, T, y, tau: float = CLIP_TAU) -> float:
    """Lite-text KL + heavy-text KL + lite-heavy InfoNCE."""
    return kl_contrastive(F_l, T, y, tau) + kl_contrastive(F_h, T, y, tau) + ce_contrastive(F_l, F_h, tau)


def combined_alignment_grad(F_l, F_h, T, y, tau: float = CLIP_TAU):
    """Gradients with respect to ``(F_l, F_h, T)``."""
    gl1, gt1 = kl_contrastive_grad(F_l, T, y, tau)
    gh1, gt2 = kl_contrastive_grad(F_h, T, y, tau)
    gl2, gh2 = ce_contrastive_grad(F_l, F_h, tau)
    return gl1 + gl2, gh1 + gh2, gt1 + gt2


def _vec(v, name):
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} has non-finite values")
    return a


def svsa_loss(pred, motion) -> float:
    """``1 - cos(pred, motion)`` for a predicted 2-D view-shift direction.

    A zero motion vector (static camera) has no direction; the loss is
    0.0 there and :func:`svsa_batch_loss` leaves such samples out.
    """
    p = _vec(pred, "pred")
    m = _vec(motion, "motion")
    if not np.any(m):
        return 0.0
    npn = np.linalg.norm(p)
    if npn == 0:
        raise DataError("predicted direction is the zero vector")
    return float(1.0 - np.dot(p, m) / (npn * np.linalg.norm(m)))


def svsa_loss_grad(pred, motion) -> np.ndarray:
    p = _vec(pred, "pred")
    m = _vec(motion, "motion")
    if not np.any(m):
        return np.zeros_like(p)
    npn, nm = np.linalg.norm(p), np.linalg.norm(m)
    if npn == 0:
        raise DataError("predicted direction is the zero vector")
    ph, mh = p / npn, m / nm
    return -(mh - np.dot(ph, mh) * ph) / npn


def svsa_batch_loss(preds, motions) -> tuple[float, np.ndarray]:
    """Mean SVSA loss over non-static samples and the mask of skipped ones."""
    P = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    M = np.atleast_2d(np.asarray(motions, dtype=np.float64))
    if P.shape != M.shape:
        raise DataError(f"shape mismatch {P.shape} vs {M.shape}")
    skipped = ~np.any(M != 0, axis=1)
    vals = [svsa_loss(p, m) for p, m, s in zip(P, M, skipped) if not s]
    return (float(np.mean(vals)) if vals else 0.0), skipped


def _cos_and_grads(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DataError("cosine of a zero vector is undefined")
    ah, bh = a / na, b / nb
    c = float(np.dot(ah, bh))
    return c, (bh - c * ah) / na, (ah - c * bh) / nb


def counterfactual_loss(t_y, v_cf, gamma: float = 0.5, flip: bool = False) -> float:
    """``max(0, gamma - cos(t_y, v_cf)) ** 2``.

    With ``flip=True`` the hinge becomes ``max(0, cos - gamma) ** 2``,
    which pushes the counterfactual away from its original label instead.
    """
    if not -1.0 < gamma < 1.0:
        raise DataError(f"gamma must be in (-1, 1), got {gamma}")
    c, _, _ = _cos_and_grads(_vec(t_y, "t_y"), _vec(v_cf, "v_cf"))
    gap = (c - gamma) if flip else (gamma - c)
    return max(0.0, gap) ** 2


def counterfactual_loss_grad(t_y, v_cf, gamma: float = 0.5, flip: bool = False):
    """Gradients with respect to ``(t_y, v_cf)``."""
    c, gt, gv = _cos_and_grads(_vec(t_y, "t_y"), _vec(v_cf, "v_cf"))
    gap = (c - gamma) if flip else (gamma - c)
    dc = 2.0 * max(0.0, gap) * (1.0 if flip else -1.0)
    return dc * gt, dc * gv


def total_loss(parts, lambda1: float = LAMBDA_SVSA, lambda2: float = LAMBDA_CF) -> float:
    """``L_CL + lambda1 * L_SVSA + lambda2 * L_CF`` from ``parts = (cl, svsa, cf)``."""
    cl, svsa, cf = (float(p) for p in parts)
    return cl + lambda1 * svsa + lambda2 * cf
