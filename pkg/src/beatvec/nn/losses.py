"""Cosine similarity, the negative-sampling cosine softmax, and cross-entropy.

All functions return ``(loss, grad...)`` pairs so callers can chain the
gradient straight into a layer stack's ``backward``.
"""

from __future__ import annotations

import numpy as np

N_CANDIDATES = 5  # the true reconstruction plus four negatives


def cosine_similarity(x, y) -> float:
    """x.y / (|x||y|); 0 by convention when either vector has zero norm."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def _cosine_rows(q, r):
    """Row-wise cosine similarity plus the pieces its gradient needs."""
    nq = np.linalg.norm(q, axis=-1)
    nr = np.linalg.norm(r, axis=-1)
    dot = np.einsum("...d,...d->...", q, r)
    denom = nq * nr
    ok = denom > 0
    sim = np.where(ok, dot / np.where(ok, denom, 1.0), 0.0)
    return sim, nq, nr, ok


def _cosine_grad_r(q, r, sim, nq, nr, ok):
    """d sim(q, r) / d r, zero where the similarity is degenerate."""
    safe_nq = np.where(ok, nq, 1.0)[..., None]
    safe_nr = np.where(ok, nr, 1.0)[..., None]
    g = q / (safe_nq * safe_nr) - sim[..., None] * r / safe_nr**2
    return np.where(ok[..., None], g, 0.0)


def _cosine_grad_q(q, r, sim, nq, nr, ok):
    return _cosine_grad_r(r, q, sim, nr, nq, ok)


def _log_softmax(s):
    shifted = s - s.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def negsample_softmax_loss(reconstruction, target, negatives):
    """Loss and gradients for one (target, reconstruction) pair.

    ``P = exp(sim(Q,R)) / sum_{d in D} exp(sim(Q,d))`` with D the
    reconstruction plus the negatives; the loss is ``-log P``.

    Returns ``(loss, d_reconstruction, d_negatives)``.
    """
    q = np.asarray(target, dtype=np.float64).ravel()
    cands = np.vstack([np.ravel(reconstruction)] + [np.ravel(n) for n in negatives]).astype(np.float64)
    if cands.shape[0] != N_CANDIDATES:
        raise ValueError(f"expected {N_CANDIDATES - 1} negatives, got {cands.shape[0] - 1}")
    qs = np.broadcast_to(q, cands.shape)
    sim, nq, nr, ok = _cosine_rows(qs, cands)
    logp = _log_softmax(sim)
    loss = float(-logp[0])
    dsim = np.exp(logp)
    dsim[0] -= 1.0
    dc = dsim[:, None] * _cosine_grad_r(qs, cands, sim, nq, nr, ok)
    return loss, dc[0], dc[1:]


def negsample_batch_loss(targets, outputs, negative_idx, target_grad: bool = False):
    """Mean negative-sampling loss over a batch.

    ``targets`` and ``outputs`` are (N, D). Row ``i`` competes against the
    outputs listed in ``negative_idx[i]`` (shape (N, 4)). Gradients flow into
    every output, including those used as negatives for other rows.

    Returns ``(loss, d_outputs)`` or, with ``target_grad``,
    ``(loss, d_outputs, d_targets)``.
    """
    n = targets.shape[0]
    idx = np.concatenate([np.arange(n)[:, None], negative_idx], axis=1)  # N,5
    nq = np.linalg.norm(targets, axis=1)
    nr = np.linalg.norm(outputs, axis=1)
    qz, rz = nq == 0, nr == 0
    inv_q = np.where(qz, 0.0, 1.0 / np.where(qz, 1.0, nq))
    inv_r = np.where(rz, 0.0, 1.0 / np.where(rz, 1.0, nr))
    # all pairwise similarities; zero-norm rows give 0 by convention
    gram = targets @ outputs.T
    sim_all = gram * inv_q[:, None] * inv_r[None, :]
    rows = np.arange(n)[:, None]
    sim = sim_all[rows, idx]
    logp = _log_softmax(sim)
    loss = float(-logp[:, 0].mean())
    dsim = np.exp(logp)
    dsim[:, 0] -= 1.0
    dsim /= n
    # A[i, j]: total weight of sim(q_i, r_j) in the loss gradient
    a = np.zeros((n, n))
    np.add.at(a, (np.repeat(np.arange(n), idx.shape[1]), idx.ravel()), dsim.ravel())
    a_sim = a * sim_all
    d_out = (a.T * inv_r[:, None]) @ (targets * inv_q[:, None])
    d_out -= (a_sim.sum(axis=0) * inv_r**2)[:, None] * outputs
    if not target_grad:
        return loss, d_out
    d_t = (a * inv_q[:, None]) @ (outputs * inv_r[:, None])
    d_t -= (a_sim.sum(axis=1) * inv_q**2)[:, None] * targets
    return loss, d_out, d_t


def sample_negatives(rng: np.random.Generator, n: int, k: int = N_CANDIDATES - 1) -> np.ndarray:
    """For each of ``n`` batch rows pick ``k`` other rows as negatives.

    Draws without replacement when the batch has at least ``k`` other rows,
    with replacement otherwise; a batch of one uses the row itself.
    """
    out = np.empty((n, k), dtype=np.int64)
    if n == 1:
        out.fill(0)
        return out
    for i in range(n):
        pick = rng.choice(n - 1, size=k, replace=(n - 1) < k)
        out[i] = pick + (pick >= i)
    return out


def softmax(logits):
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64)))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns ``(loss, d_logits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    n = logits.shape[0]
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return loss, d / n
