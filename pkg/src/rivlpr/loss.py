"""Patch-level contrastive loss and truncated smooth average-precision loss.

Both losses return their value together with analytic gradients with respect
to every participating input, so the training loop needs no autodiff.  The
gradients are validated against central finite differences in the test
suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class LossConfig:
    """Temperatures and mixing weights of the training objective."""

    tau_l: float = 0.2
    tau_g: float = 0.01
    truncation: int = 4
    lambda_mix: float = 2.0

    def __post_init__(self):
        if self.tau_l <= 0 or self.tau_g <= 0:
            raise ValueError("temperatures must be positive")
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1")
        if self.lambda_mix < 0:
            raise ValueError("lambda_mix must be >= 0")


@dataclass
class LossValue:
    """Scalar loss plus gradients keyed by input name."""

    value: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()


def patch_infonce(F1: np.ndarray, F2: np.ndarray, pairs, tau_l: float = 0.2) -> LossValue:
    """Contrastive loss over mined patch pairs of two feature sets.

    For each positive (p1, p2) the anchor similarities are cos(F1[p1],
    F2[p2]); the contrast set mixes both directions: F1[p1] against the
    pair's side-B negatives and F2[p2] against its side-A negatives.  The
    per-pair term is -log softmax of the positive among its negatives at
    temperature `tau_l`; the loss is the mean over pairs.
    """
    F1 = np.asarray(F1, dtype=np.float64)
    F2 = np.asarray(F2, dtype=np.float64)
    if not (np.all(np.isfinite(F1)) and np.all(np.isfinite(F2))):
        raise ValueError("features must be finite")
    positives = list(pairs.positives)
    if not positives:
        raise ValueError("need at least one positive pair")
    neg_a = list(pairs.negatives_a)
    neg_b = list(pairs.negatives_b)

    norm1 = np.linalg.norm(F1, axis=1)
    norm2 = np.linalg.norm(F2, axis=1)

    def rows(F, norms, idx):
        if np.any(norms[idx] == 0.0):
            raise ValueError("zero-norm feature vector: cosine similarity undefined")
        return F[idx] / norms[idx][:, None]

    dF1 = np.zeros_like(F1)
    dF2 = np.zeros_like(F2)
    total = 0.0
    inv_p = 1.0 / len(positives)
    for t, (p1, p2) in enumerate(positives):
        na = np.asarray(neg_a[t] if t < len(neg_a) else (), dtype=np.intp)
        nb = np.asarray(neg_b[t] if t < len(neg_b) else (), dtype=np.intp)
        if na.size == 0 and nb.size == 0:
            raise ValueError(f"positive {t} has no negatives")
        a = rows(F1, norm1, np.array([p1]))[0]
        b = rows(F2, norm2, np.array([p2]))[0]
        s_p = float(a @ b)
        Ub = rows(F2, norm2, nb) if nb.size else np.zeros((0, F2.shape[1]))
        Ua = rows(F1, norm1, na) if na.size else np.zeros((0, F1.shape[1]))
        s_b = Ub @ a  # anchor in image A against side-B negatives
        s_a = Ua @ b  # anchor in image B against side-A negatives
        z = (np.concatenate([s_b, s_a]) - s_p) / tau_l
        zmax = max(z.max(), 0.0)
        lse = zmax + np.log(np.exp(-zmax) + np.exp(z - zmax).sum())
        total += lse

        # softmax weights of the negatives; the positive holds the rest
        w = np.exp(z - lse)
        coeff_pos = -inv_p * float(w.sum()) / tau_l  # = -(1 - w_positive)
        dF1[p1] += coeff_pos * (b - s_p * a) / norm1[p1]
        dF2[p2] += coeff_pos * (a - s_p * b) / norm2[p2]
        cb = inv_p * w[: nb.size] / tau_l
        ca = inv_p * w[nb.size :] / tau_l
        if nb.size:
            dF1[p1] += (cb[:, None] * (Ub - s_b[:, None] * a)).sum(axis=0) / norm1[p1]
            np.add.at(dF2, nb, cb[:, None] * (a - s_b[:, None] * Ub) / norm2[nb][:, None])
        if na.size:
            dF2[p2] += (ca[:, None] * (Ua - s_a[:, None] * b)).sum(axis=0) / norm2[p2]
            np.add.at(dF1, na, ca[:, None] * (b - s_a[:, None] * Ua) / norm1[na][:, None])
    return LossValue(total * inv_p, {"F1": dF1, "F2": dF2})


def tsap(
    descriptors: np.ndarray,
    positives_of: dict[int, list[int]],
    tau_g: float = 0.01,
    truncation: int = 4,
) -> LossValue:
    """Truncated smooth average-precision loss over a descriptor batch.

    For query q with positive set P, each positive i is scored by its
    smoothed rank among the positives over its smoothed rank among the
    candidates: rank(i, S) = 1 + sum_j H(d(q,i) - d(q,j)) with the sigmoid
    step H(x) = 1 / (1 + exp(-x / tau)) counting set members closer to q
    than i.  The candidate set is the `truncation` descriptors nearest to q
    (q itself excluded) united with P; keeping all positives in it bounds
    every ratio by one, so the loss mean(1 - AP_q) stays in [0, 1] and
    vanishes exactly when no negative outranks any positive inside any
    query's truncated shortlist.

    Queries without positives are skipped and reported in `warnings`.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a (batch, dim) descriptor matrix with batch >= 2")
    B = X.shape[0]
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt(np.maximum((diff * diff).sum(axis=2), 0.0))

    dX = np.zeros_like(X)
    warnings = []
    queries = []
    for q, pos in positives_of.items():
        pos = [p for p in pos if p != q]
        if not pos:
            warnings.append(f"query {q} has no positives in batch; skipped")
            continue
        queries.append((q, sorted(pos)))
    if not queries:
        raise ValueError("no query has positives in the batch")

    total = 0.0
    inv_q = 1.0 / len(queries)
    for q, pos in queries:
        dq = dist[q]
        others = np.array([j for j in range(B) if j != q])
        order = others[np.argsort(dq[others], kind="stable")]
        shortlist = order[: min(truncation, len(order))]
        cand = np.array(sorted(set(shortlist.tolist()) | set(pos)))
        P = np.array(pos)
        # H(x) = sigmoid(x / tau): ~1 when candidate j is closer than i
        Xp = (dq[P][:, None] - dq[P][None, :]) / tau_g
        Hp = expit(Xp)
        np.fill_diagonal(Hp, 0.0)
        Xc = (dq[P][:, None] - dq[cand][None, :]) / tau_g
        Hc = expit(Xc)
        same = P[:, None] == cand[None, :]
        Hc = np.where(same, 0.0, Hc)
        num = 1.0 + Hp.sum(axis=1)
        den = 1.0 + Hc.sum(axis=1)
        ap = float((num / den).mean())
        total += 1.0 - ap

        # gradients: dL/dnum_i and dL/dden_i, then through H and distances
        inv_p = 1.0 / len(P)
        dnum = -inv_q * inv_p / den
        dden = inv_q * inv_p * num / (den * den)
        Wp = dnum[:, None] * Hp * (1.0 - Hp) / tau_g
        np.fill_diagonal(Wp, 0.0)
        Wc = dden[:, None] * Hc * (1.0 - Hc) / tau_g
        Wc = np.where(same, 0.0, Wc)
        # each weight multiplies x_ij = d(q,i) - d(q,j)
        dd = np.zeros(B)
        np.add.at(dd, P, Wp.sum(axis=1) + Wc.sum(axis=1))
        np.add.at(dd, P, -Wp.sum(axis=0))
        np.add.at(dd, cand, -Wc.sum(axis=0))
        # distances back to descriptors: d = |x_q - x_j|
        for j in np.nonzero(dd)[0]:
            if dist[q, j] < 1e-12:
                continue
            g = dd[j] * (X[q] - X[j]) / dist[q, j]
            dX[q] += g
            dX[j] -= g
    return LossValue(total * inv_q, {"descriptors": dX}, tuple(warnings))


def combined_loss(lp: LossValue, ltsap: LossValue, lambda_mix: float = 2.0) -> LossValue:
    """Weighted sum of the patch loss and the ranking loss, gradients merged."""
    if not (np.isfinite(lp.value) and np.isfinite(ltsap.value)):
        raise ValueError("loss values must be finite")
    grads: dict[str, np.ndarray] = {}
    for k, g in lp.gradients.items():
        grads[k] = g.copy()
    for k, g in ltsap.gradients.items():
        if k in grads:
            grads[k] = grads[k] + lambda_mix * g
        else:
            grads[k] = lambda_mix * g
    return LossValue(lp.value + lambda_mix * ltsap.value, grads, lp.warnings + ltsap.warnings)
