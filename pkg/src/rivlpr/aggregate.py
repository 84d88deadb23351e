"""Optimal-transport aggregation of patch features into a global descriptor.

A pointwise score map assigns every patch a affinity to m learnable
clusters; entropically regularized optimal transport (Sinkhorn iterations
with uniform marginals) turns the scores into a transport plan; cluster
features are the plan-weighted sums of pointwise-compressed patch features.
A two-layer head compresses the frozen global token.  The descriptor is the
L2-normalized concatenation of the flattened cluster features and the token
embedding, length m*l + e.

Because the transport plan is equivariant to row permutations of the score
matrix and the cluster sum is permutation-invariant, the descriptor is
invariant to cyclic column shifts of the patch grid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import PatchFeatureGrid

_DSC_MAGIC = b"DSC1"

DEFAULT_SINKHORN_ITERS = 100
DEFAULT_SINKHORN_REG = 1.0

# multiplicative residual magnitude that triggers log-absorption
_ABSORB_LIMIT = 1e30


def sinkhorn(S: np.ndarray, iters: int = DEFAULT_SINKHORN_ITERS, reg: float = DEFAULT_SINKHORN_REG) -> np.ndarray:
    """Transport plan with uniform marginals from an n x m score matrix.

    Scores are affinities: the entropic kernel exponent is M = S/reg, so
    higher-scoring cluster assignments receive more mass.  Each round
    updates the column scaling from the rows, then the row scaling from the
    columns, exactly as the log-domain recurrences

        v_k = log b_k - logsumexp_i(M_ik + u_i)
        u_i = log a_i - logsumexp_k(M_ik + v_k)

    starting from u = 0, with a_i = 1/n and b_j = 1/m.  The returned plan is
    R = exp(M + u + v); after the final row update its row sums equal 1/n
    exactly and its column sums converge to 1/m.

    Internally the iteration runs on a rescaled kernel with multiplicative
    residuals (one matrix-vector product per half-round), absorbing the
    residuals into log-domain shifts whenever they drift; this is
    mathematically identical to the recurrences above.  Inputs extreme
    enough to defeat the rescaling fall back to plain log-domain updates.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 1 or S.shape[1] < 1:
        raise ValueError(f"score matrix must be 2-D and non-empty, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ValueError("score matrix contains non-finite entries")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if reg <= 0:
        raise ValueError("regularization must be positive")
    R = _sinkhorn_stabilized(S, iters, reg)
    if R is None:
        R, _, _ = _sinkhorn_logdomain(S, iters, reg)
    return R


def _sinkhorn_stabilized(S: np.ndarray, iters: int, reg: float):
    n, m = S.shape
    M = S / reg
    if M.max() > 500.0 or M.min() < -500.0:
        return None
    a = 1.0 / n
    b = 1.0 / m
    alpha = np.zeros(n)
    beta = np.zeros(m)
    K = np.exp(M)
    us = np.ones(n)
    vs = np.ones(m)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(iters):
            vs = b / (K.T @ us)
            us = a / (K @ vs)
            if not (np.all(np.isfinite(us)) and np.all(np.isfinite(vs))):
                return None
            hi = max(us.max(), vs.max())
            lo = min(us.min(), vs.min())
            if hi > _ABSORB_LIMIT or (lo > 0 and lo < 1.0 / _ABSORB_LIMIT):
                alpha += np.log(us)
                beta += np.log(vs)
                exponent = M + alpha[:, None] + beta[None, :]
                if exponent.max() > 700.0:
                    return None
                K = np.exp(exponent)
                us = np.ones(n)
                vs = np.ones(m)
        R = K * us[:, None] * vs[None, :]
    if not np.all(np.isfinite(R)):
        return None
    return R


def _sinkhorn_logdomain(S: np.ndarray, iters: int, reg: float):
    """Plain log-domain updates; also returns per-round duals for backprop."""
    n, m = S.shape
    M = S / reg
    log_a = -np.log(n)
    log_b = -np.log(m)
    u = np.zeros(n)
    u_hist = np.empty((iters, n))
    v_hist = np.empty((iters, m))
    for t in range(iters):
        v = log_b - _logsumexp(M + u[:, None], axis=0)
        u = log_a - _logsumexp(M + v[None, :], axis=1)
        u_hist[t] = u
        v_hist[t] = v
    R = np.exp(M + u[:, None] + v[None, :])
    return R, u_hist, v_hist


def _logsumexp(A: np.ndarray, axis: int) -> np.ndarray:
    amax = A.max(axis=axis, keepdims=True)
    out = np.log(np.exp(A - amax).sum(axis=axis)) + np.squeeze(amax, axis=axis)
    return out


def sinkhorn_backward(dR: np.ndarray, S: np.ndarray, u_hist: np.ndarray, v_hist: np.ndarray, reg: float) -> np.ndarray:
    """dL/dS for the unrolled log-domain iteration that produced (u_hist, v_hist)."""
    n, m = S.shape
    M = S / reg
    iters = u_hist.shape[0]
    R = np.exp(M + u_hist[-1][:, None] + v_hist[-1][None, :])
    G = dR * R
    dM = G.copy()
    du = G.sum(axis=1)
    dv = G.sum(axis=0)
    for t in range(iters - 1, -1, -1):
        # u_t = log a - logsumexp_k(M + v_t): softmax rows of (M + v_t)
        P = np.exp(M + u_hist[t][:, None] + v_hist[t][None, :]) * n
        dM -= du[:, None] * P
        dv -= du @ P
        # v_t = log b - logsumexp_i(M + u_{t-1}): softmax cols of (M + u_{t-1})
        u_prev = u_hist[t - 1] if t > 0 else np.zeros(n)
        Q = np.exp(M + u_prev[:, None] + v_hist[t][None, :]) * m
        dM -= Q * dv[None, :]
        du = -(Q @ dv)
        dv = np.zeros(m)
    return dM / reg


@dataclass
class AggregateParams:
    """Aggregation weights and Sinkhorn settings.

    score_w/score_b map C-dim patch features to m cluster scores;
    feat_w/feat_b compress them to l dims; token_w1/b1, token_w2/b2 form the
    two-layer token head C -> hidden -> e (ReLU between).
    """

    score_w: np.ndarray
    score_b: np.ndarray
    feat_w: np.ndarray
    feat_b: np.ndarray
    token_w1: np.ndarray
    token_b1: np.ndarray
    token_w2: np.ndarray
    token_b2: np.ndarray
    sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS
    sinkhorn_reg: float = DEFAULT_SINKHORN_REG

    def __post_init__(self):
        if self.sinkhorn_iters < 1 or self.sinkhorn_reg <= 0:
            raise ValueError("need sinkhorn_iters >= 1 and sinkhorn_reg > 0")
        C, m = self.score_w.shape
        if self.feat_w.shape[0] != C or self.token_w1.shape[0] != C:
            raise ValueError("inconsistent feature width across maps")
        if self.token_w1.shape[1] != self.token_w2.shape[0]:
            raise ValueError("token head hidden widths disagree")

    @property
    def channels(self) -> int:
        return self.score_w.shape[0]

    @property
    def num_clusters(self) -> int:
        return self.score_w.shape[1]

    @property
    def cluster_dim(self) -> int:
        return self.feat_w.shape[1]

    @property
    def token_dim(self) -> int:
        return self.token_w2.shape[1]

    @property
    def descriptor_dim(self) -> int:
        return self.num_clusters * self.cluster_dim + self.token_dim

    @classmethod
    def random(
        cls,
        channels: int,
        num_clusters: int = 128,
        cluster_dim: int = 64,
        token_dim: int = 256,
        hidden: int = 512,
        rng: np.random.Generator | None = None,
        scale: float = 1.0,
        sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS,
        sinkhorn_reg: float = DEFAULT_SINKHORN_REG,
    ) -> "AggregateParams":
        if rng is None:
            rng = np.random.default_rng(0)
        s = scale / np.sqrt(channels)
        return cls(
            score_w=rng.normal(0.0, s, (channels, num_clusters)),
            score_b=np.zeros(num_clusters),
            feat_w=rng.normal(0.0, s, (channels, cluster_dim)),
            feat_b=np.zeros(cluster_dim),
            token_w1=rng.normal(0.0, s, (channels, hidden)),
            token_b1=np.zeros(hidden),
            token_w2=rng.normal(0.0, scale / np.sqrt(hidden), (hidden, token_dim)),
            token_b2=np.zeros(token_dim),
            sinkhorn_iters=sinkhorn_iters,
            sinkhorn_reg=sinkhorn_reg,
        )

    ARRAY_FIELDS = (
        "score_w", "score_b", "feat_w", "feat_b",
        "token_w1", "token_b1", "token_w2", "token_b2",
    )

    def arrays(self):
        for f in self.ARRAY_FIELDS:
            yield f, getattr(self, f)

    def copy(self) -> "AggregateParams":
        return AggregateParams(
            *(getattr(self, f).copy() for f in self.ARRAY_FIELDS),
            sinkhorn_iters=self.sinkhorn_iters,
            sinkhorn_reg=self.sinkhorn_reg,
        )


@dataclass(frozen=True)
class Descriptor:
    """L2-normalized global descriptor; `valid` is False for degenerate input."""

    values: np.ndarray
    valid: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", v)
        if self.valid and abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError("descriptor is not unit-norm")

    def __len__(self) -> int:
        return self.values.shape[0]


def aggregate(grid: PatchFeatureGrid, params: AggregateParams, want_cache: bool = False):
    """Pool a patch-feature grid into a Descriptor.

    If the pre-normalization vector has norm below 1e-12 (possible only for
    fully degenerate inputs) the descriptor is returned zero-filled and
    flagged invalid instead of dividing by zero.
    """
    F = grid.flat()
    if not np.all(np.isfinite(F)):
        raise ValueError("patch features contain non-finite values")
    S = F @ params.score_w + params.score_b
    u_hist = v_hist = None
    if want_cache:
        R, u_hist, v_hist = _sinkhorn_logdomain(S, params.sinkhorn_iters, params.sinkhorn_reg)
    else:
        R = sinkhorn(S, params.sinkhorn_iters, params.sinkhorn_reg)
    Fbar = F @ params.feat_w + params.feat_b
    V = R.T @ Fbar
    tok = grid.global_token
    t1 = tok @ params.token_w1 + params.token_b1
    a1 = np.maximum(t1, 0.0)
    G = a1 @ params.token_w2 + params.token_b2
    raw = np.concatenate([V.ravel(), G])
    norm = float(np.linalg.norm(raw))
    if norm < 1e-12:
        desc = Descriptor(np.zeros_like(raw), valid=False)
        cache = None
    else:
        desc = Descriptor(raw / norm)
        cache = (F, S, R, u_hist, v_hist, Fbar, V, tok, t1, a1, raw, norm)
    if want_cache:
        return desc, cache
    return desc


def aggregate_backward(ddesc: np.ndarray, cache, params: AggregateParams):
    """Backprop dL/ddescriptor to (dF, dparams).

    `cache` must come from ``aggregate(..., want_cache=True)``.  The global
    token is produced by the frozen backbone, so its gradient is dropped.
    """
    F, S, R, u_hist, v_hist, Fbar, V, tok, t1, a1, raw, norm = cache
    m, l = V.shape
    # through the normalization: d(raw) = (ddesc - desc (desc . ddesc)) / norm
    desc = raw / norm
    draw = (ddesc - desc * float(desc @ ddesc)) / norm
    dV = draw[: m * l].reshape(m, l)
    dG = draw[m * l :]

    grads = {}
    grads["token_w2"] = np.outer(a1, dG)
    grads["token_b2"] = dG
    da1 = params.token_w2 @ dG
    dt1 = da1 * (t1 > 0)
    grads["token_w1"] = np.outer(tok, dt1)
    grads["token_b1"] = dt1

    dR = Fbar @ dV.T
    dFbar = R @ dV
    grads["feat_w"] = F.T @ dFbar
    grads["feat_b"] = dFbar.sum(axis=0)
    dF = dFbar @ params.feat_w.T

    dS = sinkhorn_backward(dR, S, u_hist, v_hist, params.sinkhorn_reg)
    grads["score_w"] = F.T @ dS
    grads["score_b"] = dS.sum(axis=0)
    dF += dS @ params.score_w.T
    return dF, grads


def descriptor_distance(a: Descriptor, b: Descriptor) -> float:
    """Euclidean distance between unit descriptors (monotone in cosine)."""
    if not (a.valid and b.valid):
        raise ValueError("descriptor_distance on invalid descriptor")
    return float(np.linalg.norm(a.values - b.values))


# ---------------------------------------------------------------------------
# DSC1 container + sidecar index
# ---------------------------------------------------------------------------

def save_descriptors(path, matrix: np.ndarray, metadata: list[dict] | None = None) -> None:
    """Write DSC1 (magic, u32 count/dim, float32 rows) plus a `.idx` sidecar.

    `metadata` rows (id, timestamp, position, quaternion) are serialized as
    canonical JSON so identical inputs give identical bytes.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("descriptor matrix must be 2-D")
    count, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_DSC_MAGIC)
        fh.write(struct.pack("<II", count, dim))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    if metadata is not None:
        if len(metadata) != count:
            raise ValueError("metadata length must match descriptor count")
        rows = [
            {
                "id": str(md["id"]),
                "timestamp": float(md["timestamp"]),
                "position": [float(x) for x in md["position"]],
                "quaternion": [float(x) for x in md.get("quaternion", (0.0, 0.0, 0.0, 1.0))],
            }
            for md in metadata
        ]
        with open(str(path) + ".idx", "w", encoding="utf-8") as fh:
            json.dump(rows, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def load_descriptors(path):
    """Read a DSC1 file; returns (matrix float64, metadata or None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _DSC_MAGIC:
        raise ValueError(f"{path}: not a DSC1 file")
    count, dim = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + count * dim * 4:
        raise ValueError(f"{path}: truncated DSC1 payload")
    matrix = np.frombuffer(raw, dtype="<f4", offset=12).reshape(count, dim).astype(np.float64)
    metadata = None
    idx_path = str(path) + ".idx"
    try:
        with open(idx_path, "r", encoding="utf-8") as fh:
            metadata = json.load(fh)
    except FileNotFoundError:
        pass
    return matrix, metadata
