"""Descriptor database, top-1 retrieval, and place-recognition metrics.

Retrieval is an exhaustive scan over unit descriptors.  A query counts as
correct when its nearest admissible database entry lies within the positive
radius of the query pose.  The F1 sweep walks every distinct observed top-1
distance as an acceptance threshold; a query predicted positive at a
threshold is a true positive exactly when its retrieval was correct.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregate import Descriptor


@dataclass(frozen=True)
class EvalProtocol:
    """Retrieval protocol settings.

    intra mode queries a sequence against its own past (after `warmup`
    seconds, excluding entries younger than `temporal_exclusion` seconds);
    inter mode queries one sequence against a distinct database sequence.
    """

    mode: str = "inter"
    positive_radius: float = 10.0
    temporal_exclusion: float = 60.0
    warmup: float = 90.0

    def __post_init__(self):
        if self.mode not in ("intra", "inter"):
            raise ValueError("mode must be 'intra' or 'inter'")
        if self.positive_radius <= 0:
            raise ValueError("positive_radius must be positive")


@dataclass(frozen=True)
class DescriptorDB:
    """Unit-norm descriptor rows plus per-row scan id, position, timestamp."""

    matrix: np.ndarray
    ids: tuple
    positions: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        positions = np.asarray(self.positions, dtype=np.float64)
        timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("matrix must be (count, dim)")
        n = matrix.shape[0]
        if len(self.ids) != n or positions.shape != (n, 3) or timestamps.shape != (n,):
            raise ValueError("metadata length must match descriptor count")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "timestamps", timestamps)

    def __len__(self) -> int:
        return self.matrix.shape[0]


def retrieve_top1(db: DescriptorDB, query: Descriptor | np.ndarray, exclusion: tuple[float, float] | None = None):
    """Nearest database row to the query, or None when nothing is admissible.

    `exclusion` is a closed timestamp interval [lo, hi]; rows inside it are
    skipped.  Distance ties resolve to the lowest row index.
    """
    q = query.values if isinstance(query, Descriptor) else np.asarray(query, dtype=np.float64)
    admissible = np.ones(len(db), dtype=bool)
    if exclusion is not None:
        lo, hi = exclusion
        admissible &= ~((db.timestamps >= lo) & (db.timestamps <= hi))
    if not admissible.any():
        return None
    idx = np.nonzero(admissible)[0]
    d = np.linalg.norm(db.matrix[idx] - q, axis=1)
    best = idx[np.argmin(d)]  # argmin returns the first minimum: lowest index
    return int(best), float(np.linalg.norm(db.matrix[best] - q))


def recall_at_1(results, radius: float = 10.0) -> float:
    """Fraction of queries whose retrieved pose lies within `radius`.

    `results` rows are (retrieved_position, query_position) pairs.
    """
    if len(results) == 0:
        raise ValueError("recall_at_1 needs at least one query")
    hits = sum(
        1 for retrieved, query in results
        if np.linalg.norm(np.asarray(retrieved) - np.asarray(query)) <= radius
    )
    return hits / len(results)


def max_f1(results) -> tuple[float, float]:
    """Best F1 over thresholds swept through the observed top-1 distances.

    `results` rows are (top1_distance, is_true_match).  At threshold t a
    query is predicted positive iff its distance <= t.  Returns (f1,
    threshold); when no query has a true match the F1 is 0 at nan, the
    caller's status flag.
    """
    if len(results) == 0:
        raise ValueError("max_f1 needs at least one query")
    curve = pr_curve(results)
    if not curve:
        return 0.0, float("nan")
    best = max(curve, key=lambda row: (2 * row[1] * row[2] / (row[1] + row[2]) if row[1] + row[2] > 0 else 0.0))
    p, r = best[1], best[2]
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return f1, best[0]


def pr_curve(results) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) at every distinct observed distance."""
    d = np.asarray([row[0] for row in results], dtype=np.float64)
    truth = np.asarray([bool(row[1]) for row in results])
    total_true = int(truth.sum())
    if total_true == 0:
        return []
    out = []
    for t in np.unique(d):
        predicted = d <= t
        tp = int((predicted & truth).sum())
        fp = int((predicted & ~truth).sum())
        fn = int((~predicted & truth).sum())
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        out.append((float(t), precision, recall))
    return out


def run_protocol(db_seq: DescriptorDB, query_seq: DescriptorDB | None, proto: EvalProtocol) -> dict:
    """Full retrieval evaluation under a protocol; returns the report dict.

    intra mode: queries and database are the same sequence; a query at time
    t searches rows with timestamp <= t - temporal_exclusion and runs only
    after `warmup` seconds past the sequence start.
    inter mode: every query-sequence row searches the whole database.
    """
    intra = proto.mode == "intra"
    if intra:
        query_seq = db_seq
    if query_seq is None:
        raise ValueError("inter mode needs a query sequence")

    rows = []
    t0 = float(db_seq.timestamps.min()) if len(db_seq) else 0.0
    for qi in range(len(query_seq)):
        t_q = float(query_seq.timestamps[qi])
        if intra:
            if t_q < t0 + proto.warmup:
                continue
            hit = retrieve_top1(db_seq, query_seq.matrix[qi], exclusion=(t_q - proto.temporal_exclusion, np.inf))
        else:
            hit = retrieve_top1(db_seq, query_seq.matrix[qi])
        if hit is None:
            continue
        idx, dist = hit
        correct = np.linalg.norm(db_seq.positions[idx] - query_seq.positions[qi]) <= proto.positive_radius
        rows.append({
            "query": qi,
            "retrieved": idx,
            "distance": dist,
            "correct": bool(correct),
            "retrieved_position": db_seq.positions[idx],
            "query_position": query_seq.positions[qi],
        })

    if not rows:
        return {"status": "no-queries", "num_queries": 0, "recall_at_1": None, "max_f1": None,
                "f1_threshold": None, "pr_curve": []}

    r1 = recall_at_1([(r["retrieved_position"], r["query_position"]) for r in rows], proto.positive_radius)
    f1_rows = [(r["distance"], r["correct"]) for r in rows]
    curve = pr_curve(f1_rows)
    f1, threshold = max_f1(f1_rows)
    status = "ok" if curve else "no-true-matches"
    return {
        "status": status,
        "num_queries": len(rows),
        "recall_at_1": r1,
        "max_f1": f1,
        "f1_threshold": threshold,
        "pr_curve": curve,
        "rows": rows,
    }


def write_pr_svg(path, curve, title: str = "precision-recall") -> None:
    """Tiny dependency-free SVG of a PR curve; byte-deterministic."""
    W, H, pad = 480, 360, 40

    def sx(r):
        return pad + r * (W - 2 * pad)

    def sy(p):
        return H - pad - p * (H - 2 * pad)

    pieces = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W // 2}" y="{H - 8}" font-size="12" text-anchor="middle">recall</text>',
        f'<text x="12" y="{H // 2}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {H // 2})">precision</text>',
        f'<text x="{W // 2}" y="20" font-size="13" text-anchor="middle">{title}</text>',
    ]
    if curve:
        ordered = sorted(curve, key=lambda row: (row[2], -row[1]))
        points = " ".join(f"{sx(r):.2f},{sy(p):.2f}" for _, p, r in ordered)
        pieces.append(f'<polyline fill="none" stroke="#1f6fb2" stroke-width="2" points="{points}"/>')
    pieces.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(pieces) + "\n")
