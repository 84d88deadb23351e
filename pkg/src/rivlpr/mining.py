"""Geometric mining of positive and negative patch pairs for local supervision.

Two scans taken near each other are aligned (pose prior refined by ICP on
voxel-downsampled clouds); the second scan is reprojected into the first
scan's image geometry.  A patch location is a positive correspondence when
the two images overlap densely there and agree on range up to a robust
(median absolute deviation) threshold.  Negatives are patches far from a
positive in the cylindrical patch grid.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .riv import PATCH, RivConfig, RivImage, project_scan
from .scan_geometry import (
    AlignmentError,
    Pose,
    RigidTransform,
    Scan,
    icp_align,
    relative_transform,
    voxel_downsample,
)

log = logging.getLogger(__name__)


class MiningUnavailableError(RuntimeError):
    """Raised when a scan pair cannot be aligned well enough to mine."""


@dataclass(frozen=True)
class MiningConfig:
    """Patch-pair mining thresholds and alignment settings."""

    rho_valid: float = 0.5
    mad_k: float = 3.0
    v_dist: int = 3
    h_dist: int = 20
    num_positives: int = 192
    num_negatives: int = 128
    voxel_cell: float = 0.4
    icp_max_iter: int = 50
    icp_tol: float = 1e-4
    max_pair_distance: float = 10.0

    def __post_init__(self):
        if not (0 < self.rho_valid <= 1):
            raise ValueError("rho_valid must be in (0, 1]")
        if self.v_dist < 1 or self.h_dist < 1:
            raise ValueError("v_dist and h_dist must be >= 1")
        if self.num_positives < 1 or self.num_negatives < 1:
            raise ValueError("pair budgets must be >= 1")


@dataclass(frozen=True)
class PatchPairSet:
    """Mined supervision for one image pair.

    positives    : list of (p1, p2) flat patch indices; p1 indexes the first
                   image's grid, p2 the reprojected second image's grid
    negatives_a  : per-positive flat patch indices in the first image
    negatives_b  : per-positive flat patch indices in the second image
    grid_shape   : (H', W') of the patch grid both sides share
    """

    positives: tuple
    negatives_a: tuple
    negatives_b: tuple
    grid_shape: tuple
    id_a: str = ""
    id_b: str = ""

    def __len__(self) -> int:
        return len(self.positives)


def patch_grid_shape(img: RivImage) -> tuple[int, int]:
    return img.height // PATCH, img.width // PATCH


def reproject(scan_b: Scan, t_b_to_a: RigidTransform, cfg_a: RivConfig) -> RivImage:
    """Project scan B into image A's geometry after mapping it into A's frame."""
    moved = Scan(t_b_to_a.apply(scan_b.xyz), scan_b.reflectivity, scan_b.timestamp, scan_b.id)
    return project_scan(moved, cfg_a)


def mine_positives(img_a: RivImage, reproj_b: RivImage, cfg: MiningConfig) -> list[tuple[int, int]]:
    """Positive patch locations shared by an image and a reprojection.

    Per patch location: pixels valid in both images form the overlap set;
    the location survives when the overlap exceeds ``rho_valid`` of the
    patch and the mean absolute range difference stays under the adaptive
    threshold median(d) + mad_k * MAD(d) over the signed differences d.
    A perfectly zero residual is accepted outright (the threshold is then
    zero and the strict comparison would reject exact alignment).  At most
    ``num_positives`` survivors are kept, smallest mean residual first.
    """
    if img_a.data.shape != reproj_b.data.shape:
        raise ValueError("image pair must share dimensions")
    hp, wp = patch_grid_shape(img_a)
    if hp == 0 or wp == 0:
        return []
    H, W = hp * PATCH, wp * PATCH

    both = img_a.valid_mask[:H, :W] & reproj_b.valid_mask[:H, :W]
    both_p = both.reshape(hp, PATCH, wp, PATCH).transpose(0, 2, 1, 3).reshape(hp, wp, -1)
    overlap = both_p.sum(axis=2)

    r_a = img_a.ranges()[:H, :W].reshape(hp, PATCH, wp, PATCH).transpose(0, 2, 1, 3).reshape(hp, wp, -1)
    r_b = reproj_b.ranges()[:H, :W].reshape(hp, PATCH, wp, PATCH).transpose(0, 2, 1, 3).reshape(hp, wp, -1)

    accepted = []
    min_overlap = cfg.rho_valid * PATCH * PATCH
    for p in np.nonzero((overlap > min_overlap).ravel())[0]:
        pr, pc = divmod(int(p), wp)
        sel = both_p[pr, pc]
        d = r_a[pr, pc][sel] - r_b[pr, pc][sel]
        med = float(np.median(d))
        mad = float(np.median(np.abs(d - med)))
        tau = med + cfg.mad_k * mad
        delta = float(np.abs(d).mean())
        if delta < tau or delta == 0.0:
            accepted.append((int(p), delta))
    accepted.sort(key=lambda t: (t[1], t[0]))
    return [(p, p) for p, _ in accepted[: cfg.num_positives]]


def cyclic_col_distance(c1: int, c2: int, width: int) -> int:
    d = abs(c1 - c2) % width
    return min(d, width - d)


def admissible_negative(patch: int, positive: int, grid_shape, cfg: MiningConfig) -> bool:
    """A patch is far enough from a positive by rows or by cyclic columns."""
    _, wp = grid_shape
    r_n, c_n = divmod(patch, wp)
    r_p, c_p = divmod(positive, wp)
    return abs(r_n - r_p) >= cfg.v_dist or cyclic_col_distance(c_n, c_p, wp) >= cfg.h_dist


def mine_negatives(
    positives,
    grid_shape: tuple[int, int],
    cfg: MiningConfig,
    count: int | None = None,
    seed: int = 0,
):
    """Per-positive hard-negative patch indices for both sides.

    A shared pool of up to `count` patches per side is sampled uniformly
    (seeded) from the patches admissible for at least one positive; each
    positive then keeps the pool members admissible for itself, so no stored
    negative violates the distance floor and each side references at most
    `count` distinct patches per image pair.

    Side A negatives are judged against the positive's second index, side B
    negatives against the first, matching how the contrastive loss crosses
    anchors and negatives between the two feature sets.
    """
    if count is None:
        count = cfg.num_negatives
    hp, wp = grid_shape
    n_patches = hp * wp
    rng = np.random.default_rng(seed)
    neg_a: list[tuple[int, ...]] = []
    neg_b: list[tuple[int, ...]] = []
    if not positives:
        return neg_a, neg_b

    all_patches = np.arange(n_patches)

    def side(anchor_of_positive):
        admissible = np.zeros((len(positives), n_patches), dtype=bool)
        for t, pos in enumerate(positives):
            anchor = anchor_of_positive(pos)
            r_p, c_p = divmod(anchor, wp)
            rows = np.abs(all_patches // wp - r_p) >= cfg.v_dist
            dc = np.abs(all_patches % wp - c_p)
            cols = np.minimum(dc, wp - dc) >= cfg.h_dist
            admissible[t] = rows | cols
        pool_mask = admissible.any(axis=0)
        pool = all_patches[pool_mask]
        if pool.size == 0:
            log.warning("no admissible negative patches on %dx%d grid", hp, wp)
            return [tuple() for _ in positives]
        picked = rng.choice(pool, size=min(count, pool.size), replace=False)
        picked.sort()
        return [tuple(int(n) for n in picked if admissible[t, n]) for t in range(len(positives))]

    neg_a = side(lambda pos: pos[1])
    neg_b = side(lambda pos: pos[0])
    return neg_a, neg_b


def mine_pair(
    scan_a: Scan,
    scan_b: Scan,
    pose_a: Pose,
    pose_b: Pose,
    riv_cfg: RivConfig,
    cfg: MiningConfig | None = None,
    seed: int = 0,
) -> PatchPairSet:
    """Full mining pipeline for one candidate scan pair.

    The pose-derived relative transform seeds ICP on clouds voxelized at
    ``voxel_cell``; the refined transform drives the reprojection.  Pairs
    farther apart than ``max_pair_distance`` are rejected outright.
    """
    if cfg is None:
        cfg = MiningConfig()
    gap = float(np.linalg.norm(pose_a.translation - pose_b.translation))
    if gap > cfg.max_pair_distance:
        raise ValueError(f"scans are {gap:.2f} m apart, beyond the {cfg.max_pair_distance} m positive radius")
    img_a = project_scan(scan_a, riv_cfg)
    t_init = relative_transform(pose_b, pose_a)
    try:
        vox_a = voxel_downsample(scan_a, cfg.voxel_cell)
        vox_b = voxel_downsample(scan_b, cfg.voxel_cell)
        t_refined = icp_align(vox_b, vox_a, init=t_init, max_iter=cfg.icp_max_iter, tol=cfg.icp_tol)
    except (AlignmentError, ValueError) as exc:
        raise MiningUnavailableError(f"alignment failed for ({scan_a.id}, {scan_b.id}): {exc}") from exc
    reproj = reproject(scan_b, t_refined, riv_cfg)
    positives = mine_positives(img_a, reproj, cfg)
    neg_a, neg_b = mine_negatives(positives, patch_grid_shape(img_a), cfg, seed=seed)
    return PatchPairSet(
        positives=tuple(positives),
        negatives_a=tuple(neg_a),
        negatives_b=tuple(neg_b),
        grid_shape=patch_grid_shape(img_a),
        id_a=scan_a.id,
        id_b=scan_b.id,
    )


# ---------------------------------------------------------------------------
# Pair-set text format
# ---------------------------------------------------------------------------

def save_pairs(path, pairs: PatchPairSet, cfg: MiningConfig | None = None) -> None:
    """Line-oriented pair file: JSON header, then POS / NEGA / NEGB records."""
    header = {
        "id_a": pairs.id_a,
        "id_b": pairs.id_b,
        "grid": list(pairs.grid_shape),
        "config": asdict(cfg) if cfg is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for (p1, p2) in pairs.positives:
            fh.write(f"POS {p1} {p2}\n")
        for t, negs in enumerate(pairs.negatives_a):
            for n in negs:
                fh.write(f"NEGA {t} {n}\n")
        for t, negs in enumerate(pairs.negatives_b):
            for n in negs:
                fh.write(f"NEGB {t} {n}\n")


def load_pairs(path) -> PatchPairSet:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        positives: list[tuple[int, int]] = []
        neg_a: dict[int, list[int]] = {}
        neg_b: dict[int, list[int]] = {}
        for line_no, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "POS" and len(parts) == 3:
                positives.append((int(parts[1]), int(parts[2])))
            elif tag in ("NEGA", "NEGB") and len(parts) == 3:
                target = neg_a if tag == "NEGA" else neg_b
                target.setdefault(int(parts[1]), []).append(int(parts[2]))
            else:
                raise ValueError(f"{path}:{line_no}: bad pair record {line.rstrip()!r}")
    return PatchPairSet(
        positives=tuple(positives),
        negatives_a=tuple(tuple(neg_a.get(t, ())) for t in range(len(positives))),
        negatives_b=tuple(tuple(neg_b.get(t, ())) for t in range(len(positives))),
        grid_shape=tuple(header["grid"]),
        id_a=header["id_a"],
        id_b=header["id_b"],
    )
