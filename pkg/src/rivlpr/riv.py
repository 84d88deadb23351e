"""Range-image-view projection of LiDAR scans.

A scan is projected onto a cylindrical H x W grid indexed by azimuth
(columns) and elevation (rows).  Each valid pixel carries three channels in
[0, 1]: reflectivity, range (as a fraction of the configured maximum) and
the log singular-value ratio of the local neighborhood covariance, which
separates planar surfaces from edges and clutter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .scan_geometry import Scan, knn, knn_batch

PATCH = 14  # encoder patch edge, pixels

NORMAL_EPS = 1e-6
NORMAL_LOG_CAP = np.log(1e6)

_RIV_MAGIC = b"RIV1"


@dataclass(frozen=True)
class RivConfig:
    """Projection geometry: image size, vertical field of view, range cap."""

    width: int = 1022
    height: int = 126
    fov_up: float = np.deg2rad(11.25)
    fov_total: float = np.deg2rad(22.5)
    max_range: float = 120.0
    knn_k: int = 8
    wrap_cols: int = 28

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 < self.fov_up < self.fov_total):
            raise ValueError("need 0 < fov_up < fov_total")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.knn_k < 3:
            raise ValueError("knn_k must be >= 3")
        if self.wrap_cols < 0:
            raise ValueError("wrap_cols must be >= 0")


@dataclass(frozen=True)
class RivImage:
    """Projected image: (H, W, 3) float32 channels plus validity mask.

    Invalid pixels hold zero in every channel; channel 1 times
    ``config.max_range`` recovers the raw range of the winning point.
    """

    data: np.ndarray
    valid_mask: np.ndarray
    config: RivConfig

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"data must be (H, W, 3), got {data.shape}")
        if mask.shape != data.shape[:2]:
            raise ValueError("valid_mask shape must match data")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def ranges(self) -> np.ndarray:
        """Raw range per pixel in meters (0 where invalid)."""
        return self.data[:, :, 1].astype(np.float64) * self.config.max_range


def project_point(p, cfg: RivConfig):
    """Pixel coordinates (u, v) and range of a single point, or None.

    Azimuth maps to ``u = floor(0.5 (1 - atan2(y, x)/pi) W)`` clamped into
    the image; elevation maps to ``v = floor((1 - (asin(z/r) + f_up)/f) H)``.
    Points whose row falls outside the image, whose range exceeds the cap,
    or that sit at the origin are rejected.
    """
    p = np.asarray(p, dtype=np.float64).reshape(3)
    r = float(np.linalg.norm(p))
    if r == 0.0 or r > cfg.max_range or not np.isfinite(r):
        return None
    u = int(np.floor(0.5 * (1.0 - np.arctan2(p[1], p[0]) / np.pi) * cfg.width))
    u = min(max(u, 0), cfg.width - 1)
    v = int(np.floor((1.0 - (np.arcsin(p[2] / r) + cfg.fov_up) / cfg.fov_total) * cfg.height))
    if v < 0 or v >= cfg.height:
        return None
    return u, v, r


def pixel_to_point(u: int, v: int, r: float, cfg: RivConfig) -> np.ndarray:
    """3-D point at range r through the center of pixel (u, v)."""
    azimuth = np.pi * (1.0 - 2.0 * (u + 0.5) / cfg.width)
    elevation = cfg.fov_total * (1.0 - (v + 0.5) / cfg.height) - cfg.fov_up
    ce = np.cos(elevation)
    return np.array([r * ce * np.cos(azimuth), r * ce * np.sin(azimuth), r * np.sin(elevation)])


def _project_coords(xyz: np.ndarray, cfg: RivConfig):
    """Vectorized pixel binning; returns (u, v, r, keep-mask)."""
    r = np.linalg.norm(xyz, axis=1)
    keep = (r > 0) & (r <= cfg.max_range)
    safe_r = np.where(keep, r, 1.0)
    u = np.floor(0.5 * (1.0 - np.arctan2(xyz[:, 1], xyz[:, 0]) / np.pi) * cfg.width).astype(np.int64)
    np.clip(u, 0, cfg.width - 1, out=u)
    v = np.floor(
        (1.0 - (np.arcsin(np.clip(xyz[:, 2] / safe_r, -1.0, 1.0)) + cfg.fov_up) / cfg.fov_total)
        * cfg.height
    ).astype(np.int64)
    keep &= (v >= 0) & (v < cfg.height)
    return u, v, r, keep


def normalize_reflectivity(refl: np.ndarray) -> np.ndarray:
    """Reflectivity channel values in [0, 1].

    Values are divided by 255 and clamped; scans whose reflectivity exceeds
    255 (some sensors report wider ranges) are min-max rescaled to [0, 255]
    first so the divide never saturates the whole channel.
    """
    refl = np.asarray(refl, dtype=np.float64)
    if refl.size and refl.max() > 255.0:
        lo, hi = refl.min(), refl.max()
        refl = (refl - lo) / (hi - lo) * 255.0
    return np.clip(refl / 255.0, 0.0, 1.0)


def project_scan(scan: Scan, cfg: RivConfig) -> RivImage:
    """Project a scan; on pixel collisions the nearest point wins.

    Channel 0 is normalized reflectivity, channel 1 is range / max_range,
    channel 2 is the normal ratio of the winning point computed over its
    ``cfg.knn_k`` nearest neighbors in the raw (unvoxelized) cloud.
    """
    if len(scan) == 0:
        raise ValueError("cannot project an empty scan")
    u, v, r, keep = _project_coords(scan.xyz, cfg)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        data = np.zeros((cfg.height, cfg.width, 3), dtype=np.float32)
        mask = np.zeros((cfg.height, cfg.width), dtype=bool)
        return RivImage(data, mask, cfg)
    flat = v[idx] * cfg.width + u[idx]
    # nearest range wins a collision: sort by (pixel, range, point order) and
    # keep the first point of each pixel group
    order = np.lexsort((idx, r[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win_points = idx[order][first]
    win_pixels = flat_sorted[first]

    refl01 = normalize_reflectivity(scan.reflectivity)
    ratios = _normal_ratios_batch(scan, win_points, cfg.knn_k)

    data = np.zeros((cfg.height, cfg.width, 3), dtype=np.float32)
    mask = np.zeros(cfg.height * cfg.width, dtype=bool)
    mask[win_pixels] = True
    ch = np.zeros((cfg.height * cfg.width, 3), dtype=np.float32)
    ch[win_pixels, 0] = refl01[win_points]
    ch[win_pixels, 1] = r[win_points] / cfg.max_range
    ch[win_pixels, 2] = ratios
    data = ch.reshape(cfg.height, cfg.width, 3)
    return RivImage(data, mask.reshape(cfg.height, cfg.width), cfg)


def winning_points(scan: Scan, cfg: RivConfig) -> np.ndarray:
    """Flat-pixel -> scan-point index map (-1 where no point landed)."""
    u, v, r, keep = _project_coords(scan.xyz, cfg)
    idx = np.nonzero(keep)[0]
    out = np.full(cfg.height * cfg.width, -1, dtype=np.int64)
    if idx.size == 0:
        return out
    flat = v[idx] * cfg.width + u[idx]
    order = np.lexsort((idx, r[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    out[flat_sorted[first]] = idx[order][first]
    return out


def _covariance_ratio(neigh: np.ndarray, eps: float) -> float:
    """log((s_max + eps) / (s_min + eps)) for one neighborhood's covariance."""
    centered = neigh - neigh.mean(axis=0)
    cov = centered.T @ centered / len(neigh)
    w = np.linalg.eigvalsh(cov)
    s_min = max(float(w[0]), 0.0)
    s_max = max(float(w[2]), 0.0)
    return float(np.log((s_max + eps) / (s_min + eps)))


def normal_ratio(scan: Scan, idx: int, k: int | None = None, eps: float = NORMAL_EPS) -> float:
    """Normal-ratio channel value for one point, in [0, 1].

    The covariance of the point's k nearest neighbors (the point included)
    is decomposed; the log ratio of its largest to smallest singular value,
    scaled by ``NORMAL_LOG_CAP`` and clamped at 1, is the channel value.
    """
    if k is None:
        k = RivConfig().knn_k
    if k > len(scan):
        raise ValueError(f"k={k} exceeds scan size {len(scan)}")
    neighbors = knn(scan, scan.xyz[idx], k)
    raw = _covariance_ratio(scan.xyz[neighbors], eps)
    return min(raw / NORMAL_LOG_CAP, 1.0)


def _normal_ratios_batch(scan: Scan, points: np.ndarray, k: int) -> np.ndarray:
    """Normal ratios for many scan points at once (KD-tree neighborhoods)."""
    k_eff = min(k, len(scan))
    nn = knn_batch(scan, scan.xyz[points], k_eff)
    neigh = scan.xyz[nn]  # (p, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("pki,pkj->pij", centered, centered) / k_eff
    w = np.linalg.eigvalsh(cov)
    s_min = np.maximum(w[:, 0], 0.0)
    s_max = np.maximum(w[:, 2], 0.0)
    raw = np.log((s_max + NORMAL_EPS) / (s_min + NORMAL_EPS))
    return np.minimum(raw / NORMAL_LOG_CAP, 1.0).astype(np.float32)


def wrap_pad(img: RivImage) -> RivImage:
    """Append each horizontal edge's columns to the opposite side.

    Keeps cylindrical continuity for downstream windows that are not
    wrap-aware.  Output width is W + 2 * wrap_cols.
    """
    w = img.config.wrap_cols
    W = img.width
    if w > W:
        raise ValueError(f"wrap_cols={w} exceeds image width {W}")
    if w == 0:
        return img
    data = np.concatenate([img.data[:, W - w :], img.data, img.data[:, :w]], axis=1)
    mask = np.concatenate([img.valid_mask[:, W - w :], img.valid_mask, img.valid_mask[:, :w]], axis=1)
    return RivImage(data, mask, replace(img.config, width=W + 2 * w))


def resize_vertical(img: RivImage, new_h: int) -> RivImage:
    """Resample rows by per-column linear interpolation.

    The validity mask is interpolated as floats and re-thresholded at 0.5
    (>= 0.5 stays valid).
    """
    if new_h <= 0:
        raise ValueError("new_h must be positive")
    H = img.height
    src = (np.arange(new_h) + 0.5) * H / new_h - 0.5
    src = np.clip(src, 0.0, H - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, H - 1)
    t = (src - lo).astype(np.float32)[:, None, None]
    data = img.data[lo] * (1.0 - t) + img.data[hi] * t
    m = img.valid_mask.astype(np.float32)
    mask = m[lo] * (1.0 - t[:, :, 0]) + m[hi] * t[:, :, 0]
    return RivImage(data.astype(np.float32), mask >= 0.5, replace(img.config, height=new_h))


# ---------------------------------------------------------------------------
# RIV1 container format
# ---------------------------------------------------------------------------

def save_riv(path, img: RivImage) -> None:
    """Write the RIV1 container: magic, u32 H/W/C, float32 data, u8 mask."""
    H, W = img.height, img.width
    with open(path, "wb") as fh:
        fh.write(_RIV_MAGIC)
        fh.write(struct.pack("<III", H, W, 3))
        fh.write(np.ascontiguousarray(img.data, dtype="<f4").tobytes())
        fh.write(img.valid_mask.astype(np.uint8).tobytes())


def load_riv(path, cfg: RivConfig | None = None) -> RivImage:
    """Read a RIV1 container.

    The container stores no projection geometry; pass `cfg` to attach one,
    otherwise a default config with matching dimensions is synthesized.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _RIV_MAGIC:
        raise ValueError(f"{path}: not a RIV1 file")
    H, W, C = struct.unpack("<III", raw[4:16])
    if C != 3:
        raise ValueError(f"{path}: expected 3 channels, got {C}")
    need = 16 + H * W * C * 4 + H * W
    if len(raw) != need:
        raise ValueError(f"{path}: truncated RIV1 payload")
    data = np.frombuffer(raw, dtype="<f4", count=H * W * C, offset=16).reshape(H, W, C)
    mask = np.frombuffer(raw, dtype=np.uint8, count=H * W, offset=16 + H * W * C * 4)
    if cfg is None:
        cfg = replace(RivConfig(), width=int(W), height=int(H), wrap_cols=0)
    elif cfg.width != W or cfg.height != H:
        raise ValueError(f"{path}: config is {cfg.height}x{cfg.width}, file is {H}x{W}")
    return RivImage(data.copy(), mask.reshape(H, W).astype(bool), cfg)
