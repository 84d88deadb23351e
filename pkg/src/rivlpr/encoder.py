"""Patch-feature extraction: frozen toy backbone plus trainable adapter stack.

The backbone stands in for a large frozen vision model at desk scale: each
14x14 patch is reduced to summary statistics, then pushed through a fixed,
seeded tanh chain whose depth plays the role of the block index.  It uses no
positional encoding, so a whole-patch cyclic column shift of the input moves
patch features around without changing their values.

Adapters refine the frozen per-block features.  Each stage is a pointwise
map, a depthwise 3x3 spatial mix (circular horizontally, zero-padded
vertically, preserving shift equivariance on the cylinder), and a second
pointwise map, with tanh between.  All-zero stage weights make the stage
output zero, collapsing the refinement recurrence onto the block-1 features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .riv import PATCH, RivImage

_ADP_MAGIC = b"ADP1"

_TOY_SEED = 0x52495631
_STATS_PER_CHANNEL = 4  # mean, std, min, max
_TOY_CACHE: dict[tuple[int, int], tuple[np.ndarray, ...]] = {}


@dataclass(frozen=True)
class PatchFeatureGrid:
    """Refined patch features (H', W', C) plus the untouched global token."""

    patches: np.ndarray
    global_token: np.ndarray
    patch_size: int = PATCH

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.patches.shape[0], self.patches.shape[1]

    @property
    def channels(self) -> int:
        return self.patches.shape[2]

    def flat(self) -> np.ndarray:
        """Row-major (H'W', C) view of the patch features."""
        h, w = self.grid_shape
        return self.patches.reshape(h * w, self.channels)


@dataclass(frozen=True)
class BlockStack:
    """Per-block frozen features: patches (L, H', W', C), tokens (L, C)."""

    patches: np.ndarray
    tokens: np.ndarray
    k_interval: int

    def __post_init__(self):
        if self.patches.ndim != 4:
            raise ValueError("patches must be (L, H', W', C)")
        if self.tokens.shape != (self.patches.shape[0], self.patches.shape[3]):
            raise ValueError("tokens must be (L, C)")
        if not (1 <= self.k_interval <= self.num_blocks):
            raise ValueError("need 1 <= k_interval <= L")

    @property
    def num_blocks(self) -> int:
        return self.patches.shape[0]

    @property
    def num_stages(self) -> int:
        return self.patches.shape[0] // self.k_interval


class AdapterParams:
    """Trainable per-stage adapter weights, input and output width C.

    Stage ``i`` holds ``w_in`` (C, C), ``b_in`` (C,), ``k3`` (3, 3, C),
    ``b_k`` (C,), ``w_out`` (C, C), ``b_out`` (C,) in that order.
    """

    FIELDS = ("w_in", "b_in", "k3", "b_k", "w_out", "b_out")

    def __init__(self, stages: list[dict[str, np.ndarray]]):
        self.stages = stages
        C = self.channels
        for s in stages:
            if s["w_in"].shape != (C, C) or s["w_out"].shape != (C, C):
                raise ValueError("pointwise maps must be (C, C)")
            if s["k3"].shape != (3, 3, C):
                raise ValueError("spatial mix kernel must be (3, 3, C)")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def channels(self) -> int:
        return self.stages[0]["w_in"].shape[0]

    @classmethod
    def zeros(cls, channels: int, num_stages: int) -> "AdapterParams":
        return cls(
            [
                {
                    "w_in": np.zeros((channels, channels)),
                    "b_in": np.zeros(channels),
                    "k3": np.zeros((3, 3, channels)),
                    "b_k": np.zeros(channels),
                    "w_out": np.zeros((channels, channels)),
                    "b_out": np.zeros(channels),
                }
                for _ in range(num_stages)
            ]
        )

    @classmethod
    def random(cls, channels: int, num_stages: int, rng: np.random.Generator, scale: float = 1.0) -> "AdapterParams":
        def stage():
            return {
                "w_in": rng.normal(0.0, scale / np.sqrt(channels), (channels, channels)),
                "b_in": np.zeros(channels),
                "k3": rng.normal(0.0, scale / 3.0, (3, 3, channels)),
                "b_k": np.zeros(channels),
                "w_out": rng.normal(0.0, scale / np.sqrt(channels), (channels, channels)),
                "b_out": np.zeros(channels),
            }

        return cls([stage() for _ in range(num_stages)])

    def copy(self) -> "AdapterParams":
        return AdapterParams([{k: v.copy() for k, v in s.items()} for s in self.stages])

    def arrays(self):
        """(name, array) pairs in serialization order, stages outermost."""
        for i, s in enumerate(self.stages):
            for f in self.FIELDS:
                yield f"stage{i}.{f}", s[f]


# fixed affine standardization of the patch statistics: channel values live
# in [0, 1], so raw stats occupy a narrow band that would park every patch in
# the same corner of the tanh chain
_STATS_CENTER = 0.3
_STATS_GAIN = 4.0


def toy_weights(channels: int, num_blocks: int = 12):
    """Fixed, seeded backbone weights for a given width and depth.

    The recurrent map is a scaled orthogonal matrix (gain 1.3): through the
    tanh it roughly preserves feature variance with depth, so deep blocks
    still depend on their input instead of contracting to a fixed point.
    """
    key = (channels, num_blocks)
    if key not in _TOY_CACHE:
        rng = np.random.default_rng(_TOY_SEED)
        d_in = 3 * _STATS_PER_CHANNEL
        w_in = rng.normal(0.0, 2.0 / np.sqrt(d_in), (d_in, channels))
        b_in = rng.normal(0.0, 0.1, channels)
        q, r = np.linalg.qr(rng.normal(size=(channels, channels)))
        w_rec = 1.3 * q * np.sign(np.diag(r))
        b_rec = rng.normal(0.0, 0.1, channels)
        _TOY_CACHE[key] = (w_in, b_in, w_rec, b_rec)
    return _TOY_CACHE[key]


def patch_statistics(img: RivImage) -> np.ndarray:
    """(H', W', 12) per-patch channel statistics: mean, std, min, max."""
    H, W = img.height, img.width
    hp, wp = H // PATCH, W // PATCH
    if hp == 0 or wp == 0:
        raise ValueError(f"image {H}x{W} smaller than one {PATCH}x{PATCH} patch")
    x = img.data[: hp * PATCH, : wp * PATCH].astype(np.float64)
    x = x.reshape(hp, PATCH, wp, PATCH, 3).transpose(0, 2, 1, 3, 4).reshape(hp, wp, PATCH * PATCH, 3)
    stats = np.stack([x.mean(axis=2), x.std(axis=2), x.min(axis=2), x.max(axis=2)], axis=3)
    return stats.reshape(hp, wp, 3 * _STATS_PER_CHANNEL)


def toy_encode(img: RivImage, channels: int = 64, num_blocks: int = 12, k_interval: int = 3) -> BlockStack:
    """Frozen backbone forward pass.

    Block 1 maps patch statistics through the seeded input layer; each later
    block reapplies the seeded recurrent layer, so block b is the chain
    composed b times.  Tokens are per-block means over patches.
    """
    w_in, b_in, w_rec, b_rec = toy_weights(channels, num_blocks)
    stats = (patch_statistics(img) - _STATS_CENTER) * _STATS_GAIN
    hp, wp, _ = stats.shape
    blocks = np.empty((num_blocks, hp, wp, channels))
    h = np.tanh(stats @ w_in + b_in)
    blocks[0] = h
    for b in range(1, num_blocks):
        h = np.tanh(h @ w_rec + b_rec)
        blocks[b] = h
    tokens = blocks.reshape(num_blocks, hp * wp, channels).mean(axis=1)
    return BlockStack(blocks, tokens, k_interval)


def depthwise_conv3x3(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 convolution: circular columns, zero-padded rows."""
    H = x.shape[0]
    xpad = np.zeros((H + 2,) + x.shape[1:])
    xpad[1:-1] = x
    out = np.zeros_like(x)
    for dp in range(3):
        for dq in range(3):
            out += kern[dp, dq] * np.roll(xpad, 1 - dq, axis=1)[dp : dp + H]
    return out


def depthwise_conv3x3_backward(dout: np.ndarray, x: np.ndarray, kern: np.ndarray):
    """Gradients (dx, dkern) of :func:`depthwise_conv3x3`."""
    H = x.shape[0]
    xpad = np.zeros((H + 2,) + x.shape[1:])
    xpad[1:-1] = x
    dpad = np.zeros((H + 2,) + dout.shape[1:])
    dpad[1:-1] = dout
    dx = np.zeros_like(x)
    dkern = np.zeros_like(kern)
    for dp in range(3):
        for dq in range(3):
            shifted = np.roll(xpad, 1 - dq, axis=1)[dp : dp + H]
            dkern[dp, dq] = np.sum(dout * shifted, axis=(0, 1))
            dx += kern[dp, dq] * np.roll(dpad, dq - 1, axis=1)[2 - dp : 2 - dp + H]
    return dx, dkern


def _adapter_stage_forward(z: np.ndarray, s: dict[str, np.ndarray]):
    t1 = z @ s["w_in"] + s["b_in"]
    a1 = np.tanh(t1)
    t2 = depthwise_conv3x3(a1, s["k3"]) + s["b_k"]
    a2 = np.tanh(t2)
    out = a2 @ s["w_out"] + s["b_out"]
    return out, (z, a1, a2)


def _adapter_stage_backward(dout: np.ndarray, cache, s: dict[str, np.ndarray]):
    z, a1, a2 = cache
    grads = {}
    grads["w_out"] = np.tensordot(a2, dout, axes=([0, 1], [0, 1]))
    grads["b_out"] = dout.sum(axis=(0, 1))
    da2 = dout @ s["w_out"].T
    dt2 = da2 * (1.0 - a2 * a2)
    grads["b_k"] = dt2.sum(axis=(0, 1))
    da1, grads["k3"] = depthwise_conv3x3_backward(dt2, a1, s["k3"])
    dt1 = da1 * (1.0 - a1 * a1)
    grads["w_in"] = np.tensordot(z, dt1, axes=([0, 1], [0, 1]))
    grads["b_in"] = dt1.sum(axis=(0, 1))
    dz = dt1 @ s["w_in"].T
    return dz, grads


def adapter_forward(stack: BlockStack, params: AdapterParams, want_cache: bool = False):
    """Refine frozen block features through the adapter recurrence.

    y_1 = Adapter_1(x_1 + x_k) + x_1, then
    y_i = Adapter_i(y_{i-1} + x_{ik}) + y_{i-1} for the remaining stages.
    The global token is the frozen last-block token, untouched.
    """
    T = stack.num_stages
    if params.num_stages != T:
        raise ValueError(f"adapter has {params.num_stages} stages, stack implies {T}")
    if params.channels != stack.patches.shape[3]:
        raise ValueError("adapter width does not match feature width")
    k = stack.k_interval
    y = stack.patches[0]
    caches = []
    for i in range(1, T + 1):
        z = y + stack.patches[i * k - 1]
        a, cache = _adapter_stage_forward(z, params.stages[i - 1])
        caches.append(cache)
        y = a + y
    grid = PatchFeatureGrid(y, stack.tokens[-1].copy())
    if want_cache:
        return grid, caches
    return grid


def adapter_backward(dy: np.ndarray, caches, params: AdapterParams):
    """Backprop dL/dy through the recurrence; returns per-stage grad dicts.

    Gradients stop at the frozen block features, which are not trainable.
    """
    grads = [None] * params.num_stages
    for i in range(params.num_stages - 1, -1, -1):
        dz, grads[i] = _adapter_stage_backward(dy, caches[i], params.stages[i])
        dy = dy + dz  # y_{i-1} feeds both the stage input and the skip
    return grads


def encode(
    img: RivImage,
    params: AdapterParams,
    num_blocks: int = 12,
) -> PatchFeatureGrid:
    """Full feature extraction: frozen backbone then adapter refinement."""
    stack = toy_encode(img, channels=params.channels, num_blocks=num_blocks, k_interval=num_blocks // params.num_stages)
    return adapter_forward(stack, params)


# ---------------------------------------------------------------------------
# ADP1 container
# ---------------------------------------------------------------------------

def save_adapter(path, params: AdapterParams) -> None:
    """ADP1: magic, u32 stage count and width, float32 blocks in field order."""
    with open(path, "wb") as fh:
        fh.write(_ADP_MAGIC)
        fh.write(struct.pack("<II", params.num_stages, params.channels))
        for _, arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_adapter(path) -> AdapterParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _ADP_MAGIC:
        raise ValueError(f"{path}: not an ADP1 file")
    stages, C = struct.unpack("<II", raw[4:12])
    shapes = {"w_in": (C, C), "b_in": (C,), "k3": (3, 3, C), "b_k": (C,), "w_out": (C, C), "b_out": (C,)}
    offset = 12
    out = []
    for _ in range(stages):
        s = {}
        for f in AdapterParams.FIELDS:
            n = int(np.prod(shapes[f]))
            block = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
            if block.size != n:
                raise ValueError(f"{path}: truncated ADP1 payload")
            s[f] = block.reshape(shapes[f]).astype(np.float64)
            offset += 4 * n
        out.append(s)
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in ADP1 file")
    return AdapterParams(out)
