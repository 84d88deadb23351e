"""Desk-scale training loop for the adapter and aggregation parameters.

One step samples a batch of scans built from anchor/partner pairs (partners
within the positive radius, anchor groups far enough apart that every
cross-group pair is a clean negative), augments their images, runs the
feature pipeline, and descends the combined objective: the patch
contrastive loss on geometrically mined pairs plus the weighted ranking
loss over batch descriptors.  All gradients are the analytic ones exposed
by the loss, aggregation and adapter modules; the frozen backbone never
changes.

Per-step randomness comes from generators seeded with (seed, step), so a
checkpoint plus its step counter reproduces the continuation bit-exactly.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .aggregate import AggregateParams, aggregate, aggregate_backward
from .augment import AugmentSpec, augment
from .encoder import AdapterParams, adapter_backward, adapter_forward, toy_encode
from .loss import LossConfig, combined_loss, patch_infonce, tsap
from .mining import MiningConfig, MiningUnavailableError, PatchPairSet, mine_negatives, mine_positives, reproject
from .riv import PATCH, RivConfig, project_scan
from .scan_geometry import Pose, Scan, icp_align, relative_transform, voxel_downsample

log = logging.getLogger(__name__)

_CKP_MAGIC = b"CKP1"


class BatchConstructionError(RuntimeError):
    """Raised when a batch with enough positive pairs cannot be assembled."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization, sampling and desk-scale model dimensions."""

    epochs: int = 10
    batch_size: int = 16
    group_size: int = 2
    learning_rate: float = 5e-4
    warmup_fraction: float = 0.1
    seed: int = 0
    positive_radius: float = 10.0
    negative_floor: float = 30.0
    pair_subsample: float = 0.125
    sample_spacing: float = 3.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    channels: int = 32
    num_blocks: int = 12
    adapter_stages: int = 4
    clusters: int = 32
    cluster_dim: int = 16
    token_dim: int = 32
    token_hidden: int = 64
    sinkhorn_iters: int = 30
    sinkhorn_reg: float = 1.0
    init_scale: float = 1.0
    use_augmentation: bool = True

    def __post_init__(self):
        if self.positive_radius >= self.negative_floor:
            raise ValueError("positive_radius must be below negative_floor")
        if not (0.0 < self.pair_subsample <= 1.0):
            raise ValueError("pair_subsample must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 4 or self.batch_size % 2:
            raise ValueError("need epochs >= 1 and an even batch_size >= 4")
        if self.num_blocks % self.adapter_stages:
            raise ValueError("adapter_stages must divide num_blocks")


def label_pair(distance: float, cfg: TrainConfig) -> str:
    """positive / negative / excluded label of a scan pair by pose distance."""
    if distance <= cfg.positive_radius:
        return "positive"
    if distance >= cfg.negative_floor:
        return "negative"
    return "excluded"


def subsample_spatially(poses: list[Pose], spacing: float) -> list[int]:
    """Greedy arc-length subsampling: keep a pose when it moved `spacing`."""
    kept: list[int] = []
    last = None
    for i, p in enumerate(poses):
        if last is None or np.linalg.norm(p.translation - last) >= spacing:
            kept.append(i)
            last = p.translation
    return kept


def init_params(cfg: TrainConfig, seed: int | None = None):
    """Fresh (adapter, aggregate) parameters for training or baselines."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    adapter = AdapterParams.random(cfg.channels, cfg.adapter_stages, rng, scale=0.3 * cfg.init_scale)
    agg = AggregateParams.random(
        cfg.channels,
        num_clusters=cfg.clusters,
        cluster_dim=cfg.cluster_dim,
        token_dim=cfg.token_dim,
        hidden=cfg.token_hidden,
        rng=rng,
        scale=cfg.init_scale,
        sinkhorn_iters=cfg.sinkhorn_iters,
        sinkhorn_reg=cfg.sinkhorn_reg,
    )
    return adapter, agg


@dataclass
class Checkpoint:
    """Full training state: parameters, optimizer moments, step, config echo."""

    adapter: AdapterParams
    aggregate: AggregateParams
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int
    config: TrainConfig


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[tuple[int, float, float, float]]  # (step, L_P, L_TSAP, L_final)


def _param_items(adapter: AdapterParams, agg: AggregateParams):
    for name, arr in adapter.arrays():
        yield "adapter." + name, arr
    for name, arr in agg.arrays():
        yield "aggregate." + name, arr


def _pair_seed(train_seed: int, id_a: str, id_b: str) -> int:
    return zlib.crc32(f"{train_seed}|{id_a}|{id_b}".encode())


class _Miner:
    """Mines and caches patch-pair supervision per unordered scan pair."""

    def __init__(self, scans, poses, riv_cfg, mining_cfg, train_seed):
        self.scans = scans
        self.poses = poses
        self.riv_cfg = riv_cfg
        self.cfg = mining_cfg
        self.train_seed = train_seed
        self.cache: dict[tuple[int, int], tuple] = {}
        self._vox: dict[int, Scan] = {}
        self._img: dict[int, object] = {}

    def image(self, i: int):
        if i not in self._img:
            self._img[i] = project_scan(self.scans[i], self.riv_cfg)
        return self._img[i]

    def _voxeled(self, i: int) -> Scan:
        if i not in self._vox:
            self._vox[i] = voxel_downsample(self.scans[i], self.cfg.voxel_cell)
        return self._vox[i]

    def mine(self, ia: int, ib: int):
        """(PatchPairSet, reprojected image) for scans ia, ib; cached."""
        key = (ia, ib)
        if key in self.cache:
            return self.cache[key]
        scan_a, scan_b = self.scans[ia], self.scans[ib]
        t_init = relative_transform(self.poses[ib], self.poses[ia])
        t = icp_align(self._voxeled(ib), self._voxeled(ia), init=t_init,
                      max_iter=self.cfg.icp_max_iter, tol=self.cfg.icp_tol)
        img_a = self.image(ia)
        reproj = reproject(scan_b, t, self.riv_cfg)
        positives = mine_positives(img_a, reproj, self.cfg)
        hp, wp = img_a.height // PATCH, img_a.width // PATCH
        neg_a, neg_b = mine_negatives(positives, (hp, wp), self.cfg,
                                      seed=_pair_seed(self.train_seed, scan_a.id, scan_b.id))
        pairs = PatchPairSet(tuple(positives), tuple(neg_a), tuple(neg_b), (hp, wp), scan_a.id, scan_b.id)
        self.cache[key] = (pairs, reproj)
        return self.cache[key]


def _shift_pairs(pairs: PatchPairSet, shift_a: int, shift_b: int) -> PatchPairSet:
    """Re-index mined patches after whole-patch yaw shifts of each image."""
    hp, wp = pairs.grid_shape

    def shift(p, s):
        r, c = divmod(p, wp)
        return r * wp + (c + s) % wp

    return PatchPairSet(
        tuple((shift(p1, shift_a), shift(p2, shift_b)) for p1, p2 in pairs.positives),
        tuple(tuple(shift(n, shift_a) for n in negs) for negs in pairs.negatives_a),
        tuple(tuple(shift(n, shift_b) for n in negs) for negs in pairs.negatives_b),
        pairs.grid_shape,
        pairs.id_a,
        pairs.id_b,
    )


def _sample_batch(indices, positions, cfg: TrainConfig, rng: np.random.Generator):
    """Anchor/partner batch: partners within the positive radius, anchor
    groups separated by 2 * positive_radius + negative_floor so every
    cross-group pair is an unambiguous negative (no excluded pairs leak into
    the ranking loss)."""
    n_groups = cfg.batch_size // 2
    spacing = 2.0 * cfg.positive_radius + cfg.negative_floor
    pos = positions
    partners_of = {}
    for i in indices:
        d = np.linalg.norm(pos[indices] - pos[i], axis=1)
        partners_of[i] = [j for j, dj in zip(indices, d) if dj <= cfg.positive_radius and j != i]
    eligible = [i for i in indices if partners_of[i]]
    if len(eligible) < n_groups:
        raise BatchConstructionError("not enough scans with positive partners")
    for _ in range(60):
        anchors: list[int] = []
        for i in rng.permutation(eligible):
            if all(np.linalg.norm(pos[i] - pos[a]) >= spacing for a in anchors):
                anchors.append(int(i))
                if len(anchors) == n_groups:
                    break
        if len(anchors) == n_groups:
            batch = []
            for a in anchors:
                partner = int(rng.choice(partners_of[a]))
                batch.extend([a, partner])
            return batch
    raise BatchConstructionError(
        f"could not place {n_groups} anchor groups {spacing:.0f} m apart; lower batch_size"
    )


def build_batch(sequence, cfg: TrainConfig, rng: np.random.Generator | None = None):
    """Sampled batch description: indices, positive map, mined pair slots.

    `sequence` is a list of (Scan, Pose).  Returns (batch_indices,
    positives_of, mined_slots) where positives_of maps batch slot -> slots
    within the positive radius and mined_slots lists the (slot_a, slot_b)
    anchor pairs selected for patch mining (a `pair_subsample` fraction,
    at least one).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    poses = [p for _, p in sequence]
    kept = subsample_spatially(poses, cfg.sample_spacing)
    if len(kept) < cfg.batch_size:
        raise BatchConstructionError(f"only {len(kept)} scans after {cfg.sample_spacing} m subsampling")
    positions = np.stack([p.translation for p in poses])
    batch = _sample_batch(np.asarray(kept), positions, cfg, rng)

    positives_of = {}
    for si, i in enumerate(batch):
        positives_of[si] = [
            sj for sj, j in enumerate(batch)
            if sj != si and np.linalg.norm(positions[i] - positions[j]) <= cfg.positive_radius
        ]
    pair_slots = [(2 * g, 2 * g + 1) for g in range(len(batch) // 2)]
    n_mine = max(1, int(round(cfg.pair_subsample * len(pair_slots))))
    chosen = rng.choice(len(pair_slots), size=min(n_mine, len(pair_slots)), replace=False)
    mined_slots = [pair_slots[int(c)] for c in sorted(chosen)]
    return batch, positives_of, mined_slots


def _augment_spec(rng: np.random.Generator, wp: int, enabled: bool) -> tuple[int, AugmentSpec]:
    """Per-image augmentation: whole-patch yaw shift plus seeded masks."""
    if not enabled:
        return 0, AugmentSpec(0, 0.0, 0.0, 0, rng_seed=0)
    shift_patches = int(rng.integers(0, wp))
    spec = AugmentSpec(
        yaw_shift=shift_patches * PATCH,
        square_mask_ratio_max=0.25,
        cyl_mask_width_max=0.2,
        line_mask_count_max=3,
        rng_seed=int(rng.integers(0, 2**31 - 1)),
    )
    return shift_patches, spec


def train(
    sequence,
    cfg: TrainConfig,
    riv_cfg: RivConfig | None = None,
    mining_cfg: MiningConfig | None = None,
    loss_cfg: LossConfig | None = None,
    start: Checkpoint | None = None,
    max_steps: int | None = None,
    stop_step: int | None = None,
) -> TrainResult:
    """Optimize adapter and aggregation parameters on a scan sequence.

    `sequence` is a list of (Scan, Pose) covering one or more sessions.
    Training runs epochs * (kept_scans // batch_size) steps under a linear
    warmup plus cosine decay schedule and aborts on a non-finite loss.
    `max_steps` overrides the schedule horizon; `stop_step` pauses earlier
    without shortening the horizon (resume with `start` to continue).
    """
    riv_cfg = riv_cfg or RivConfig()
    mining_cfg = mining_cfg or MiningConfig(max_pair_distance=cfg.positive_radius)
    loss_cfg = loss_cfg or LossConfig()

    scans = [s for s, _ in sequence]
    poses = [p for _, p in sequence]
    kept = subsample_spatially(poses, cfg.sample_spacing)
    steps_per_epoch = max(1, len(kept) // cfg.batch_size)
    # max_steps overrides the epoch-derived count outright (tests, budgets)
    total_steps = cfg.epochs * steps_per_epoch if max_steps is None else max_steps
    end_step = total_steps if stop_step is None else min(total_steps, stop_step)
    warmup_steps = max(1, int(round(cfg.warmup_fraction * total_steps)))

    if start is None:
        adapter, agg = init_params(cfg)
        opt_m = {name: np.zeros_like(arr) for name, arr in _param_items(adapter, agg)}
        opt_v = {name: np.zeros_like(arr) for name, arr in _param_items(adapter, agg)}
        step0 = 0
    else:
        adapter = start.adapter.copy()
        agg = start.aggregate.copy()
        opt_m = {k: v.copy() for k, v in start.opt_m.items()}
        opt_v = {k: v.copy() for k, v in start.opt_v.items()}
        step0 = start.step

    miner = _Miner(scans, poses, riv_cfg, mining_cfg, cfg.seed)
    sequence_list = list(zip(scans, poses))
    wp_grid = riv_cfg.width // PATCH
    trace: list[tuple[int, float, float, float]] = []

    for step in range(step0, end_step):
        rng = np.random.default_rng([cfg.seed, step])
        batch, positives_of, mined_slots = build_batch(sequence_list, cfg, rng)

        # augmented feature pipeline per batch member, caches kept for backprop
        grids, enc_caches, agg_caches, descs, shifts = [], [], [], [], []
        for slot, scan_idx in enumerate(batch):
            shift_patches, spec = _augment_spec(rng, wp_grid, cfg.use_augmentation)
            img = augment(miner.image(scan_idx), spec)
            stack = toy_encode(img, channels=cfg.channels, num_blocks=cfg.num_blocks,
                               k_interval=cfg.num_blocks // cfg.adapter_stages)
            grid, enc_cache = adapter_forward(stack, adapter, want_cache=True)
            desc, agg_cache = aggregate(grid, agg, want_cache=True)
            if not desc.valid:
                raise RuntimeError("degenerate descriptor during training")
            grids.append(grid)
            enc_caches.append(enc_cache)
            agg_caches.append(agg_cache)
            descs.append(desc.values)
            shifts.append(shift_patches)

        D = np.stack(descs)
        ltsap = tsap(D, positives_of, tau_g=loss_cfg.tau_g, truncation=loss_cfg.truncation)

        # patch loss on the mined subsample; canonical scan order per pair so
        # the mining direction (who reprojects onto whom) is input-determined
        mined_terms = []
        for slot_a, slot_b in mined_slots:
            if batch[slot_b] < batch[slot_a]:
                slot_a, slot_b = slot_b, slot_a
            ia, ib = batch[slot_a], batch[slot_b]
            try:
                pairs, reproj = miner.mine(ia, ib)
            except (MiningUnavailableError, ValueError) as exc:
                log.warning("mining failed for (%s, %s): %s", scans[ia].id, scans[ib].id, exc)
                continue
            if not pairs.positives:
                continue
            shift_r, spec_r = _augment_spec(rng, wp_grid, cfg.use_augmentation)
            img_r = augment(reproj, spec_r)
            stack_r = toy_encode(img_r, channels=cfg.channels, num_blocks=cfg.num_blocks,
                                 k_interval=cfg.num_blocks // cfg.adapter_stages)
            grid_r, enc_cache_r = adapter_forward(stack_r, adapter, want_cache=True)
            shifted = _shift_pairs(pairs, shifts[slot_a], shift_r)
            usable = [t for t in range(len(shifted.positives))
                      if shifted.negatives_a[t] or shifted.negatives_b[t]]
            if not usable:
                continue
            shifted = PatchPairSet(
                tuple(shifted.positives[t] for t in usable),
                tuple(shifted.negatives_a[t] for t in usable),
                tuple(shifted.negatives_b[t] for t in usable),
                shifted.grid_shape, shifted.id_a, shifted.id_b,
            )
            lp_k = patch_infonce(grids[slot_a].flat(), grid_r.flat(), shifted, tau_l=loss_cfg.tau_l)
            mined_terms.append((slot_a, lp_k, enc_cache_r, grid_r.patches.shape))

        grads = {name: np.zeros_like(arr) for name, arr in _param_items(adapter, agg)}

        def add_adapter_grads(stage_grads):
            for i, g in enumerate(stage_grads):
                for fname, val in g.items():
                    grads[f"adapter.stage{i}.{fname}"] += val

        lp_value = 0.0
        if mined_terms:
            inv_k = 1.0 / len(mined_terms)
            for slot_a, lp_k, enc_cache_r, grid_shape in mined_terms:
                lp_value += lp_k.value * inv_k
                dy_r = lp_k.gradients["F2"].reshape(grid_shape) * inv_k
                add_adapter_grads(adapter_backward(dy_r, enc_cache_r, adapter))
        l_final = lp_value + loss_cfg.lambda_mix * ltsap.value
        if not np.isfinite(l_final):
            raise RuntimeError(f"non-finite loss at step {step}; aborting")

        d_desc = loss_cfg.lambda_mix * ltsap.gradients["descriptors"]
        patch_grads_by_slot: dict[int, np.ndarray] = {}
        if mined_terms:
            inv_k = 1.0 / len(mined_terms)
            for slot_a, lp_k, _, _ in mined_terms:
                g = lp_k.gradients["F1"] * inv_k
                patch_grads_by_slot[slot_a] = patch_grads_by_slot.get(slot_a, 0.0) + g

        for slot in range(len(batch)):
            dF, agg_grads = aggregate_backward(d_desc[slot], agg_caches[slot], agg)
            if slot in patch_grads_by_slot:
                dF = dF + patch_grads_by_slot[slot]
            for fname, val in agg_grads.items():
                grads["aggregate." + fname] += val
            dy = dF.reshape(grids[slot].patches.shape)
            add_adapter_grads(adapter_backward(dy, enc_caches[slot], adapter))

        # AdamW with linear warmup into cosine decay
        t = step + 1
        if t <= warmup_steps:
            lr = cfg.learning_rate * t / warmup_steps
        else:
            frac = (t - warmup_steps) / max(total_steps - warmup_steps, 1)
            lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))
        for name, arr in _param_items(adapter, agg):
            g = grads[name]
            opt_m[name] = cfg.beta1 * opt_m[name] + (1.0 - cfg.beta1) * g
            opt_v[name] = cfg.beta2 * opt_v[name] + (1.0 - cfg.beta2) * g * g
            m_hat = opt_m[name] / (1.0 - cfg.beta1**t)
            v_hat = opt_v[name] / (1.0 - cfg.beta2**t)
            arr -= lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * arr)

        trace.append((step, lp_value, ltsap.value, l_final))
        if step % 25 == 0 or step == total_steps - 1:
            log.info("step %d/%d: L_P=%.4f L_TSAP=%.4f L=%.4f lr=%.2e",
                     step, total_steps, lp_value, ltsap.value, l_final, lr)

    ckpt = Checkpoint(adapter, agg, opt_m, opt_v, end_step, cfg)
    return TrainResult(ckpt, trace)


def save_trace_csv(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,L_P,L_TSAP,L_final\n")
        for step, lp, lt, lf in trace:
            fh.write(f"{step},{lp!r},{lt!r},{lf!r}\n")


# ---------------------------------------------------------------------------
# CKP1 container
# ---------------------------------------------------------------------------

def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """CKP1: magic, u32 JSON-header length, header, float64 param/state blocks."""
    names = [name for name, _ in _param_items(ckpt.adapter, ckpt.aggregate)]
    header = {
        "step": ckpt.step,
        "config": asdict(ckpt.config),
        "channels": ckpt.adapter.channels,
        "adapter_stages": ckpt.adapter.num_stages,
        "aggregate": {
            "clusters": ckpt.aggregate.num_clusters,
            "cluster_dim": ckpt.aggregate.cluster_dim,
            "token_dim": ckpt.aggregate.token_dim,
            "hidden": ckpt.aggregate.token_w1.shape[1],
            "sinkhorn_iters": ckpt.aggregate.sinkhorn_iters,
            "sinkhorn_reg": ckpt.aggregate.sinkhorn_reg,
        },
        "arrays": [[name, list(dict(_param_items(ckpt.adapter, ckpt.aggregate))[name].shape)] for name in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKP_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        params = dict(_param_items(ckpt.adapter, ckpt.aggregate))
        for name in names:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.opt_m[name], dtype="<f8").tobytes())
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.opt_v[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != _CKP_MAGIC:
        raise ValueError(f"{path}: not a CKP1 file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    cfg = TrainConfig(**header["config"])
    adapter, agg = init_params(cfg)
    offset = 8 + hlen

    def read_block(shape):
        nonlocal offset
        n = int(np.prod(shape))
        block = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
        return block

    arrays = {}
    for name, shape in header["arrays"]:
        arrays[name] = read_block(shape)
    opt_m = {name: read_block(shape) for name, shape in header["arrays"]}
    opt_v = {name: read_block(shape) for name, shape in header["arrays"]}
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in CKP1 file")

    for name, arr in _param_items(adapter, agg):
        arr[...] = arrays[name]
    return Checkpoint(adapter, agg, opt_m, opt_v, int(header["step"]), cfg)
