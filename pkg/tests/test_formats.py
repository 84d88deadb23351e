"""Container-format round trips against golden files pinned in the repo.

The golden payloads are built from arithmetic patterns (no RNG, no
transcendentals), so regenerating them must reproduce the pinned bytes
exactly on any platform; any format drift shows up as a byte diff.
"""

from pathlib import Path

import numpy as np
import pytest

from rivlpr import (
    AdapterParams,
    MiningConfig,
    PatchPairSet,
    RivConfig,
    RivImage,
    load_adapter,
    load_descriptors,
    load_pairs,
    load_riv,
    save_adapter,
    save_descriptors,
    save_pairs,
    save_riv,
)
from rivlpr.trainer import Checkpoint, TrainConfig, _param_items, load_checkpoint, save_checkpoint

GOLDEN = Path(__file__).parent / "golden"


def golden_riv() -> RivImage:
    cfg = RivConfig(width=56, height=28, fov_up=0.25, fov_total=0.5, max_range=50.0, wrap_cols=7)
    h, w = 28, 56
    data = ((np.arange(h * w * 3) * 37 % 101) / 101.0).astype(np.float32).reshape(h, w, 3)
    mask = (np.arange(h * w).reshape(h, w) % 5) != 0
    data[~mask] = 0.0
    return RivImage(data, mask, cfg)


def golden_descriptors():
    mat = ((np.arange(60).reshape(4, 15) * 13 % 29) / 29.0).astype(np.float32).astype(np.float64)
    meta = [
        {"id": f"g{i}", "timestamp": float(i) * 1.5, "position": [float(i), float(-i), 0.25],
         "quaternion": [0.0, 0.0, 0.0, 1.0]}
        for i in range(4)
    ]
    return mat, meta


def golden_pairs() -> tuple[PatchPairSet, MiningConfig]:
    pairs = PatchPairSet(
        positives=((3, 3), (10, 10), (17, 17)),
        negatives_a=((0, 40), (2,), ()),
        negatives_b=((41,), (1, 39), (38,)),
        grid_shape=(3, 14),
        id_a="golden_a",
        id_b="golden_b",
    )
    return pairs, MiningConfig()


def golden_adapter() -> AdapterParams:
    params = AdapterParams.zeros(4, 2)
    for i, (_, arr) in enumerate(params.arrays()):
        flat = arr.reshape(-1)
        flat[:] = (np.arange(flat.size) * (i + 3) % 17) / 17.0
    return params


def golden_checkpoint() -> Checkpoint:
    cfg = TrainConfig(channels=4, adapter_stages=2, num_blocks=6, clusters=3,
                      cluster_dim=2, token_dim=3, token_hidden=5, batch_size=4, sinkhorn_iters=5)
    from rivlpr.aggregate import AggregateParams

    adapter = golden_adapter()
    agg = AggregateParams(
        score_w=np.arange(12.0).reshape(4, 3) / 7.0,
        score_b=np.arange(3.0) / 3.0,
        feat_w=np.arange(8.0).reshape(4, 2) / 5.0,
        feat_b=np.arange(2.0),
        token_w1=np.arange(20.0).reshape(4, 5) / 11.0,
        token_b1=np.arange(5.0) / 4.0,
        token_w2=np.arange(15.0).reshape(5, 3) / 13.0,
        token_b2=np.arange(3.0) / 2.0,
        sinkhorn_iters=5,
    )
    opt_m = {name: np.full_like(arr, 0.125) for name, arr in _param_items(adapter, agg)}
    opt_v = {name: np.full_like(arr, 0.25) for name, arr in _param_items(adapter, agg)}
    return Checkpoint(adapter, agg, opt_m, opt_v, 7, cfg)


class TestGoldenFiles:
    def test_riv_matches_pinned_bytes(self, tmp_path):
        out = tmp_path / "g.riv"
        save_riv(out, golden_riv())
        assert out.read_bytes() == (GOLDEN / "golden.riv").read_bytes()

    def test_riv_round_trip(self, tmp_path):
        img = load_riv(GOLDEN / "golden.riv")
        out = tmp_path / "again.riv"
        save_riv(out, img)
        assert out.read_bytes() == (GOLDEN / "golden.riv").read_bytes()

    def test_descriptors_match_pinned_bytes(self, tmp_path):
        mat, meta = golden_descriptors()
        out = tmp_path / "g.dsc"
        save_descriptors(out, mat, meta)
        assert out.read_bytes() == (GOLDEN / "golden.dsc").read_bytes()
        assert (tmp_path / "g.dsc.idx").read_bytes() == (GOLDEN / "golden.dsc.idx").read_bytes()

    def test_descriptors_round_trip(self, tmp_path):
        mat, meta = load_descriptors(GOLDEN / "golden.dsc")
        out = tmp_path / "again.dsc"
        save_descriptors(out, mat, meta)
        assert out.read_bytes() == (GOLDEN / "golden.dsc").read_bytes()
        assert (tmp_path / "again.dsc.idx").read_bytes() == (GOLDEN / "golden.dsc.idx").read_bytes()

    def test_pairs_match_pinned_bytes(self, tmp_path):
        pairs, cfg = golden_pairs()
        out = tmp_path / "g.pairs"
        save_pairs(out, pairs, cfg)
        assert out.read_bytes() == (GOLDEN / "golden.pairs").read_bytes()

    def test_pairs_round_trip(self, tmp_path):
        pairs = load_pairs(GOLDEN / "golden.pairs")
        out = tmp_path / "again.pairs"
        save_pairs(out, pairs, MiningConfig())
        assert out.read_bytes() == (GOLDEN / "golden.pairs").read_bytes()

    def test_adapter_matches_pinned_bytes(self, tmp_path):
        out = tmp_path / "g.adp"
        save_adapter(out, golden_adapter())
        assert out.read_bytes() == (GOLDEN / "golden.adp").read_bytes()

    def test_adapter_round_trip(self, tmp_path):
        params = load_adapter(GOLDEN / "golden.adp")
        out = tmp_path / "again.adp"
        save_adapter(out, params)
        assert out.read_bytes() == (GOLDEN / "golden.adp").read_bytes()

    def test_checkpoint_matches_pinned_bytes(self, tmp_path):
        out = tmp_path / "g.ckp"
        save_checkpoint(out, golden_checkpoint())
        assert out.read_bytes() == (GOLDEN / "golden.ckp").read_bytes()

    def test_checkpoint_round_trip(self, tmp_path):
        ckpt = load_checkpoint(GOLDEN / "golden.ckp")
        out = tmp_path / "again.ckp"
        save_checkpoint(out, ckpt)
        assert out.read_bytes() == (GOLDEN / "golden.ckp").read_bytes()
        assert ckpt.step == 7
