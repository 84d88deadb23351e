import numpy as np
import pytest

from rivlpr.config import PipelineConfig, parse_pipeline_config, write_pipeline_config


GOOD = """
[riv]
width = 448
height = 98
fov_up = 14deg
fov_total = 30deg
max_range = 60.0

[mining]
mad_k = 2.5
h_dist = 10

[loss]
tau_l = 0.2

[train]
batch_size = 8
learning_rate = 0.001
use_augmentation = false

[eval]
mode = intra
"""


class TestParse:
    def test_round_values(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text(GOOD)
        cfg = parse_pipeline_config(p)
        assert cfg.riv.width == 448
        assert cfg.riv.fov_up == pytest.approx(np.deg2rad(14.0))
        assert cfg.mining.mad_k == 2.5
        assert cfg.train.batch_size == 8
        assert cfg.train.use_augmentation is False
        assert cfg.eval.mode == "intra"
        # untouched sections keep defaults
        assert cfg.loss.lambda_mix == 2.0

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(ValueError):
            parse_pipeline_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text("[riv]\nwidht = 448\n")
        with pytest.raises(ValueError):
            parse_pipeline_config(p)

    def test_invariants_enforced_at_parse(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text("[train]\npositive_radius = 50.0\nnegative_floor = 30.0\n")
        with pytest.raises(ValueError):
            parse_pipeline_config(p)

    def test_write_parse_round_trip(self, tmp_path):
        p = tmp_path / "cfg.ini"
        write_pipeline_config(p, PipelineConfig())
        cfg = parse_pipeline_config(p)
        assert cfg.riv == PipelineConfig().riv
        assert cfg.train == PipelineConfig().train
        assert cfg.mining == PipelineConfig().mining
