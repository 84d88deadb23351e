"""Glue between projection, encoding, aggregation and the descriptor DB."""

from __future__ import annotations

import numpy as np

from .aggregate import AggregateParams, Descriptor, aggregate
from .encoder import AdapterParams, encode
from .evaluate import DescriptorDB
from .riv import RivConfig, RivImage, project_scan
from .scan_geometry import Pose, Scan


def describe_image(img: RivImage, adapter: AdapterParams, agg: AggregateParams, num_blocks: int = 12) -> Descriptor:
    """Image -> global descriptor through the full feature pipeline."""
    return aggregate(encode(img, adapter, num_blocks=num_blocks), agg)


def describe_scan(scan: Scan, cfg: RivConfig, adapter: AdapterParams, agg: AggregateParams) -> Descriptor:
    return describe_image(project_scan(scan, cfg), adapter, agg)


def build_db(images, poses, ids, adapter: AdapterParams, agg: AggregateParams, num_blocks: int = 12) -> DescriptorDB:
    """Descriptor database from projected images and their poses."""
    rows = []
    for img in images:
        desc = describe_image(img, adapter, agg, num_blocks=num_blocks)
        if not desc.valid:
            raise ValueError("degenerate descriptor in database build")
        rows.append(desc.values)
    positions = np.stack([p.translation for p in poses])
    timestamps = np.array([p.timestamp for p in poses])
    return DescriptorDB(np.stack(rows), tuple(ids), positions, timestamps)


def db_from_matrix(matrix: np.ndarray, metadata: list[dict]) -> DescriptorDB:
    """DescriptorDB from a DSC1 matrix and its sidecar metadata rows."""
    positions = np.array([m["position"] for m in metadata], dtype=np.float64)
    timestamps = np.array([m["timestamp"] for m in metadata], dtype=np.float64)
    ids = tuple(m["id"] for m in metadata)
    return DescriptorDB(matrix, ids, positions, timestamps)
