"""Synthetic street-loop benchmark data.

A fixed analytic world (cylindrical facade arcs with window cutouts, poles,
a ground ring) surrounds a circular street.  Scans are ray-cast from poses
along the loop, one ray per image pixel with sub-pixel jitter, so the
resulting range images are dense like a real spinning LiDAR's.  Geometry is
stable across traversals; reflectivity is deliberately dominated by
per-scan nuisance (random azimuthal blotches, gain and offset draws), and
each scan loses random sectors to occlusion and random returns to dropout.
A second session runs the loop with a radial offset and fresh nuisance.

Everything derives from seeds; training and evaluation need no external
data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .riv import RivConfig
from .scan_geometry import Pose, Scan


@dataclass(frozen=True)
class SyntheticSpec:
    """Size and nuisance knobs of the street-loop benchmark."""

    n_scans: int = 84
    path_radius: float = 80.0
    world_seed: int = 7
    max_range: float = 60.0
    range_noise: float = 0.015
    dropout: float = 0.10
    occlusion_sectors: int = 1
    occlusion_width: float = np.deg2rad(25.0)
    texture_weight: float = 0.25
    session_radial_offset: float = 1.0
    scan_period: float = 2.0


def default_riv_config(spec: SyntheticSpec | None = None) -> RivConfig:
    """Desk-size projection matched to the synthetic sensor: 7 x 32 patches."""
    spec = spec or SyntheticSpec()
    return RivConfig(
        width=448,
        height=98,
        fov_up=np.deg2rad(14.0),
        fov_total=np.deg2rad(30.0),
        max_range=spec.max_range,
        knn_k=8,
        wrap_cols=28,
    )


@dataclass(frozen=True)
class World:
    """Analytic scene primitives, all centered on the street-loop origin.

    Facades are arcs of origin-centered cylinders (radius, angular interval,
    height interval) with a deterministic window-cutout pattern; poles are
    thin vertical cylinders; the ground is an annulus at fixed height.
    """

    arc_radius: np.ndarray
    arc_th0: np.ndarray
    arc_th1: np.ndarray
    arc_z0: np.ndarray
    arc_z1: np.ndarray
    arc_window_freq: np.ndarray
    arc_window_phase: np.ndarray
    arc_window_level: np.ndarray
    arc_texture: np.ndarray
    pole_x: np.ndarray
    pole_y: np.ndarray
    pole_r: np.ndarray
    pole_z1: np.ndarray
    pole_texture: np.ndarray
    ground_z: float
    ground_r_lo: float
    ground_r_hi: float
    ground_texture: float


def build_world(spec: SyntheticSpec | None = None) -> World:
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.world_seed)
    n_seg = 64
    seg = 2.0 * np.pi / n_seg
    arcs = {k: [] for k in ("radius", "th0", "th1", "z0", "z1", "freq", "phase", "level", "tex")}
    poles = {k: [] for k in ("x", "y", "r", "z1", "tex")}
    for s in range(n_seg):
        theta0 = s * seg
        for sign in (-1.0, 1.0):
            # 1-2 facade pieces per side per segment with distinct setbacks
            for _ in range(int(rng.integers(1, 3))):
                a0 = theta0 + rng.uniform(0.0, 0.35) * seg
                a1 = min(theta0 + seg, a0 + rng.uniform(0.45, 1.0) * seg)
                arcs["radius"].append(spec.path_radius + sign * rng.uniform(7.0, 22.0))
                arcs["th0"].append(a0)
                arcs["th1"].append(a1)
                arcs["z0"].append(-2.0)
                arcs["z1"].append(rng.uniform(3.0, 13.0))
                arcs["freq"].append(rng.uniform(15.0, 55.0))
                arcs["phase"].append(rng.uniform(0.0, 2.0 * np.pi))
                arcs["level"].append(rng.uniform(-0.2, 0.75))
                arcs["tex"].append(rng.uniform(0.15, 0.95))
        # a third of the segments get a distinctive close-in tower block
        if rng.random() < 0.35:
            a0 = theta0 + rng.uniform(0.0, 0.6) * seg
            a1 = min(theta0 + seg, a0 + rng.uniform(0.15, 0.4) * seg)
            arcs["radius"].append(spec.path_radius + rng.choice([-1.0, 1.0]) * rng.uniform(4.5, 7.0))
            arcs["th0"].append(a0)
            arcs["th1"].append(a1)
            arcs["z0"].append(-2.0)
            arcs["z1"].append(rng.uniform(12.0, 20.0))
            arcs["freq"].append(rng.uniform(15.0, 55.0))
            arcs["phase"].append(rng.uniform(0.0, 2.0 * np.pi))
            arcs["level"].append(rng.uniform(0.4, 0.9))
            arcs["tex"].append(rng.uniform(0.15, 0.95))
        for _ in range(int(rng.integers(1, 5))):
            th = rng.uniform(theta0, theta0 + seg)
            radius = spec.path_radius + rng.uniform(-7.0, 7.0)
            poles["x"].append(radius * np.cos(th))
            poles["y"].append(radius * np.sin(th))
            poles["r"].append(rng.uniform(0.10, 0.45))
            poles["z1"].append(rng.uniform(2.0, 9.0))
            poles["tex"].append(rng.uniform(0.5, 1.0))
    return World(
        arc_radius=np.array(arcs["radius"]),
        arc_th0=np.array(arcs["th0"]),
        arc_th1=np.array(arcs["th1"]),
        arc_z0=np.array(arcs["z0"]),
        arc_z1=np.array(arcs["z1"]),
        arc_window_freq=np.array(arcs["freq"]),
        arc_window_phase=np.array(arcs["phase"]),
        arc_window_level=np.array(arcs["level"]),
        arc_texture=np.array(arcs["tex"]),
        pole_x=np.array(poles["x"]),
        pole_y=np.array(poles["y"]),
        pole_r=np.array(poles["r"]),
        pole_z1=np.array(poles["z1"]),
        pole_texture=np.array(poles["tex"]),
        ground_z=-2.0,
        ground_r_lo=spec.path_radius - 16.5,
        ground_r_hi=spec.path_radius + 16.5,
        ground_texture=0.3,
    )


def _cylinder_hits(origin, dirs, cx, cy, radius, t_best, hit_tex, tex, zlim, window=None):
    """Update (t_best, hit_tex) with ray hits on one vertical cylinder."""
    px = origin[0] - cx
    py = origin[1] - cy
    dx, dy = dirs[:, 0], dirs[:, 1]
    a = dx * dx + dy * dy
    b = 2.0 * (px * dx + py * dy)
    c = px * px + py * py - radius * radius
    disc = b * b - 4.0 * a * c
    ok = disc > 0
    if not ok.any():
        return
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sgn in (-1.0, 1.0):
            t = (-b + sgn * sq) / (2.0 * a)
            valid = ok & (t > 0.5) & (t < t_best)
            if not valid.any():
                continue
            z = origin[2] + t * dirs[:, 2]
            valid &= (z >= zlim[0]) & (z <= zlim[1])
            if window is not None and valid.any():
                th = np.arctan2(origin[1] + t * dy, origin[0] + t * dx)
                valid &= ~window(th, z)
            if valid.any():
                t_best[valid] = t[valid]
                hit_tex[valid] = tex


def raycast(world: World, origin: np.ndarray, dirs: np.ndarray, max_range: float):
    """Nearest-hit ranges and surface textures for unit rays from `origin`.

    Returns (ranges, textures) with range = inf where nothing is hit within
    `max_range`.
    """
    n = len(dirs)
    t_best = np.full(n, np.inf)
    hit_tex = np.zeros(n)

    # ground annulus
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (world.ground_z - origin[2]) / dz
    gx = origin[0] + tg * dirs[:, 0]
    gy = origin[1] + tg * dirs[:, 1]
    gr = np.hypot(gx, gy)
    gok = (dz < 0) & (tg > 0.5) & (gr >= world.ground_r_lo) & (gr <= world.ground_r_hi)
    t_best[gok] = tg[gok]
    hit_tex[gok] = world.ground_texture

    for k in range(len(world.arc_radius)):
        th0, th1 = world.arc_th0[k], world.arc_th1[k]
        freq, phase, level = world.arc_window_freq[k], world.arc_window_phase[k], world.arc_window_level[k]

        def window(th, z, th0=th0, th1=th1, freq=freq, phase=phase, level=level):
            inside = ((th - th0) % (2.0 * np.pi)) <= ((th1 - th0) % (2.0 * np.pi))
            cut = (np.sin(freq * th + phase) > level) & (z > 0.5)
            return ~inside | cut

        _cylinder_hits(
            origin, dirs, 0.0, 0.0, world.arc_radius[k], t_best, hit_tex,
            world.arc_texture[k], (world.arc_z0[k], world.arc_z1[k]), window,
        )
    for k in range(len(world.pole_x)):
        _cylinder_hits(
            origin, dirs, world.pole_x[k], world.pole_y[k], world.pole_r[k],
            t_best, hit_tex, world.pole_texture[k], (-2.0, world.pole_z1[k]),
        )
    t_best[t_best > max_range] = np.inf
    return t_best, hit_tex


def _pixel_directions(cfg: RivConfig, rng: np.random.Generator):
    """Unit ray per pixel in the sensor frame, jittered inside its pixel."""
    u, v = np.meshgrid(np.arange(cfg.width), np.arange(cfg.height))
    u = u.ravel() + 0.5 + rng.uniform(-0.35, 0.35, cfg.width * cfg.height)
    v = v.ravel() + 0.5 + rng.uniform(-0.35, 0.35, cfg.width * cfg.height)
    azim = np.pi * (1.0 - 2.0 * u / cfg.width)
    elev = cfg.fov_total * (1.0 - v / cfg.height) - cfg.fov_up
    ce = np.cos(elev)
    return np.stack([ce * np.cos(azim), ce * np.sin(azim), np.sin(elev)], axis=1), azim


def render_scan(world: World, pose: Pose, spec: SyntheticSpec, cfg: RivConfig,
                rng: np.random.Generator, id: str) -> Scan:
    """One nuisanced ray-cast scan of the world from a pose."""
    dirs_sensor, azim = _pixel_directions(cfg, rng)
    R = pose.matrix().rotation
    dirs_world = dirs_sensor @ R.T
    ranges, texture = raycast(world, pose.translation, dirs_world, spec.max_range)

    keep = np.isfinite(ranges)
    keep &= rng.random(len(ranges)) > spec.dropout
    for _ in range(spec.occlusion_sectors):
        start = rng.uniform(-np.pi, np.pi)
        width = rng.uniform(0.3, 1.0) * spec.occlusion_width
        d = np.abs((azim - start + np.pi) % (2.0 * np.pi) - np.pi)
        keep &= d > width / 2.0

    r = ranges[keep] + rng.normal(0.0, spec.range_noise, int(keep.sum()))
    pts = dirs_sensor[keep] * r[:, None]
    az = azim[keep]
    tex = texture[keep]

    # reflectivity nuisance: random azimuthal blotches and a per-scan gain
    # dominate; only `texture_weight` of the signal is stable surface texture
    blotch = np.zeros(len(pts))
    for _ in range(4):
        f = rng.uniform(1.0, 9.0)
        ph = rng.uniform(0.0, 2.0 * np.pi)
        blotch += rng.uniform(0.3, 1.0) * np.sin(f * az + ph)
    if len(pts):
        blotch = (blotch - blotch.min()) / max(blotch.max() - blotch.min(), 1e-9)
    gain = rng.uniform(0.4, 1.6)
    offset = rng.uniform(-0.15, 0.25)
    refl = spec.texture_weight * tex + (1.0 - spec.texture_weight) * blotch
    refl = np.clip(gain * refl + offset + rng.normal(0.0, 0.06, len(pts)), 0.0, 1.0)
    return Scan(pts, refl * 255.0, timestamp=pose.timestamp, id=id)


def session_poses(spec: SyntheticSpec, session: int) -> list[Pose]:
    """Poses along the loop; session 1 runs slightly wide with fresh noise."""
    rng = np.random.default_rng((spec.world_seed, 100 + session))
    radius = spec.path_radius + session * spec.session_radial_offset
    poses = []
    for i in range(spec.n_scans):
        th = 2.0 * np.pi * i / spec.n_scans + rng.normal(0.0, 0.004)
        pos = np.array([radius * np.cos(th), radius * np.sin(th), rng.normal(0.0, 0.05)])
        heading = th + np.pi / 2.0 + rng.normal(0.0, 0.03)
        q = np.array([0.0, 0.0, np.sin(heading / 2.0), np.cos(heading / 2.0)])
        poses.append(Pose(q, pos, timestamp=i * spec.scan_period))
    return poses


def synthetic_session(spec: SyntheticSpec | None = None, session: int = 0, cfg: RivConfig | None = None):
    """All scans and poses of one session: ([Scan], [Pose])."""
    spec = spec or SyntheticSpec()
    cfg = cfg or default_riv_config(spec)
    world = build_world(spec)
    poses = session_poses(spec, session)
    scans = []
    for i, pose in enumerate(poses):
        rng = np.random.default_rng((spec.world_seed, session, i))
        scans.append(render_scan(world, pose, spec, cfg, rng, id=f"s{session}_{i:03d}"))
    return scans, poses


def synthetic_benchmark(spec: SyntheticSpec | None = None, cfg: RivConfig | None = None):
    """Both sessions of the loop: ((scans0, poses0), (scans1, poses1))."""
    spec = spec or SyntheticSpec()
    cfg = cfg or default_riv_config(spec)
    world = build_world(spec)
    out = []
    for session in range(2):
        poses = session_poses(spec, session)
        scans = []
        for i, pose in enumerate(poses):
            rng = np.random.default_rng((spec.world_seed, session, i))
            scans.append(render_scan(world, pose, spec, cfg, rng, id=f"s{session}_{i:03d}"))
        out.append((scans, poses))
    return tuple(out)
