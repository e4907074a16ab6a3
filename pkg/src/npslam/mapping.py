"""Map optimization: point insertion, keyframe windows, staged loss.

Each mapping phase adds points for the newly tracked frame, picks a window
of overlapping keyframes, and runs an adaptive number of Adam iterations on
a re-rendering loss. The first 40% of iterations fit depth only at a high
learning rate (geometry features, occupancy head, encoding matrix); the
remaining iterations add the color term and step every parameter group at a
lower rate. Poses are never optimized here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry, tape
from .decoders import DecoderBundle
from .geometry import CameraIntrinsics, Pose, RGBDFrame
from .optim import AdamState, adam_step
from .pointcloud import (DynamicRadiusConfig, NeuralPointCloud,
                         color_gradient_magnitude, dynamic_radius)
from .renderer import render_pixels
from .tape import constant

log = logging.getLogger(__name__)


@dataclass
class MappingConfig:
    m_default: int = 300          # default iteration budget m_d
    n_pixels: int = 5000          # pixel budget per iteration, all frames
    window: int = 12              # max frames per batch incl. current
    lambda_color: float = 0.1
    map_every: int = 5
    keyframe_every: int = 20
    geometry_fraction: float = 0.4
    lr_geometry: float = 0.03
    lr_joint: float = 0.005
    # network weights move slower than point features: the decoders are
    # trained from scratch here, and full feature-rate steps make them
    # oscillate instead of converge
    decoder_lr_scale: float = 0.1
    points_uniform: int = 6000    # uniform pixel draws for point insertion
    points_gradient: int = 1000   # gradient-pool draws for point insertion
    overlap_threshold: float = 0.15
    overlap_samples: int = 100
    iter_floor: float = 0.95      # clamp factors around m_default
    iter_cap: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.geometry_fraction < 1.0):
            raise ValueError(f"geometry_fraction must be in (0,1), "
                             f"got {self.geometry_fraction}")
        for name in ("m_default", "n_pixels", "window", "map_every",
                     "keyframe_every", "lr_geometry", "lr_joint"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Keyframe:
    frame: RGBDFrame
    pose: Pose


@dataclass
class KeyframeDB:
    every: int
    frames: list[Keyframe] = field(default_factory=list)

    def maybe_insert(self, frame: RGBDFrame, pose: Pose) -> bool:
        if frame.frame_id % self.every == 0:
            self.frames.append(Keyframe(frame, pose))
            return True
        return False

    def __len__(self) -> int:
        return len(self.frames)


def adaptive_iterations(n_added: int, m_default: int, floor: float = 0.95,
                        cap: float = 2.0) -> int:
    """Iteration budget scaled by points added, clamped to [0.95, 2] x m_d."""
    if n_added < 0:
        raise ValueError(f"n_added must be >= 0, got {n_added}")
    m = np.round(m_default * n_added / 300.0)
    return int(np.rint(np.clip(m, floor * m_default, cap * m_default)))


def frame_overlap_score(points_world: np.ndarray, kf: Keyframe,
                        K: CameraIntrinsics) -> float:
    """Fraction of world points visible in the keyframe's frustum."""
    u, v, z = geometry.project(points_world, K, kf.pose)
    inside = (z > 0) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    return float(inside.mean()) if len(inside) else 0.0


def select_keyframes(frame: RGBDFrame, pose: Pose, db: KeyframeDB,
                     K: CameraIntrinsics, cfg: MappingConfig,
                     rng: np.random.Generator) -> list[Keyframe]:
    """Keyframes to co-optimize with the current frame (current excluded).

    Overlap is scored by unprojecting `overlap_samples` random valid-depth
    pixels of the current frame and projecting them into each keyframe.
    Candidates above the threshold (minus the most recent keyframe) fill up
    to window-2 slots by uniform draw; the most recent keyframe is always
    appended.
    """
    if cfg.window <= 1 or len(db) == 0:
        return []
    flat = np.flatnonzero(frame.depth.ravel() > 0)
    if len(flat) == 0:
        return [db.frames[-1]]
    take = rng.choice(flat, size=min(cfg.overlap_samples, len(flat)),
                      replace=False)
    vs, us = np.unravel_index(take, frame.depth.shape)
    pts = geometry.unproject_many(us, vs, frame.depth[vs, us], K, pose)

    recent = db.frames[-1]
    candidates = [kf for kf in db.frames[:-1]
                  if frame_overlap_score(pts, kf, K) > cfg.overlap_threshold]
    n_draw = min(cfg.window - 2, len(candidates))
    chosen: list[Keyframe] = []
    if n_draw > 0:
        picks = rng.choice(len(candidates), size=n_draw, replace=False)
        chosen = [candidates[i] for i in sorted(picks)]
    return chosen + [recent]


def mapping_loss(res, d_ref: np.ndarray, c_ref: np.ndarray, joint: bool,
                 lambda_color: float):
    """Staged L1 loss over one masked pixel batch.

    The geometry stage sums |D - D_hat| over valid pixels with reference
    depth; the joint stage adds lambda_color times the sum over valid pixels
    of the channel-mean |I - I_hat|. Returns (node, stats) where stats holds
    the summed absolute errors and pixel counts for logging; node is None
    when every pixel is masked out.
    """
    term = None
    stats = {"depth_abs": 0.0, "n_depth": 0, "color_abs": 0.0, "n_color": 0}
    rows = np.flatnonzero(res.valid & (d_ref > 0))
    if len(rows):
        d_err = tape.absolute(tape.gather(res.depth, rows)
                              - constant(d_ref[rows]))
        term = tape.reduce_sum(d_err)
        stats["depth_abs"] = float(term.value)
        stats["n_depth"] = len(rows)
    if joint:
        crows = np.flatnonzero(res.valid)
        if len(crows):
            c_err = tape.reduce_mean(
                tape.absolute(tape.gather(res.color, crows)
                              - constant(c_ref[crows])),
                axis=-1)
            c_term = tape.reduce_sum(c_err)
            stats["color_abs"] = float(c_term.value)
            stats["n_color"] = len(crows)
            term = c_term * lambda_color if term is None \
                else term + c_term * lambda_color
    return term, stats


def map_frame(cloud: NeuralPointCloud, decoders: DecoderBundle,
              frame: RGBDFrame, pose: Pose, K: CameraIntrinsics,
              db: KeyframeDB, cfg: MappingConfig,
              radius_cfg: DynamicRadiusConfig,
              rng: np.random.Generator,
              trace: list | None = None) -> dict:
    """One mapping phase; returns the per-frame stats row for the log.

    `trace`, when given, collects the batch loss value of every iteration.
    """
    n_added = cloud.add_points(frame, pose, K, cfg.points_uniform,
                               cfg.points_gradient, rng)
    m_i = adaptive_iterations(n_added, cfg.m_default, cfg.iter_floor,
                              cfg.iter_cap)
    geo_iters = int(np.floor(cfg.geometry_fraction * m_i))

    batch = select_keyframes(frame, pose, db, K, cfg, rng) + [Keyframe(frame, pose)]
    per_frame: list[dict] = []
    n_frames = len(batch)
    share = cfg.n_pixels // n_frames
    for j, kf in enumerate(batch):
        budget = share + (cfg.n_pixels - share * n_frames if j == n_frames - 1 else 0)
        radii = dynamic_radius(color_gradient_magnitude(kf.frame.color), radius_cfg)
        latent = (decoders.latent_for(kf.frame.frame_id)
                  if decoders.exposure is not None else None)
        per_frame.append({"kf": kf, "radii": radii, "budget": budget,
                          "latent": latent})

    latents = [e["latent"] for e in per_frame if e["latent"] is not None]
    net_col = list(decoders.g.parameters())
    if decoders.f_transform is not None:
        net_col += decoders.f_transform.parameters()
    if decoders.exposure is not None:
        net_col += decoders.exposure.parameters()
    feat_geo = AdamState([cloud.f_geo], lr=cfg.lr_geometry)
    net_geo = AdamState(decoders.geometry_parameters(),
                        lr=cfg.lr_geometry * cfg.decoder_lr_scale)
    feat_col = AdamState([cloud.f_col] + latents, lr=cfg.lr_joint)
    net_col_state = AdamState(net_col, lr=cfg.lr_joint * cfg.decoder_lr_scale)

    depth_mean = float("nan")
    color_mean = float("nan")
    for it in range(m_i):
        joint = it >= geo_iters
        loss = None
        depth_abs_sum = 0.0
        color_abs_sum = 0.0
        n_depth_px = 0
        n_color_px = 0
        for entry in per_frame:
            kf: Keyframe = entry["kf"]
            H, W = kf.frame.depth.shape
            flat = rng.integers(0, H * W, size=entry["budget"])
            vs, us = np.unravel_index(flat, (H, W))
            res, _ = render_pixels(cloud, decoders, K, kf.pose, us, vs,
                                   kf.frame.depth, entry["radii"],
                                   radius_cfg.rho,
                                   latent=entry["latent"] if joint else None,
                                   render_color=joint)
            term, lstats = mapping_loss(res, kf.frame.depth[vs, us],
                                        kf.frame.color[vs, us], joint,
                                        cfg.lambda_color)
            depth_abs_sum += lstats["depth_abs"]
            n_depth_px += lstats["n_depth"]
            color_abs_sum += lstats["color_abs"]
            n_color_px += lstats["n_color"]
            if term is not None:
                loss = term if loss is None else loss + term
        if loss is None:
            log.warning("frame %d: empty mapping batch at iteration %d",
                        frame.frame_id, it)
            continue
        if trace is not None:
            trace.append(float(loss.value))
        tape.backward(loss)
        if joint:
            adam_step(feat_geo, lr=cfg.lr_joint)
            adam_step(net_geo, lr=cfg.lr_joint * cfg.decoder_lr_scale)
            adam_step(feat_col)
            adam_step(net_col_state)
        else:
            adam_step(feat_geo)
            adam_step(net_geo)
        if n_depth_px:
            depth_mean = depth_abs_sum / n_depth_px
        if n_color_px:
            color_mean = color_abs_sum / n_color_px

    return {"frame_id": frame.frame_id, "points_added": n_added,
            "iterations": m_i, "geometry_iterations": geo_iters,
            "final_depth_loss": depth_mean, "final_color_loss": color_mean}
