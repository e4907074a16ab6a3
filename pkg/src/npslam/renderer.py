"""Differentiable point-based volume rendering.

A pixel ray takes 5 samples in a band around its sensor depth, or 25 samples
over [0.3 m, 1.2 * max depth] when no sensor depth exists. Each sample
interpolates features from at most 8 cloud points inside a query ball of
radius 2r (r = per-pixel dynamic radius) with inverse-squared-distance
weights, decodes occupancy and color, and the ray alpha-composites front to
back without weight renormalization. Samples with fewer than two neighbors
get zero occupancy; rays where every sample is starved are flagged invalid
and excluded from losses.

Everything from sample positions onward runs on the autodiff tape, so
gradients reach features, decoder weights, the encoding matrix, exposure
parameters, and (when the caller passes pose-derived nodes) the camera pose.
Neighbor sets are chosen from current numeric positions and held fixed
within one evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .decoders import DecoderBundle
from .pointcloud import NeuralPointCloud
from .tape import Node, Parameter, as_node, constant

WEIGHT_EPS = 1e-6  # m^2, guards coincident sample/point pairs
_SUM_EPS = 1e-30   # keeps zero-neighbor weight rows from dividing by zero

N_SAMPLES_GUIDED = 5
N_SAMPLES_FREE = 25
FREE_NEAR = 0.3
FREE_FAR_FACTOR = 1.2
MIN_NEIGHBORS = 2
K_MAX = 8


def sample_depths_guided(depths: np.ndarray, rho: float,
                         n: int = N_SAMPLES_GUIDED) -> np.ndarray:
    """(R, n) z-depths evenly spaced over [(1-rho)D, (1+rho)D] inclusive."""
    d = np.asarray(depths, dtype=np.float64)[:, None]
    frac = np.linspace(1.0 - rho, 1.0 + rho, n)[None, :]
    return d * frac


def sample_depths_free(d_max: float, n: int = N_SAMPLES_FREE,
                       near: float = FREE_NEAR) -> np.ndarray:
    """(n,) z-depths evenly spaced over [near, 1.2 * d_max] inclusive."""
    far = FREE_FAR_FACTOR * float(d_max)
    if far <= near:
        raise ValueError(f"far bound {far} must exceed near bound {near}")
    return np.linspace(near, far, n)


def composite_np(occ: np.ndarray) -> np.ndarray:
    """Reference alpha compositing on plain arrays: a_i = o_i * prod_{j<i}(1-o_j)."""
    occ = np.asarray(occ, dtype=np.float64)
    trans = np.cumprod(1.0 - occ, axis=-1)
    shifted = np.concatenate([np.ones_like(trans[..., :1]), trans[..., :-1]], axis=-1)
    return occ * shifted


@dataclass
class RenderResult:
    """Per-ray render outputs; node fields live on the caller's tape."""

    depth: Node        # (R,) expected termination z-depth
    color: Node        # (R,3) composited color, exposure-corrected if latent given
    var: Node          # (R,) depth variance along the ray
    alpha: Node        # (R,M) per-sample termination probabilities
    alpha_sum: Node    # (R,) total opacity
    valid: np.ndarray  # (R,) bool, ray has at least one sample with >= 2 neighbors
    sample_counts: np.ndarray  # (R,M) neighbor counts per sample


def render_batch(cloud: NeuralPointCloud, decoders: DecoderBundle,
                 origin, dirs, z_vals: np.ndarray, radii: np.ndarray,
                 latent: Parameter | None = None,
                 neighbor_override=None, render_color: bool = True) -> RenderResult:
    """Render R rays with a shared origin.

    origin: (3,) array or Node; dirs: (R,3) array or Node, scaled so that the
    camera-frame z component is 1 (then origin + z * dir lies at z-depth z).
    z_vals: (R,M) sample depths; radii: (R,) per-pixel dynamic radius r (the
    neighbor query uses 2r). Pass origin/dirs as tape nodes to obtain pose
    gradients. `neighbor_override` pins (idx, mask, counts) from a previous
    query, used by finite-difference tests. With render_color=False the
    color networks are skipped and the color output is zero (geometry-only
    optimization stage).
    """
    z_vals = np.asarray(z_vals, dtype=np.float64)
    R, M = z_vals.shape
    S = R * M

    origin_n = as_node(origin)
    dirs_n = as_node(dirs)

    # sample positions, on tape: (R,M,3) = origin + z * dir
    x = tape.reshape(origin_n, (1, 1, 3)) + \
        tape.mul(constant(z_vals[:, :, None]), tape.reshape(dirs_n, (R, 1, 3)))
    x_flat = tape.reshape(x, (S, 3))

    if neighbor_override is not None:
        idx, mask, counts = neighbor_override
    else:
        query_r = np.repeat(2.0 * np.asarray(radii, dtype=np.float64), M)
        idx, _, mask, counts = cloud.batch_radius_neighbors(
            x_flat.value, query_r, k_max=K_MAX)

    sample_ok = counts >= MIN_NEIGHBORS
    mask = mask & sample_ok[:, None]
    valid = sample_ok.reshape(R, M).any(axis=1)

    # compact to samples that can decode; scatter back through a gather
    ok_rows = np.flatnonzero(sample_ok)
    n_ok = len(ok_rows)
    if n_ok == 0:
        zero_r = constant(np.zeros(R))
        return RenderResult(depth=zero_r, color=constant(np.zeros((R, 3))),
                            var=zero_r, alpha=constant(np.zeros((R, M))),
                            alpha_sum=zero_r, valid=valid,
                            sample_counts=counts.reshape(R, M))

    idx_ok = idx[ok_rows]                      # (n_ok, K)
    mask_ok = mask[ok_rows].astype(np.float64)  # (n_ok, K)
    x_ok = tape.gather(x_flat, ok_rows)         # (n_ok, 3)

    nbr_pos = constant(cloud.positions[idx_ok])          # (n_ok, K, 3)
    rel = nbr_pos - tape.reshape(x_ok, (n_ok, 1, 3))     # p_k - x_i
    d2 = tape.reduce_sum(tape.square(rel), axis=-1)      # (n_ok, K)
    w_raw = tape.mul(tape.div(constant(np.ones(1)), d2 + WEIGHT_EPS),
                     constant(mask_ok))
    w_sum = tape.reduce_sum(w_raw, axis=-1, keepdims=True)
    w = tape.div(w_raw, w_sum + _SUM_EPS)                # rows sum to 1

    f_geo = tape.gather(cloud.f_geo, idx_ok)             # (n_ok, K, 32)
    p_geo = tape.reduce_sum(tape.mul(tape.reshape(w, (n_ok, K_MAX, 1)), f_geo),
                            axis=1)
    occ_ok = decoders.decode_occupancy(x_ok, p_geo)      # (n_ok,)

    # scatter back to (S,) / (S,3): slot 0 holds the zero used by starved samples
    scatter_map = np.zeros(S, dtype=np.int64)
    scatter_map[ok_rows] = np.arange(1, n_ok + 1)
    occ = tape.gather(tape.concat([constant(np.zeros(1)), occ_ok], axis=0),
                      scatter_map)
    occ = tape.reshape(occ, (R, M))

    if render_color:
        f_col = tape.gather(cloud.f_col, idx_ok)
        f_col_t = decoders.transform_feature(
            tape.reshape(f_col, (n_ok * K_MAX, -1)),
            tape.reshape(rel, (n_ok * K_MAX, 3)))
        f_col_t = tape.reshape(f_col_t, (n_ok, K_MAX, -1))
        p_col = tape.reduce_sum(
            tape.mul(tape.reshape(w, (n_ok, K_MAX, 1)), f_col_t), axis=1)
        col_ok = decoders.decode_color(x_ok, p_col)      # (n_ok, 3)
        col = tape.gather(tape.concat([constant(np.zeros((1, 3))), col_ok],
                                      axis=0), scatter_map)
        col = tape.reshape(col, (R, M, 3))

    # front-to-back compositing, no renormalization
    trans = constant(np.ones(R))
    alphas = []
    for i in range(M):
        o_i = occ[:, i]
        alphas.append(tape.mul(o_i, trans))
        trans = tape.mul(trans, constant(np.ones(R)) - o_i)
    alpha = tape.stack(alphas, axis=1)                   # (R,M)
    alpha_sum = tape.reduce_sum(alpha, axis=1)

    z_node = constant(z_vals)
    depth = tape.reduce_sum(tape.mul(alpha, z_node), axis=1)
    diff = constant(z_vals) - tape.reshape(depth, (R, 1))
    var = tape.reduce_sum(tape.mul(alpha, tape.square(diff)), axis=1)

    if render_color:
        color = tape.reduce_sum(tape.mul(tape.reshape(alpha, (R, M, 1)), col),
                                axis=1)
        if latent is not None:
            color = decoders.exposure_transform(color, latent)
    else:
        color = constant(np.zeros((R, 3)))

    return RenderResult(depth=depth, color=color, var=var, alpha=alpha,
                        alpha_sum=alpha_sum, valid=valid,
                        sample_counts=counts.reshape(R, M))


def render_pixels(cloud: NeuralPointCloud, decoders: DecoderBundle,
                  K, pose, us: np.ndarray, vs: np.ndarray,
                  depth_map: np.ndarray, radii_map: np.ndarray, rho: float,
                  latent: Parameter | None = None,
                  render_color: bool = True) -> tuple[RenderResult, np.ndarray]:
    """Render selected pixels of one frame with a fixed (numeric) pose.

    Pixels with valid sensor depth take depth-guided samples; the rest march
    [0.3, 1.2 * max depth]. Returns a RenderResult over all requested pixels
    (original order) plus the boolean guided/free split mask. When the batch
    mixes both sampling modes, only depth/color/var/valid are merged; the
    per-sample alpha fields refer to the first sub-batch.
    """
    from . import geometry

    us = np.asarray(us)
    vs = np.asarray(vs)
    dirs = geometry.pixel_dirs_cam(us, vs, K) @ pose.rotation.T
    d = depth_map[vs, us]
    radii = radii_map[vs, us]
    guided = d > 0

    n = len(us)
    parts: list[tuple[np.ndarray, RenderResult]] = []
    if guided.any():
        z = sample_depths_guided(d[guided], rho)
        res = render_batch(cloud, decoders, pose.t, dirs[guided], z,
                           radii[guided], latent=latent,
                           render_color=render_color)
        parts.append((np.flatnonzero(guided), res))
    if (~guided).any():
        d_max = float(depth_map.max())
        if d_max <= 0:
            d_max = 1.0
        z_row = sample_depths_free(d_max)
        z = np.broadcast_to(z_row, ((~guided).sum(), N_SAMPLES_FREE)).copy()
        res = render_batch(cloud, decoders, pose.t, dirs[~guided], z,
                           radii[~guided], latent=latent,
                           render_color=render_color)
        parts.append((np.flatnonzero(~guided), res))

    if len(parts) == 1:
        order, res = parts[0]
        if len(order) == n and np.all(order == np.arange(n)):
            return res, guided

    # merge sub-batches back into request order
    depth_slots: list[Node | None] = [None] * n
    color_slots: list[Node | None] = [None] * n
    var_slots: list[Node | None] = [None] * n
    valid = np.zeros(n, dtype=bool)
    for order, res in parts:
        valid[order] = res.valid
        for j, pix in enumerate(order):
            depth_slots[pix] = res.depth[j]
            color_slots[pix] = res.color[j]
            var_slots[pix] = res.var[j]
    merged = RenderResult(
        depth=tape.stack([s for s in depth_slots], axis=0),
        color=tape.stack([s for s in color_slots], axis=0),
        var=tape.stack([s for s in var_slots], axis=0),
        alpha=parts[0][1].alpha, alpha_sum=parts[0][1].alpha_sum,
        valid=valid, sample_counts=parts[0][1].sample_counts)
    return merged, guided


def render_frame(cloud: NeuralPointCloud, decoders: DecoderBundle, K, pose,
                 color_image: np.ndarray, depth_map: np.ndarray | None,
                 radius_cfg, rho: float, stride: int = 1, chunk: int = 4096,
                 latent: Parameter | None = None):
    """Render a full frame (every `stride`-th pixel) without gradients.

    `color_image` supplies the per-pixel gradient that sets query radii;
    `depth_map` (if given) guides sampling. Returns float arrays: depth
    (H',W'), color (H',W',3), and a validity mask (H',W').
    """
    from .pointcloud import color_gradient_magnitude, dynamic_radius

    H, W = color_image.shape[:2]
    radii_map = dynamic_radius(color_gradient_magnitude(color_image), radius_cfg)
    if depth_map is None:
        depth_map = np.zeros((H, W))

    vs_g = np.arange(0, H, stride)
    us_g = np.arange(0, W, stride)
    uu, vv = np.meshgrid(us_g, vs_g)
    us, vs = uu.ravel(), vv.ravel()

    out_d = np.zeros(len(us))
    out_c = np.zeros((len(us), 3))
    out_v = np.zeros(len(us), dtype=bool)
    for lo in range(0, len(us), chunk):
        hi = min(lo + chunk, len(us))
        res, _ = render_pixels(cloud, decoders, K, pose, us[lo:hi], vs[lo:hi],
                               depth_map, radii_map, rho, latent=latent)
        out_d[lo:hi] = res.depth.value
        out_c[lo:hi] = res.color.value
        out_v[lo:hi] = res.valid

    shape = (len(vs_g), len(us_g))
    return out_d.reshape(shape), out_c.reshape(shape + (3,)), out_v.reshape(shape)


# image export -----------------------------------------------------------------

DEPTH_PNG_SCALE = 5000.0


def write_ppm(path, color: np.ndarray) -> None:
    """Binary P6 PPM, 8 bits per channel, from floats in [0,1]."""
    img = np.clip(np.asarray(color), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"not a binary PPM: {path}")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm16(path, depth_m: np.ndarray) -> None:
    """Binary P5 PGM, 16-bit big-endian, depth in meters scaled by 5000."""
    q = np.round(np.asarray(depth_m) * DEPTH_PNG_SCALE)
    data = np.clip(q, 0, 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"not a binary PGM: {path}")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4][:w * h * 2], dtype=">u2")
    return data.reshape(h, w).astype(np.float64) / DEPTH_PNG_SCALE
