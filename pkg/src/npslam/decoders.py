"""Positional encoding and the four MLP heads used by the renderer.

All heads run on the autodiff tape and operate on row batches:

* ``h``      — occupancy from position encoding + interpolated geo feature,
* ``g``      — color from position encoding + interpolated color feature,
* ``F``      — per-neighbor color-feature transform (optional, identity when off),
* ``G``      — per-frame exposure compensation: latent -> affine color map.

The exposure head's output layer starts at zero and the identity is added,
so an untrained exposure module is an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Node, Parameter, as_node

GEO_FEATURE_DIM = 32
COLOR_FEATURE_DIM = 32


class Linear:
    """Dense layer y = x W + b with Xavier-uniform or zero init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 name: str, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), name=f"{name}.bias")

    def __call__(self, x: Node) -> Node:
        return tape.matmul(x, self.weight) + self.bias

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Mlp:
    """Softplus-activated MLP; output is linear or sigmoid-squashed."""

    def __init__(self, n_in: int, hidden: tuple[int, ...], n_out: int,
                 rng: np.random.Generator, name: str,
                 sigmoid_output: bool = False, zero_init_output: bool = False):
        dims = (n_in,) + tuple(hidden) + (n_out,)
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, f"{name}.{i}",
                   zero_init=(zero_init_output and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]
        self.sigmoid_output = sigmoid_output

    def __call__(self, x: Node) -> Node:
        for layer in self.layers[:-1]:
            x = tape.softplus(layer(x))
        x = self.layers[-1](x)
        return tape.sigmoid(x) if self.sigmoid_output else x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class GaussianPositionalEncoding:
    """Fourier features [sin(2πBx), cos(2πBx)] with a trainable B."""

    def __init__(self, n_freq: int, sigma: float, rng: np.random.Generator):
        if n_freq < 1:
            raise ValueError(f"n_freq must be >= 1, got {n_freq}")
        self.n_freq = n_freq
        self.B = Parameter(rng.normal(0.0, sigma, size=(n_freq, 3)), name="pe.B")

    @property
    def out_dim(self) -> int:
        return 2 * self.n_freq

    def __call__(self, x: Node | np.ndarray) -> Node:
        x = as_node(x)
        ang = tape.matmul(x, tape.transpose(self.B)) * (2.0 * np.pi)
        return tape.concat([tape.sin(ang), tape.cos(ang)], axis=-1)


@dataclass
class DecoderConfig:
    n_freq: int = 16
    sigma_pe: float = 10.0
    hidden_width: int = 128
    latent_dim: int = 8
    use_feature_transform: bool = True
    use_exposure: bool = True
    # start transparent: sigmoid(occ_bias_init) is the initial occupancy,
    # keeping early compositing away from first-sample saturation
    occ_bias_init: float = -2.0


class DecoderBundle:
    """All trainable network heads plus per-frame exposure latents."""

    def __init__(self, cfg: DecoderConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg or DecoderConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.cfg
        w = c.hidden_width
        self.pe = GaussianPositionalEncoding(c.n_freq, c.sigma_pe, rng)
        n_in = self.pe.out_dim + GEO_FEATURE_DIM
        self.h = Mlp(n_in, (w, w), 1, rng, "h", sigmoid_output=True)
        self.h.layers[-1].bias.value[:] = c.occ_bias_init
        self.g = Mlp(n_in, (w, w), 3, rng, "g", sigmoid_output=True)
        self.f_transform = (
            Mlp(COLOR_FEATURE_DIM + self.pe.out_dim, (w,), COLOR_FEATURE_DIM,
                rng, "f_transform")
            if c.use_feature_transform else None
        )
        self.exposure = (
            Mlp(c.latent_dim, (w,), 12, rng, "exposure", zero_init_output=True)
            if c.use_exposure else None
        )
        self.latents: dict[int, Parameter] = {}

    # parameter bookkeeping -------------------------------------------------

    def latent_for(self, frame_id: int) -> Parameter:
        if self.exposure is None:
            raise RuntimeError("exposure module is disabled")
        if frame_id not in self.latents:
            self.latents[frame_id] = Parameter(np.zeros(self.cfg.latent_dim),
                                               name=f"latent.{frame_id}")
        return self.latents[frame_id]

    def geometry_parameters(self) -> list[Parameter]:
        return [self.pe.B] + self.h.parameters()

    def color_parameters(self, frame_ids=None) -> list[Parameter]:
        out = list(self.g.parameters())
        if self.f_transform is not None:
            out += self.f_transform.parameters()
        if self.exposure is not None:
            out += self.exposure.parameters()
            if frame_ids is None:
                out += [self.latents[k] for k in sorted(self.latents)]
            else:
                out += [self.latent_for(fid) for fid in frame_ids]
        return out

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        params = self.geometry_parameters() + self.color_parameters()
        return [(p.name, p) for p in params]

    # forward passes ---------------------------------------------------------

    def decode_occupancy(self, x: Node, p_geo: Node) -> Node:
        """Occupancy in (0,1) for positions x (N,3) and features (N,32)."""
        feat = tape.concat([self.pe(x), p_geo], axis=-1)
        return tape.reshape(self.h(feat), (-1,))

    def decode_color(self, x: Node, p_col: Node) -> Node:
        """Color in (0,1)^3 for positions x (N,3) and features (N,32)."""
        feat = tape.concat([self.pe(x), p_col], axis=-1)
        return self.g(feat)

    def transform_feature(self, f_col: Node, rel: Node) -> Node:
        """Neighbor color feature conditioned on the offset to the query.

        `rel` holds p_k - x_i rows; with the transform disabled the feature
        passes through unchanged.
        """
        if self.f_transform is None:
            return f_col
        return self.f_transform(tape.concat([f_col, self.pe(rel)], axis=-1))

    def exposure_transform(self, color: Node, latent: Parameter) -> Node:
        """Per-frame affine color correction, clamped to [0,1].

        With the zero-initialized output layer the affine map is exactly the
        identity, so enabling the module does not perturb the initial loss.
        """
        if self.exposure is None:
            return color
        out = self.exposure(tape.reshape(latent, (1, self.cfg.latent_dim)))
        m = tape.reshape(out[0, :9], (3, 3)) + tape.constant(np.eye(3))
        b = out[0, 9:]
        return tape.clamp(tape.matmul(color, tape.transpose(m)) + b, 0.0, 1.0)
