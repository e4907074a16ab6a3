"""Run configuration: dataclass bundle, named profiles, INI file overlay.

A run is configured by picking a profile (per-dataset parameter table plus
a small-scale `synth` profile for CPU-budget acceptance runs) and then
overlaying values from an INI file whose sections mirror the module names.
Unknown sections or keys are rejected rather than ignored.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .decoders import DecoderConfig
from .mapping import MappingConfig
from .pointcloud import DynamicRadiusConfig
from .tracking import TrackingConfig


class ConfigError(ValueError):
    pass


@dataclass
class MeshingConfig:
    enabled: bool = True
    voxel: float = 0.01
    every: int = 5
    pad: float = 0.2
    use_sensor_depth_guidance: bool = True


@dataclass
class EvalConfig:
    eval_every: int = 10        # render every n-th frame for image metrics
    surface_samples: int = 20000
    compute_ssim: bool = False


@dataclass
class RunConfig:
    dataset_path: str = ""
    dataset_mode: str = "tum"   # "tum" (real or serialized synthetic layout)
    seed: int = 0
    output_dir: str = "out"
    profile: str = "synth"
    use_gt_poses: bool = False  # mapping-only mode: skip tracking entirely
    radius: DynamicRadiusConfig = field(default_factory=DynamicRadiusConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    decoders: DecoderConfig = field(default_factory=DecoderConfig)
    meshing: MeshingConfig = field(default_factory=MeshingConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)


def profile_config(name: str) -> RunConfig:
    """Parameter tables per dataset family, plus the small `synth` profile."""
    cfg = RunConfig(profile=name)
    if name == "replica":
        cfg.mapping = MappingConfig(m_default=300, n_pixels=5000, window=12,
                                    map_every=5, keyframe_every=20)
        cfg.tracking = TrackingConfig(n_pixels=1500, iterations=40, lr=0.002,
                                      gradient_pool=None)
        cfg.radius = DynamicRadiusConfig(rho=0.02)
    elif name == "tum":
        cfg.mapping = MappingConfig(m_default=150, n_pixels=10000, window=10,
                                    map_every=2, keyframe_every=50)
        cfg.tracking = TrackingConfig(n_pixels=5000, iterations=200, lr=0.002,
                                      gradient_pool=75000)
        cfg.radius = DynamicRadiusConfig(rho=0.02)
        # camera drift on real footage: keep color heads simple
        cfg.decoders = DecoderConfig(use_feature_transform=False,
                                     use_exposure=True)
    elif name == "scannet":
        cfg.mapping = MappingConfig(m_default=300, n_pixels=10000, window=20,
                                    map_every=5, keyframe_every=10)
        cfg.tracking = TrackingConfig(n_pixels=5000, iterations=100,
                                      lr=0.0005, gradient_pool=75000)
        cfg.radius = DynamicRadiusConfig(rho=0.04)
        cfg.decoders = DecoderConfig(use_feature_transform=False,
                                     use_exposure=False)
    elif name == "synth":
        # desk-scale budget: 80x60 frames, CPU-only runtimes
        cfg.mapping = MappingConfig(m_default=60, n_pixels=600, window=5,
                                    map_every=5, keyframe_every=10,
                                    points_uniform=1500, points_gradient=300,
                                    decoder_lr_scale=0.3)
        cfg.tracking = TrackingConfig(n_pixels=300, iterations=25, lr=0.002,
                                      gradient_pool=None)
        # rho bounds the converged rendered-depth bias at rho*depth (guided
        # samples never leave the band), so noise-free synthetic depth gets a
        # much tighter band than real sensors. The radius band is halved to
        # match the coarse pixel footprint: interpolation radius sets the
        # blur width at texture edges and dominates PSNR at this resolution.
        cfg.radius = DynamicRadiusConfig(r_l=0.01, r_u=0.04, rho=0.002)
        # synthetic sequences have constant exposure unless configured
        # otherwise; free gain/bias latents only add optimization jitter
        cfg.decoders = DecoderConfig(use_exposure=False)
        cfg.meshing = MeshingConfig(voxel=0.02)
        cfg.evaluation = EvalConfig(eval_every=10, surface_samples=20000)
    else:
        raise ConfigError(f"unknown profile {name!r} (choose replica, tum, "
                          f"scannet, or synth)")
    return cfg


_SECTION_FIELDS = {
    "run": ("dataset_path", "dataset_mode", "seed", "output_dir", "profile",
            "use_gt_poses"),
    "radius": "radius",
    "mapping": "mapping",
    "tracking": "tracking",
    "decoders": "decoders",
    "meshing": "meshing",
    "evaluation": "evaluation",
}


def _coerce(text: str, like) -> object:
    if isinstance(like, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if like is None or isinstance(like, int) and not isinstance(like, bool):
        try:
            return int(text)
        except ValueError:
            pass
    if like is None or isinstance(like, float):
        try:
            return float(text)
        except ValueError:
            pass
    if isinstance(like, int) or isinstance(like, float):
        raise ConfigError(f"expected a number, got {text!r}")
    return text


def _apply_keys(obj, section: str, items) -> None:
    valid = {f.name: f for f in dataclasses.fields(obj)}
    for key, text in items:
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        current = getattr(obj, key)
        if text.strip().lower() == "none":
            setattr(obj, key, None)
        else:
            setattr(obj, key, _coerce(text, current))


def load_config(path: str | None = None, profile: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig: profile defaults, then INI file, then overrides.

    `overrides` maps "section.key" strings to values (used by CLI flags).
    """
    parser = None
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path!r}")
        if profile is None and parser.has_option("run", "profile"):
            profile = parser.get("run", "profile")
    cfg = profile_config(profile or "synth")

    if parser is not None:
        for section in parser.sections():
            if section not in _SECTION_FIELDS:
                raise ConfigError(f"unknown config section [{section}]")
            items = parser.items(section)
            if section == "run":
                for key, text in items:
                    if key not in _SECTION_FIELDS["run"]:
                        raise ConfigError(f"unknown key {key!r} in [run]")
                    setattr(cfg, key, _coerce(text, getattr(cfg, key)))
            else:
                _apply_keys(getattr(cfg, _SECTION_FIELDS[section]),
                            section, items)

    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section == "run":
            setattr(cfg, key, value)
        elif section in _SECTION_FIELDS:
            target = getattr(cfg, _SECTION_FIELDS[section])
            if not hasattr(target, key):
                raise ConfigError(f"unknown override {dotted!r}")
            setattr(target, key, value)
        else:
            raise ConfigError(f"unknown override section in {dotted!r}")
    # exposure optimization in tracking requires the exposure head
    cfg.tracking.optimize_exposure = (cfg.tracking.optimize_exposure
                                      and cfg.decoders.use_exposure)
    return cfg
