"""Profiles, INI overlay, and strict key validation."""

import pytest

from npslam.config import ConfigError, load_config, profile_config
from npslam.pointcloud import DynamicRadiusConfig


def test_default_radius_band():
    cfg = DynamicRadiusConfig()
    assert cfg.r_l == 0.02 and cfg.r_u == 0.08


def test_profile_tables():
    replica = profile_config("replica")
    assert replica.mapping.m_default == 300
    assert replica.mapping.map_every == 5
    assert replica.mapping.keyframe_every == 20
    assert replica.tracking.iterations == 40
    tum = profile_config("tum")
    assert tum.mapping.keyframe_every == 50
    assert tum.tracking.iterations == 200
    assert tum.decoders.use_feature_transform is False
    scannet = profile_config("scannet")
    assert scannet.tracking.lr == 0.0005
    synth = profile_config("synth")
    assert synth.mapping.map_every == 5
    assert synth.radius.rho == 0.002
    with pytest.raises(ConfigError):
        profile_config("kinect")


def test_ini_overlay_types(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(
        "[run]\nprofile = synth\nseed = 7\nuse_gt_poses = yes\n"
        "[mapping]\nm_default = 42\nlambda_color = 0.25\n"
        "[tracking]\nlr = 0.01\ngradient_pool = none\n"
        "[decoders]\nuse_exposure = true\n"
        "[radius]\nrho = 0.005\n")
    cfg = load_config(str(ini))
    assert cfg.profile == "synth" and cfg.seed == 7
    assert cfg.use_gt_poses is True
    assert cfg.mapping.m_default == 42
    assert isinstance(cfg.mapping.m_default, int)
    assert cfg.mapping.lambda_color == 0.25
    assert cfg.tracking.lr == 0.01
    assert cfg.tracking.gradient_pool is None
    assert cfg.decoders.use_exposure is True
    assert cfg.radius.rho == 0.005
    # untouched profile values survive the overlay
    assert cfg.mapping.map_every == 5


def test_explicit_profile_beats_ini(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nprofile = synth\n")
    cfg = load_config(str(ini), profile="replica")
    assert cfg.mapping.m_default == 300


def test_unknown_section_rejected(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[renderer]\nsamples = 9\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        load_config(str(ini))


def test_unknown_key_rejected(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[mapping]\nm_defualt = 10\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(str(ini))
    ini.write_text("[run]\nverbosity = 3\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(str(ini))


def test_bad_value_types_rejected(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[mapping]\nm_default = lots\n")
    with pytest.raises(ConfigError, match="expected a number"):
        load_config(str(ini))
    ini.write_text("[decoders]\nuse_exposure = maybe\n")
    with pytest.raises(ConfigError, match="expected a boolean"):
        load_config(str(ini))


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "nope.ini"))


def test_overrides():
    cfg = load_config(profile="synth",
                      overrides={"run.seed": 3, "mapping.m_default": 9})
    assert cfg.seed == 3 and cfg.mapping.m_default == 9
    with pytest.raises(ConfigError, match="unknown override"):
        load_config(overrides={"mapping.bogus": 1})
    with pytest.raises(ConfigError, match="unknown override section"):
        load_config(overrides={"wat.key": 1})


def test_exposure_gating_disables_tracking_exposure():
    synth = load_config(profile="synth")      # profile turns exposure off
    assert synth.decoders.use_exposure is False
    assert synth.tracking.optimize_exposure is False
    tum = load_config(profile="tum")
    assert tum.decoders.use_exposure is True
    assert tum.tracking.optimize_exposure is True
