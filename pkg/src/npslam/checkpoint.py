"""Binary checkpoint container for the map state.

Layout (all integers little-endian):

    magic   8 bytes  b"NPSLAMCK"
    version u32      currently 1
    count   u64      number of points
    geo_dim u32      geometric feature width (32)
    col_dim u32      color feature width (32)
    then `count` records: position 3xf64, geo feature, color feature
    n_sections u32
    per section: name_len u32, name utf-8, kind u8 (0 raw bytes / 1 f64
    array), for arrays ndim u32 + dims u64 each, payload_len u64, payload.

Decoder weights, the encoding matrix, exposure weights, and per-frame
latents are stored as named f64 array sections; the decoder configuration
rides along as a JSON bytes section so loading can rebuild the bundle.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .decoders import DecoderBundle, DecoderConfig
from .pointcloud import NeuralPointCloud
from .tape import Parameter

MAGIC = b"NPSLAMCK"
VERSION = 1
_CONFIG_SECTION = "__config__"


class CheckpointError(IOError):
    pass


def _write_section_bytes(fh, name: str, payload: bytes) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", 0))
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _write_section_array(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    data = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", 1))
    fh.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<Q", d))
    raw = data.tobytes()
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)


def save_checkpoint(path, cloud: NeuralPointCloud,
                    decoders: DecoderBundle) -> None:
    n = len(cloud)
    pos = cloud.positions
    f_geo = cloud.f_geo.value
    f_col = cloud.f_col.value
    record = np.concatenate([pos, f_geo, f_col], axis=1) if n else \
        np.zeros((0, 3 + f_geo.shape[1] + f_col.shape[1]))
    sections = list(decoders.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQII", VERSION, n, f_geo.shape[1],
                             f_col.shape[1]))
        fh.write(np.ascontiguousarray(record, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(sections) + 1))
        cfg_json = json.dumps(dataclasses.asdict(decoders.cfg),
                              sort_keys=True).encode("utf-8")
        _write_section_bytes(fh, _CONFIG_SECTION, cfg_json)
        for name, p in sections:
            _write_section_array(fh, name, p.value)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, "
                              f"got {len(data)}")
    return data


def load_checkpoint(path, radius_cfg=None):
    """Rebuilds (cloud, decoders) from a checkpoint file."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, n, geo_dim, col_dim = struct.unpack(
            "<IQII", _read_exact(fh, 4 + 8 + 4 + 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        width = 3 + geo_dim + col_dim
        record = np.frombuffer(_read_exact(fh, n * width * 8),
                               dtype="<f8").reshape(n, width)
        n_sections, = struct.unpack("<I", _read_exact(fh, 4))
        arrays: dict[str, np.ndarray] = {}
        cfg = None
        for _ in range(n_sections):
            name_len, = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            kind, = struct.unpack("<B", _read_exact(fh, 1))
            if kind == 0:
                plen, = struct.unpack("<Q", _read_exact(fh, 8))
                payload = _read_exact(fh, plen)
                if name == _CONFIG_SECTION:
                    cfg = DecoderConfig(**json.loads(payload.decode("utf-8")))
            elif kind == 1:
                ndim, = struct.unpack("<I", _read_exact(fh, 4))
                dims = struct.unpack("<" + "Q" * ndim,
                                     _read_exact(fh, 8 * ndim))
                plen, = struct.unpack("<Q", _read_exact(fh, 8))
                arrays[name] = np.frombuffer(
                    _read_exact(fh, plen), dtype="<f8").reshape(dims).copy()
            else:
                raise CheckpointError(f"unknown section kind {kind}")
    if cfg is None:
        raise CheckpointError("checkpoint has no decoder config section")

    cloud = NeuralPointCloud(cfg=radius_cfg)
    if n:
        cloud._insert_raw(record[:, :3].copy())
        cloud.f_geo.append_rows(record[:, 3:3 + geo_dim].copy())
        cloud.f_col.append_rows(record[:, 3 + geo_dim:].copy())

    decoders = DecoderBundle(cfg, rng=np.random.default_rng(0))
    named = dict(decoders.named_parameters())
    for name, arr in arrays.items():
        if name.startswith("latent."):
            frame_id = int(name.split(".", 1)[1])
            decoders.latents[frame_id] = Parameter(arr, name=name)
            continue
        if name not in named:
            raise CheckpointError(f"checkpoint section {name!r} does not "
                                  f"match any decoder parameter")
        if named[name].value.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape} vs "
                f"model {named[name].value.shape}")
        named[name].value = arr
    return cloud, decoders
