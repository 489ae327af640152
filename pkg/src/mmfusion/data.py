"""Sample serialization, dataset manifests, splits, batching, checkpoints.

On-disk layout is a plain directory: one little-endian binary blob per
sample plus a UTF-8 JSON manifest listing records and split assignments.
Checkpoints are single binary files (magic ``MMAF``) carrying a JSON
header (config echo, optimizer scalars, schedule state, counters) and raw
named array records; loads are bitwise round-trips.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import AdamState, BatchNormState, PlateauSchedule, RngStream, Tensor
from .model import ModelConfig, ModelParams
from .preprocess import (
    RADAR_CHANNELS,
    RADAR_SAMPLES,
    DepthFrame,
    RadarTrace,
    preprocess_depth,
    preprocess_radar,
)

SAMPLE_MAGIC = b"MMSP"
SAMPLE_VERSION = 1
CHECKPOINT_MAGIC = b"MMAF"
CHECKPOINT_VERSION = 1

REGIMES = ("1P", "2P1", "2P2")

_HEADER = struct.Struct("<4sHBBHH")  # magic, version, label, regime, H, W
_RADAR_BYTES = RADAR_SAMPLES * RADAR_CHANNELS * 4


class DataError(Exception):
    """Malformed file, manifest inconsistency, or invariant violation."""


@dataclass(frozen=True)
class Sample:
    """One {radar, depth, mask} training triplet with frame-level labels."""

    radar: RadarTrace
    depth: DepthFrame
    mask: np.ndarray
    label: int
    regime: str = "1P"

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.uint8)
        object.__setattr__(self, "mask", mask)
        if mask.shape != self.depth.values.shape:
            raise DataError(
                f"mask shape {mask.shape} does not match depth {self.depth.values.shape}"
            )
        if not np.isin(mask, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if self.regime not in REGIMES:
            raise DataError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.label == 0 and mask.any():
            raise DataError("negative frames must carry all-zero masks")


def write_sample(sample: Sample, path) -> None:
    h, w = sample.depth.values.shape
    header = _HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, sample.label,
                          REGIMES.index(sample.regime), h, w)
    payload = (
        header
        + np.ascontiguousarray(sample.radar.samples, dtype="<f4").tobytes()
        + np.ascontiguousarray(sample.depth.values, dtype="<f4").tobytes()
        + sample.mask.tobytes()
    )
    _atomic_write(path, payload)


def read_sample(path) -> Sample:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, label, regime_code, h, w = _HEADER.unpack_from(raw)
    if magic != SAMPLE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != SAMPLE_VERSION:
        raise DataError(f"{path}: unknown sample version {version}")
    if regime_code >= len(REGIMES):
        raise DataError(f"{path}: unknown regime code {regime_code}")
    want = sample_nbytes(h, w)
    if len(raw) != want:
        raise DataError(f"{path}: expected {want} bytes for {h}x{w}, found {len(raw)}")
    off = _HEADER.size
    radar = np.frombuffer(raw, "<f4", RADAR_SAMPLES * RADAR_CHANNELS, off).reshape(
        1, RADAR_SAMPLES, RADAR_CHANNELS
    )
    off += _RADAR_BYTES
    depth = np.frombuffer(raw, "<f4", h * w, off).reshape(h, w)
    off += h * w * 4
    mask = np.frombuffer(raw, np.uint8, h * w, off).reshape(h, w)
    try:
        return Sample(RadarTrace(radar.copy()), DepthFrame(depth.copy()), mask.copy(),
                      int(label), REGIMES[regime_code])
    except DataError as e:
        raise DataError(f"{path}: {e}") from None


def sample_nbytes(h, w):
    return _HEADER.size + _RADAR_BYTES + h * w * 4 + h * w


@dataclass
class SampleRecord:
    id: str
    path: str
    label: int
    regime: str


@dataclass
class Manifest:
    """Dataset index: ordered records plus named split assignments."""

    resolution: tuple
    samples: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    split_seed: int | None = None
    channel_note: str = "radar channels: I/Q pairs from two receive antennas"
    version: int = 1

    def record(self, sample_id):
        for rec in self.samples:
            if rec.id == sample_id:
                return rec
        raise DataError(f"manifest has no sample {sample_id!r}")

    def by_split(self, name):
        if name not in self.splits:
            raise DataError(f"manifest has no split {name!r}; have {sorted(self.splits)}")
        return list(self.splits[name])


def write_manifest(manifest: Manifest, path) -> None:
    doc = {
        "format_version": manifest.version,
        "resolution": list(manifest.resolution),
        "channel_note": manifest.channel_note,
        "samples": [dataclasses.asdict(r) for r in manifest.samples],
        "splits": {k: list(v) for k, v in manifest.splits.items()},
        "split_seed": manifest.split_seed,
    }
    _atomic_write(path, (json.dumps(doc, indent=1) + "\n").encode())


def read_manifest(path) -> Manifest:
    try:
        with open(path, "rb") as fh:
            doc = json.loads(fh.read().decode())
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: unreadable manifest: {e}") from None
    if doc.get("format_version") != 1:
        raise DataError(f"{path}: unknown manifest version {doc.get('format_version')!r}")
    try:
        records = [SampleRecord(**r) for r in doc["samples"]]
        manifest = Manifest(
            resolution=tuple(doc["resolution"]),
            samples=records,
            splits={k: list(v) for k, v in doc.get("splits", {}).items()},
            split_seed=doc.get("split_seed"),
            channel_note=doc.get("channel_note", ""),
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed manifest: {e}") from None
    ids = [r.id for r in manifest.samples]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate sample ids")
    known = set(ids)
    for name, members in manifest.splits.items():
        stray = set(members) - known
        if stray:
            raise DataError(f"{path}: split {name!r} references unknown ids {sorted(stray)[:3]}")
    for rec in manifest.samples:
        if rec.label not in (0, 1) or rec.regime not in REGIMES:
            raise DataError(f"{path}: record {rec.id!r} has bad label/regime")
    return manifest


def validate_files(manifest: Manifest, root) -> None:
    """Check that every referenced blob exists with the implied byte length."""
    h, w = manifest.resolution
    want = sample_nbytes(h, w)
    for rec in manifest.samples:
        full = os.path.join(root, rec.path)
        try:
            size = os.path.getsize(full)
        except OSError:
            raise DataError(f"{rec.id}: missing file {full}") from None
        if size != want:
            raise DataError(f"{rec.id}: {full} holds {size} bytes, expected {want}")


def split(manifest: Manifest, fractions, seed) -> Manifest:
    """Assign train/val/test splits, stratified by (label, regime).

    ``fractions`` is a (train, val, test) triple summing to 1. Assignment
    is deterministic in ``seed`` and partitions the dataset exactly.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise DataError(f"fractions must be a non-negative triple summing to 1, got {fr}")
    groups = {}
    for rec in manifest.samples:
        groups.setdefault((rec.label, rec.regime), []).append(rec.id)
    rng = RngStream(seed)
    names = ("train", "val", "test")
    splits = {name: [] for name in names}
    for key in sorted(groups):
        ids = groups[key]
        order = rng.split(f"split/{key[0]}/{key[1]}").permutation(len(ids))
        cuts = [round(sum(fr[: i + 1]) * len(ids)) for i in range(3)]
        start = 0
        for name, stop in zip(names, cuts):
            splits[name].extend(ids[i] for i in order[start:stop])
            start = stop
    return dataclasses.replace(manifest, splits=splits, split_seed=int(seed))


@dataclass
class Batch:
    ids: list
    radar: np.ndarray  # (B, 1, 256, 4) float32, normalized
    depth: np.ndarray  # (B, H, W, 1) float32, standardized
    mask: np.ndarray  # (B, H, W, 1) float32 in {0, 1}
    labels: np.ndarray  # (B,) uint8


def load_batch(manifest: Manifest, root, ids) -> Batch:
    radars, depths, masks, labels = [], [], [], []
    for sample_id in ids:
        rec = manifest.record(sample_id)
        s = read_sample(os.path.join(root, rec.path))
        radars.append(preprocess_radar(s.radar).samples)
        depths.append(preprocess_depth(s.depth).values[:, :, None])
        masks.append(s.mask.astype(np.float32)[:, :, None])
        labels.append(s.label)
    return Batch(
        ids=list(ids),
        radar=np.stack(radars),
        depth=np.stack(depths),
        mask=np.stack(masks),
        labels=np.asarray(labels, dtype=np.uint8),
    )


def iter_batches(manifest: Manifest, root, split_name="train", batch_size=64,
                 shuffle_rng=None):
    """Yield preprocessed batches; a final short batch is kept.

    ``shuffle_rng`` (an RngStream) fixes the epoch's order; None keeps
    manifest order.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be positive, got {batch_size}")
    ids = manifest.by_split(split_name)
    if shuffle_rng is not None:
        ids = [ids[i] for i in shuffle_rng.permutation(len(ids))]
    for start in range(0, len(ids), batch_size):
        yield load_batch(manifest, root, ids[start : start + batch_size])


def _atomic_write(path, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


_DTYPE_TAGS = {0: "<f4", 1: "<f8"}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _pack_array(name, arr):
    arr = np.ascontiguousarray(arr)
    tag = _TAG_FOR.get(arr.dtype)
    if tag is None:
        raise DataError(f"checkpoint array {name!r} has unsupported dtype {arr.dtype}")
    blob = arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes()
    name_b = name.encode()
    head = struct.pack("<HBB", len(name_b), tag, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + name_b + dims + blob


def _unpack_arrays(raw, offset, count, path):
    out = {}
    for _ in range(count):
        if offset + 4 > len(raw):
            raise DataError(f"{path}: truncated checkpoint record header")
        name_len, tag, rank = struct.unpack_from("<HBB", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode()
        offset += name_len
        if tag not in _DTYPE_TAGS:
            raise DataError(f"{path}: record {name!r} has unknown dtype tag {tag}")
        dims = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
        offset += 4 * rank
        dtype = np.dtype(_DTYPE_TAGS[tag])
        n_elems = int(np.prod(dims, dtype=np.int64))
        nbytes = n_elems * dtype.itemsize
        if offset + nbytes > len(raw):
            raise DataError(f"{path}: record {name!r} payload truncated")
        out[name] = np.frombuffer(raw, dtype, n_elems, offset).reshape(dims).copy()
        offset += nbytes
    return out, offset


@dataclass
class Checkpoint:
    """Deserialized training state; see ``restore_model`` for rebuilding."""

    config: ModelConfig
    params: dict
    bn_mean: dict
    bn_var: dict
    adam: AdamState | None
    plateau: PlateauSchedule | None
    meta: dict


def save_checkpoint(path, model: ModelParams, adam: AdamState | None = None,
                    plateau: PlateauSchedule | None = None, meta: dict | None = None) -> None:
    header = {
        "config": dataclasses.asdict(model.config),
        "meta": meta or {},
    }
    if adam is not None:
        header["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                          "eps": adam.eps, "t": adam.t}
    if plateau is not None:
        header["plateau"] = plateau.state_dict()

    records = []
    for name, t in model.params.items():
        records.append(_pack_array(f"param/{name}", t.data))
    for name, state in model.bn.items():
        records.append(_pack_array(f"bn/{name}/mean", state.mean))
        records.append(_pack_array(f"bn/{name}/var", state.var))
    if adam is not None:
        for name, m in adam.m.items():
            records.append(_pack_array(f"adam.m/{name}", m))
        for name, v in adam.v.items():
            records.append(_pack_array(f"adam.v/{name}", v))

    header_b = json.dumps(header).encode()
    payload = (
        CHECKPOINT_MAGIC
        + struct.pack("<HII", CHECKPOINT_VERSION, len(header_b), len(records))
        + header_b
        + b"".join(records)
    )
    _atomic_write(path, payload)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError(f"{path}: cannot read checkpoint: {e}") from None
    if len(raw) < 14 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, header_len, n_records = struct.unpack_from("<HII", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unknown checkpoint version {version}")
    off = 14
    try:
        header = json.loads(raw[off : off + header_len].decode())
    except ValueError as e:
        raise DataError(f"{path}: corrupt checkpoint header: {e}") from None
    off += header_len
    arrays, off = _unpack_arrays(raw, off, n_records, path)
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes after records")

    cfg_doc = dict(header["config"])
    cfg_doc["depth_resolution"] = tuple(cfg_doc["depth_resolution"])
    cfg_doc["tof_kernel"] = tuple(cfg_doc["tof_kernel"])
    config = ModelConfig(**cfg_doc)

    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    bn_mean = {k[len("bn/"):-len("/mean")]: v for k, v in arrays.items()
               if k.startswith("bn/") and k.endswith("/mean")}
    bn_var = {k[len("bn/"):-len("/var")]: v for k, v in arrays.items()
              if k.startswith("bn/") and k.endswith("/var")}

    adam = None
    if "adam" in header:
        doc = header["adam"]
        adam = AdamState(lr=doc["lr"], beta1=doc["beta1"], beta2=doc["beta2"], eps=doc["eps"])
        adam.t = int(doc["t"])
        adam.m = {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")}
        adam.v = {k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")}

    plateau = PlateauSchedule.from_state(header["plateau"]) if "plateau" in header else None
    return Checkpoint(config=config, params=params, bn_mean=bn_mean, bn_var=bn_var,
                      adam=adam, plateau=plateau, meta=header.get("meta", {}))


def restore_model(ckpt: Checkpoint, expected_config: ModelConfig | None = None) -> ModelParams:
    """Rebuild ModelParams from a checkpoint, validating the config echo."""
    if expected_config is not None and ckpt.config != expected_config:
        raise DataError(
            f"checkpoint config {ckpt.config} does not match expected {expected_config}"
        )
    want = ckpt.config.param_shapes()
    if set(want) != set(ckpt.params):
        missing = sorted(set(want) ^ set(ckpt.params))[:3]
        raise DataError(f"checkpoint parameter set mismatch near {missing}")
    model = ModelParams(config=ckpt.config)
    for name, shape in want.items():
        arr = ckpt.params[name]
        if arr.shape != shape:
            raise DataError(f"checkpoint param {name!r} has shape {arr.shape}, want {shape}")
        model.params[name] = Tensor(arr, requires_grad=True)
    for name, ch in ckpt.config.bn_layers().items():
        if name not in ckpt.bn_mean or name not in ckpt.bn_var:
            raise DataError(f"checkpoint missing batch-norm state for {name!r}")
        state = BatchNormState(ch, dtype=ckpt.bn_mean[name].dtype)
        state.mean = ckpt.bn_mean[name]
        state.var = ckpt.bn_var[name]
        model.bn[name] = state
    return model


def import_external(source_dir, dest_dir):
    """Adapter for the published capture release (layout unknown here).

    The public release's container format is not documented in the
    sources available to this build; converting it requires writing a
    reader against the actual files. Implementors should emit one
    ``write_sample`` blob per frame plus a manifest via ``write_manifest``.
    """
    raise NotImplementedError(
        "external dataset import needs an adapter for the release's actual "
        "layout; see import_external.__doc__ for the target format"
    )
