"""Checkpoint serialization: the VITLULC1 tensor-archive format.

Layout (all integers little-endian):

    bytes 0..8    magic ``VITLULC1``
    bytes 8..16   uint64 header length in bytes
    header        UTF-8 JSON: {"version": 1,
                               "tensors": {name: {"dtype": "f4"|"f8",
                                                  "shape": [...],
                                                  "offset": int,
                                                  "nbytes": int}},
                               "meta": {...}}        (meta optional)
    data          packed little-endian C-order tensor bytes, at the stated
                  offsets relative to the start of the data section

Model parameters are stored under the `vit` naming scheme; optimizer
moments go under ``opt.m.<name>`` / ``opt.v.<name>`` with the step counter
as ``opt.t``.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .optim import AdamState
from .tensor import Tensor
from .vit import ViTConfig, ViTModel, interpolate_pos_embed, param_shapes

MAGIC = b"VITLULC1"
FORMAT_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}


@dataclass
class TensorArchive:
    """Decoded archive: name -> array, plus the format version and metadata."""

    version: int
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}


def save_archive(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors to `path` in VITLULC1 format."""
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype} (float32/float64 only)")
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {
            "dtype": _DTYPE_TAGS[arr.dtype],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header_doc: dict = {"version": FORMAT_VERSION, "tensors": entries}
    if meta:
        header_doc["meta"] = meta
    header = json.dumps(header_doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_archive(path: str | Path) -> TensorArchive:
    """Parse and integrity-check a VITLULC1 file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise DataError(f"{path} is not a VITLULC1 archive (bad magic)")
    header_len = int.from_bytes(raw[8:16], "little")
    if 16 + header_len > len(raw):
        raise DataError(f"{path}: declared header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot parse archive header: {exc}") from exc
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version!r}")
    data = raw[16 + header_len:]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.get("tensors", {}).items():
        tag, shape = entry["dtype"], tuple(entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if tag not in _DTYPES:
            raise DataError(f"{path}: tensor {name!r} has unknown dtype tag {tag!r}")
        dtype = _DTYPES[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise DataError(
                f"{path}: tensor {name!r} declares {nbytes} bytes but shape {shape} "
                f"({tag}) needs {expected}; archive is corrupt"
            )
        if offset < 0 or offset + nbytes > len(data):
            raise DataError(f"{path}: tensor {name!r} data range [{offset}, {offset + nbytes}) "
                            f"exceeds data section of {len(data)} bytes")
        tensors[name] = np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize,
                                      offset=offset).reshape(shape).copy()
    return TensorArchive(version=version, tensors=tensors, meta=header.get("meta", {}))


def save_checkpoint(model: ViTModel, path: str | Path,
                    optimizer_state: AdamState | None = None,
                    extra_meta: dict | None = None) -> None:
    """Save model parameters (and optionally optimizer moments) to `path`."""
    tensors: dict[str, np.ndarray] = {name: p.values for name, p in model.params.items()}
    if optimizer_state is not None:
        for name in model.params:
            tensors[f"opt.m.{name}"] = optimizer_state.m[name]
            tensors[f"opt.v.{name}"] = optimizer_state.v[name]
        tensors["opt.t"] = np.array([float(optimizer_state.t)], dtype=np.float64)
    meta = {"config": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    save_archive(path, tensors, meta=meta)


@dataclass
class ImportReport:
    """What a (non-strict) checkpoint import did to each tensor."""

    imported: list[str] = field(default_factory=list)
    replaced: list[str] = field(default_factory=list)      # freshly initialized (head)
    interpolated: list[str] = field(default_factory=list)  # position table resample

    def summary(self) -> str:
        lines = [f"imported {len(self.imported)} tensors"]
        for name in self.interpolated:
            lines.append(f"interpolated {name}")
        for name in self.replaced:
            lines.append(f"replaced {name} (fresh init)")
        return "\n".join(lines)


def import_archive(archive: TensorArchive, config: ViTConfig, strict: bool = True) -> tuple[ViTModel, ImportReport]:
    """Build a model from `config` and fill it from `archive`.

    Strict mode requires an exact name/shape match in both directions.
    Non-strict mode tolerates exactly two deviations, matching the
    fine-tuning workflow: `head.*` may be absent or differently shaped
    (a fresh zero head is installed), and `pos_embed` may have a different
    row count (bilinear grid interpolation; embedding width must agree).
    """
    expected = param_shapes(config)
    available = archive.model_tensors()
    report = ImportReport()

    if strict:
        missing = sorted(set(expected) - set(available))
        unknown = sorted(set(available) - set(expected))
        if missing or unknown:
            raise ConfigError(
                f"strict load failed: missing {missing or 'none'}, unexpected {unknown or 'none'}"
            )
        for name, shape in expected.items():
            if tuple(available[name].shape) != shape:
                raise ConfigError(
                    f"strict load failed: tensor {name!r} has shape "
                    f"{tuple(available[name].shape)}, expected {shape}"
                )

    params: dict[str, Tensor] = {}
    dtype = None
    for arr in available.values():
        dtype = arr.dtype
        break
    dtype = dtype or np.float32

    for name, shape in expected.items():
        arr = available.get(name)
        if arr is not None and tuple(arr.shape) == shape:
            params[name] = Tensor(arr.astype(dtype, copy=True), requires_grad=True)
            report.imported.append(name)
            continue
        if strict:
            raise ConfigError(f"strict load failed: tensor {name!r} missing or mismatched")
        if name.startswith("head."):
            params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
            report.replaced.append(name)
            continue
        if name == "pos_embed" and arr is not None and arr.shape[1] == shape[1]:
            rows = arr.shape[0]
            old_grid = int(round((rows - 1) ** 0.5))
            if old_grid * old_grid + 1 != rows:
                raise ConfigError(f"cannot interpolate pos_embed with {rows} rows (not a square grid + 1)")
            resampled = interpolate_pos_embed(arr, old_grid, config.grid_size)
            params[name] = Tensor(resampled.astype(dtype, copy=False), requires_grad=True)
            report.interpolated.append(name)
            continue
        have = tuple(arr.shape) if arr is not None else "absent"
        raise ConfigError(f"cannot import tensor {name!r}: archive has {have}, model needs {shape}")

    return ViTModel(config=config, params=params), report


def load_checkpoint(path: str | Path, config: ViTConfig, strict: bool = True) -> ViTModel:
    """Read an archive and realize it as a model under `config`."""
    model, _ = import_archive(read_archive(path), config, strict=strict)
    return model


def checkpoint_config(path: str | Path) -> ViTConfig | None:
    """The config echoed into an archive's metadata, when present."""
    meta = read_archive(path).meta
    if "config" in meta:
        return ViTConfig(**meta["config"])
    return None
