"""Bit-exact file formats: tensor files, manifests, run configs, checkpoints.

Tensor file layout (little-endian throughout):

    bytes 0..3   magic "SPC1"
    byte  4      dtype code (0 = float32, 1 = float64, 2 = uint16 labels)
    byte  5      ndim
    then         ndim x uint32 dims
    then         row-major payload

All writes go through a temp file plus rename so readers never see a partial
file.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError

MAGIC = b"SPC1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u2")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint16): 2}
MAX_NDIM = 8


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def tensor_bytes(array: np.ndarray) -> bytes:
    code = _CODES.get(np.dtype(array.dtype))
    if code is None:
        raise ConfigError(f"unsupported tensor dtype {array.dtype}; "
                          "use float32, float64 or uint16")
    if array.ndim < 1 or array.ndim > MAX_NDIM:
        raise ConfigError(f"tensor rank must be 1..{MAX_NDIM}, got {array.ndim}")
    header = MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array).astype(_DTYPES[code], copy=False).tobytes()
    return header + payload


def write_tensor(path, array: np.ndarray):
    _atomic_write(Path(path), tensor_bytes(array))


def parse_tensor(buf: bytes, base_offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor from `buf`; returns (array, bytes consumed)."""
    if len(buf) < 6:
        raise ParseError("truncated tensor header", base_offset + len(buf))
    if buf[:4] != MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}", base_offset)
    code, ndim = buf[4], buf[5]
    if code not in _DTYPES:
        raise ParseError(f"unknown dtype code {code}", base_offset + 4)
    if not 1 <= ndim <= MAX_NDIM:
        raise ParseError(f"invalid rank {ndim}", base_offset + 5)
    dims_end = 6 + 4 * ndim
    if len(buf) < dims_end:
        raise ParseError("truncated dimension list", base_offset + len(buf))
    dims = struct.unpack(f"<{ndim}I", buf[6:dims_end])
    dtype = _DTYPES[code]
    expect = int(np.prod(dims)) * dtype.itemsize
    if len(buf) < dims_end + expect:
        raise ParseError(
            f"payload needs {expect} bytes, found {len(buf) - dims_end}",
            base_offset + dims_end)
    data = np.frombuffer(buf[dims_end : dims_end + expect], dtype=dtype).reshape(dims)
    return data.copy(), dims_end + expect


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, used = parse_tensor(buf)
    if used != len(buf):
        raise ParseError(f"{len(buf) - used} trailing bytes after payload", used)
    return array


@dataclass
class Manifest:
    num_classes: int
    num_objects: int
    entries: list  # (image path, score path, class index), resolved absolute
    root: Path

    def __len__(self):
        return len(self.entries)


def write_manifest(path, num_classes: int, num_objects: int, entries):
    lines = [f"spaco-manifest v1 classes={num_classes} objects={num_objects}"]
    for image, scores, label in entries:
        lines.append(f"{image}\t{scores}\t{label}")
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_manifest(path) -> Manifest:
    path = Path(path)
    text = path.read_bytes()
    lines = text.decode().splitlines()
    if not lines:
        raise ParseError("empty manifest", 0)
    head = lines[0].split()
    if (len(head) != 4 or head[0] != "spaco-manifest" or head[1] != "v1"
            or not head[2].startswith("classes=") or not head[3].startswith("objects=")):
        raise ParseError(f"bad manifest header '{lines[0]}'", 0)
    try:
        num_classes = int(head[2].split("=", 1)[1])
        num_objects = int(head[3].split("=", 1)[1])
    except ValueError:
        raise ParseError(f"bad manifest header '{lines[0]}'", 0) from None
    entries = []
    offset = len(lines[0]) + 1
    for lineno, line in enumerate(lines[1:], start=2):
        if line:
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"line {lineno}: expected 3 tab-separated fields", offset)
            try:
                label = int(parts[2])
            except ValueError:
                raise ParseError(f"line {lineno}: bad class index '{parts[2]}'", offset) from None
            if not 0 <= label < num_classes:
                raise DataError(f"line {lineno}: class index {label} not below {num_classes}")
            image = path.parent / parts[0]
            scores = path.parent / parts[1]
            for ref in (image, scores):
                if not ref.exists():
                    raise DataError(f"line {lineno}: referenced file {ref} does not exist")
            entries.append((image, scores, label))
        offset += len(line) + 1
    return Manifest(num_classes, num_objects, entries, path.parent)


# Run configuration: flat "key = value" text with a closed key set.

_INT_KEYS = ("seed", "epochs_stage1", "epochs_stage2", "batch_size", "channels",
             "heads", "objects", "classes", "acf_kernel", "ssrm_factor", "ifem_factor")
_FLOAT_KEYS = ("eta_stage1", "eta_stage2", "dropout_stage1", "dropout_stage2")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    eta_stage1: float = 0.01
    eta_stage2: float = 0.1
    dropout_stage1: float = 0.3
    dropout_stage2: float = 0.8
    epochs_stage1: int = 10
    epochs_stage2: int = 40
    batch_size: int = 16
    channels: int = 64
    heads: int = 4
    objects: int = 8
    classes: int = 4
    acf_kernel: int = 2
    ssrm_factor: int = 16
    ifem_factor: int = 16

    def validate(self):
        if self.eta_stage1 <= 0 or self.eta_stage2 <= 0:
            raise ConfigError("config key 'eta_stage1'/'eta_stage2' must be positive")
        for key in ("dropout_stage1", "dropout_stage2"):
            rate = getattr(self, key)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"config key '{key}' must be in [0, 1), got {rate}")
        for key in ("epochs_stage1", "epochs_stage2"):
            if getattr(self, key) < 0:
                raise ConfigError(f"config key '{key}' must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("config key 'batch_size' must be at least 1")
        if self.channels % self.heads:
            raise ConfigError(
                f"config key 'heads' ({self.heads}) must divide 'channels' ({self.channels})")
        if self.acf_kernel not in (1, 2, 4):
            raise ConfigError(f"config key 'acf_kernel' must be 1, 2 or 4, got {self.acf_kernel}")
        if self.classes < 2:
            raise ConfigError("config key 'classes' must be at least 2")
        if self.objects < 2:
            raise ConfigError("config key 'objects' must be at least 2")
        for key in ("ssrm_factor", "ifem_factor"):
            f = getattr(self, key)
            if f < 4 or f & (f - 1):
                raise ConfigError(f"config key '{key}' must be a power of two >= 4, got {f}")

    def resolved_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:16]


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _INT_KEYS:
            try:
                updates[key] = int(value)
            except ValueError:
                raise ConfigError(f"config key '{key}' needs an integer, got '{value}'") from None
        elif key in _FLOAT_KEYS:
            try:
                updates[key] = float(value)
            except ValueError:
                raise ConfigError(f"config key '{key}' needs a number, got '{value}'") from None
        else:
            raise ConfigError(f"unknown config key '{key}'")
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text())


# Checkpoints: text header, blank line, then named tensor records.

HEADER_MAGIC = "spaco-checkpoint v1"


@dataclass
class Checkpoint:
    header: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)  # name -> float64 ndarray

    def config(self) -> RunConfig:
        known = set(_INT_KEYS) | set(_FLOAT_KEYS)
        text = "\n".join(f"{k} = {v}" for k, v in self.header.items() if k in known)
        return parse_run_config(text)


def save_checkpoint(path, ckpt: Checkpoint):
    head_lines = [HEADER_MAGIC]
    for key, value in ckpt.header.items():
        head_lines.append(f"{key} = {value}")
    head_lines.append(f"params = {len(ckpt.params)}")
    blob = ("\n".join(head_lines) + "\n\n").encode()
    parts = [blob]
    for name, value in ckpt.params.items():
        parts.append(name.encode() + b"\n")
        parts.append(tensor_bytes(np.asarray(value, dtype=np.float64)))
    _atomic_write(Path(path), b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0 or buf[:nl].decode(errors="replace") != HEADER_MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    header: dict = {}
    pos = nl + 1
    count = None
    while True:
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise ParseError("unterminated checkpoint header", pos)
        line = buf[pos:nl].decode(errors="replace")
        pos = nl + 1
        if line == "":
            break
        if "=" not in line:
            raise ParseError(f"bad header line '{line}'", pos - len(line) - 1)
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "params":
            count = int(value)
        else:
            header[key] = value
    if count is None:
        raise ParseError("missing params count in checkpoint header", pos)
    params = {}
    for _ in range(count):
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise ParseError("missing parameter name", pos)
        name = buf[pos:nl].decode(errors="replace")
        pos = nl + 1
        array, used = parse_tensor(buf[pos:], pos)
        params[name] = array
        pos += used
    if pos != len(buf):
        raise ParseError(f"{len(buf) - pos} trailing bytes in checkpoint", pos)
    return Checkpoint(header, params)
