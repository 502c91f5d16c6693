"""Classifier architectures with a width factor, and checkpoint persistence.

Two architectures span the capacity axis:

  mlp      flatten -> dense(128*x) -> relu -> dense(C)
  convnet  conv(8*x, 3x3, pad 1) -> relu -> pool2
           -> conv(16*x, 3x3, pad 1) -> relu -> pool2 -> flatten -> dense(C)

Parameter shapes are fully determined by (arch_id, width_factor, input
shape, class count); weights use Kaiming-uniform init from the given seed,
biases start at zero.

Checkpoint file layout (little-endian):
  magic "SAATCKPT" (8 bytes) | u32 version=1 | u64 header length |
  UTF-8 JSON header (arch/width/precision/epoch/rng state + blob manifest
  of name, shape, dtype, byte offset) | raw blobs in manifest order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .rng import stream

MAGIC = b"SAATCKPT"
VERSION = 1
ARCH_IDS = ("mlp", "convnet")


class ModelError(Exception):
    """Bad architecture request."""


class CheckpointError(Exception):
    """Malformed or mismatched checkpoint file."""


@dataclass
class Network:
    arch_id: str
    width_factor: int
    input_shape: tuple[int, int, int]  # (C, H, W)
    class_count: int
    precision: str
    params: dict[str, Tensor]

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        if self.arch_id == "mlp":
            h = engine.flatten(x)
            h = engine.add_bias(engine.matmul(h, p["fc1.w"]), p["fc1.b"])
            h = engine.relu(h)
            return engine.add_bias(engine.matmul(h, p["fc2.w"]), p["fc2.b"])
        h = engine.conv2d(x, p["conv1.w"], padding=1)
        h = engine.max_pool2(engine.relu(engine.add_bias(h, p["conv1.b"])))
        h = engine.conv2d(h, p["conv2.w"], padding=1)
        h = engine.max_pool2(engine.relu(engine.add_bias(h, p["conv2.b"])))
        h = engine.flatten(h)
        return engine.add_bias(engine.matmul(h, p["fc.w"]), p["fc.b"])

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Forward pass outside any recording graph."""
        return self.forward(engine.tensor(x.astype(self.dtype, copy=False))).data

    @property
    def dtype(self):
        return engine.PRECISIONS[self.precision]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def set_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise CheckpointError(
                    f"parameter shape mismatch for {name}: checkpoint has "
                    f"{arrays[name].shape}, network expects {p.shape}"
                )
            p.data = arrays[name].astype(p.data.dtype, copy=True)


def _param_shapes(arch_id: str, width_factor: int, input_shape, class_count: int):
    c, h, w = input_shape
    if arch_id == "mlp":
        hidden = 128 * width_factor
        return {
            "fc1.w": (c * h * w, hidden),
            "fc1.b": (hidden,),
            "fc2.w": (hidden, class_count),
            "fc2.b": (class_count,),
        }
    if h % 4 or w % 4:
        raise ModelError(f"convnet needs spatial dims divisible by 4, got {input_shape}")
    c1, c2 = 8 * width_factor, 16 * width_factor
    return {
        "conv1.w": (c1, c, 3, 3),
        "conv1.b": (c1,),
        "conv2.w": (c2, c1, 3, 3),
        "conv2.b": (c2,),
        "fc.w": (c2 * (h // 4) * (w // 4), class_count),
        "fc.b": (class_count,),
    }


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".w"):
        if len(shape) == 4:  # conv kernels: C_in * k * k
            return shape[1] * shape[2] * shape[3]
        return shape[0]
    return 0


def build(arch_id: str, width_factor: int, input_shape, class_count: int, seed: int,
          precision: str = "single") -> Network:
    """Construct a network with Kaiming-uniform weights from the given seed."""
    if arch_id not in ARCH_IDS:
        raise ModelError(f"unsupported arch_id {arch_id!r}; expected one of {ARCH_IDS}")
    if width_factor < 1:
        raise ModelError(f"width_factor must be >= 1, got {width_factor}")
    if class_count < 2:
        raise ModelError(f"class_count must be >= 2, got {class_count}")
    if precision not in engine.PRECISIONS:
        raise ModelError(f"unknown precision {precision!r}")
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3:
        raise ModelError(f"input_shape must be (C, H, W), got {input_shape}")

    dtype = engine.PRECISIONS[precision]
    params: dict[str, Tensor] = {}
    for i, (name, shape) in enumerate(_param_shapes(arch_id, width_factor, input_shape, class_count).items()):
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / _fan_in(name, shape))
            arr = stream(seed, "init", i).uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return Network(arch_id, width_factor, input_shape, class_count, precision, params)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def to_network(self) -> Network:
        hdr = self.header
        net = build(hdr["arch_id"], hdr["width_factor"], tuple(hdr["input_shape"]),
                    hdr["class_count"], seed=0, precision=hdr["precision"])
        net.set_param_arrays({n: self.arrays[n] for n in net.params})
        return net


def save_checkpoint(net: Network, path, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the network (and optional extra blobs) with a bit-exact layout."""
    dtype = np.dtype(net.dtype).newbyteorder("<")
    blobs: list[tuple[str, np.ndarray]] = []
    for name, p in net.params.items():
        blobs.append((name, np.ascontiguousarray(p.data, dtype=dtype)))
    for name, arr in (extra or {}).items():
        blobs.append((name, np.ascontiguousarray(arr, dtype=dtype)))

    manifest = []
    offset = 0
    for name, arr in blobs:
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": arr.dtype.str, "offset": offset})
        offset += arr.nbytes
    header = {
        "arch_id": net.arch_id,
        "width_factor": net.width_factor,
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "precision": net.precision,
        "manifest": manifest,
    }
    header.update(meta or {})
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for _, arr in blobs:
            fh.write(arr.tobytes())


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file into its header and named arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated checkpoint (no header)")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC) + 4)
    hstart = len(MAGIC) + 12
    if len(raw) < hstart + hlen:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[hstart : hstart + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from exc

    blob_start = hstart + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("manifest", []):
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        begin = blob_start + entry["offset"]
        end = begin + count * dt.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated blob for parameter {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw[begin:end], dtype=dt).reshape(shape).copy()
    return Checkpoint(header, arrays)


def load_checkpoint(path, *, arch_id: str | None = None,
                    width_factor: int | None = None) -> Network:
    """Rebuild the saved network; optional expectations reject mismatches."""
    ckpt = read_checkpoint(path)
    hdr = ckpt.header
    if arch_id is not None and hdr["arch_id"] != arch_id:
        raise CheckpointError(
            f"{path}: checkpoint holds arch {hdr['arch_id']!r}, expected {arch_id!r}")
    if width_factor is not None and hdr["width_factor"] != width_factor:
        raise CheckpointError(
            f"{path}: parameter shape mismatch: checkpoint width_factor "
            f"{hdr['width_factor']} differs from requested {width_factor}")
    missing = [n for n in _param_shapes(hdr["arch_id"], hdr["width_factor"],
                                        tuple(hdr["input_shape"]), hdr["class_count"])
               if n not in ckpt.arrays]
    if missing:
        raise CheckpointError(f"{path}: checkpoint is missing parameters {missing}")
    return ckpt.to_network()
