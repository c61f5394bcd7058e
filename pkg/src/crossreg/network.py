"""Deeply supervised valid-convolution 3D U-Net and its five task variants.

Each path is a sequence of 14 macro-layers::

    1 conv  2 conv  3 down  4 conv  5 conv  6 down  7 conv  8 conv
    9 up   10 conv 11 conv 12 up   13 conv 14 conv

Convolutions are 3x3x3 valid, down layers 2x2x2 stride 2, every conv is
followed by batch norm and LeakyReLU.  Up layers are nearest-neighbor x2;
the following conv sees ``concat(upsampled, center_crop(skip))``.  Linear
1x1x1 heads read layer 8 (low), 11 (mid) and 14 (high resolution).

For an ``n``-voxel cubic input the heads emit ``n-40``, ``n/2-18`` and
``n/4-7`` voxels per axis.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import cross_stitch as cs
from .autodiff import BatchNormState, Tensor, ops
from .errors import ConfigError, DimensionError, FormatError, ShapeError
from .warping import RESOLUTIONS

VARIANTS = ("Segmentation", "Registration", "JRSRegistration", "FullyHardSharing", "CrossStitch")

CONV_LAYERS = (1, 2, 4, 5, 7, 8, 10, 11, 13, 14)
DOWN_LAYERS = (3, 6)
UP_LAYERS = (9, 12)
HEAD_LAYERS = {8: "low", 11: "mid", 14: "high"}
SKIP_AFTER = {2: 13, 5: 10}  # layer whose output feeds the concat of another layer


@dataclass
class NetworkSpec:
    variant: str
    filters: tuple = (16, 32, 64, 32, 16)
    input_patch: int = 96
    num_structures: int = 5
    crossstitch_layers: tuple = (3, 6, 9, 12)
    seg_path_full_input: bool = False
    leaky_slope: float = 0.2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.crossstitch_layers = tuple(int(l) for l in self.crossstitch_layers)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.filters) != 5 or min(self.filters) < 1:
            raise ConfigError(f"filters must be five positive ints, got {self.filters}")
        n = self.input_patch
        if n < 44 or n % 4:
            raise ConfigError(f"input patch {n} must be >= 44 and divisible by 4")
        if self.num_structures < 2:
            raise ConfigError("need background plus at least one structure")
        if any(l < 1 or l > 14 for l in self.crossstitch_layers):
            raise ConfigError(f"cross-stitch layers must lie in 1..14, got {self.crossstitch_layers}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["crossstitch_layers"] = list(self.crossstitch_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)

    @property
    def has_seg(self) -> bool:
        return self.variant in ("Segmentation", "FullyHardSharing", "CrossStitch")

    @property
    def has_dvf(self) -> bool:
        return self.variant != "Segmentation"

    @property
    def dual_output(self) -> bool:
        return self.variant in ("FullyHardSharing", "CrossStitch")


def layer_channels(filters) -> dict:
    """Output channel count after each macro-layer."""
    f1, f2, f3, f4, f5 = filters
    return {1: f1, 2: f1, 3: f1, 4: f2, 5: f2, 6: f2, 7: f3, 8: f3, 9: f3,
            10: f4, 11: f4, 12: f4, 13: f5, 14: f5}


def layer_input_channels(filters, in_channels: int) -> dict:
    ch = layer_channels(filters)
    cin = {1: in_channels}
    for l in range(2, 15):
        cin[l] = ch[l - 1]
    cin[10] += ch[5]
    cin[13] += ch[2]
    return cin


@dataclass
class MultiResOutputs:
    """Head outputs per resolution: ``heads[res] = {"seg": Tensor|None, "dvf": Tensor|None}``.

    ``seg`` holds class logits ``(N, C, ...)`` and ``dvf`` displacements
    ``(N, 3, ...)`` in voxels; a variant without a head leaves it None.
    """
    heads: dict = field(default_factory=dict)

    def __getitem__(self, res):
        return self.heads[res]

    def seg(self, res="high") -> Optional[Tensor]:
        return self.heads[res].get("seg")

    def dvf(self, res="high") -> Optional[Tensor]:
        return self.heads[res].get("dvf")


class Path:
    """One U-Net trunk: parameter names and the per-layer forward step."""

    def __init__(self, prefix: str, in_channels: int, filters, head_kinds: tuple):
        self.prefix = prefix
        self.in_channels = in_channels
        self.filters = tuple(filters)
        self.head_kinds = head_kinds  # subset of ("seg", "dvf")
        self.channels = layer_channels(filters)
        self.cin = layer_input_channels(filters, in_channels)

    def param_shapes(self, num_structures: int):
        """Yield (name, shape, kind) in a fixed creation order."""
        for l in range(1, 15):
            if l in UP_LAYERS:
                continue
            k = 2 if l in DOWN_LAYERS else 3
            co, ci = self.channels[l], self.cin[l]
            yield f"{self.prefix}.l{l}.weight", (co, ci, k, k, k), "kernel"
            yield f"{self.prefix}.l{l}.bias", (co,), "bias"
            yield f"{self.prefix}.l{l}.gamma", (co,), "gamma"
            yield f"{self.prefix}.l{l}.beta", (co,), "beta"
        outs = {"seg": num_structures, "dvf": 3}
        for layer, res in HEAD_LAYERS.items():
            for kind in self.head_kinds:
                c = self.channels[layer]
                yield f"{self.prefix}.head_{kind}_{res}.weight", (outs[kind], c, 1, 1, 1), "kernel"
                yield f"{self.prefix}.head_{kind}_{res}.bias", (outs[kind],), "bias"

    def bn_layers(self):
        return [f"{self.prefix}.l{l}" for l in range(1, 15) if l not in UP_LAYERS]

    def step(self, net: "Network", layer: int, h: Tensor, skips: dict, training: bool) -> Tensor:
        p = net.params
        name = f"{self.prefix}.l{layer}"
        if layer in UP_LAYERS:
            return ops.upsample_nearest(h, 2)
        if layer in SKIP_AFTER.values():
            skip = skips[layer]
            h = ops.concat([h, ops.center_crop(skip, h.shape[2:])], axis=1)
        stride = 2 if layer in DOWN_LAYERS else 1
        h = ops.conv3d(h, p[name + ".weight"], p[name + ".bias"], stride=stride)
        h = ops.batch_norm(h, p[name + ".gamma"], p[name + ".beta"], net.bn_state[name], training)
        h = ops.leaky_relu(h, net.spec.leaky_slope)
        if layer in SKIP_AFTER:
            skips[SKIP_AFTER[layer]] = h
        return h

    def heads(self, net: "Network", layer: int, h: Tensor) -> dict:
        res = HEAD_LAYERS[layer]
        out = {}
        for kind in self.head_kinds:
            nm = f"{self.prefix}.head_{kind}_{res}"
            out[kind] = ops.conv3d(h, net.params[nm + ".weight"], net.params[nm + ".bias"])
        return out


def _plan(spec: NetworkSpec):
    """Paths for a variant as (role, Path) pairs."""
    C = spec.num_structures
    full = 2 + C
    v = spec.variant
    if v == "Segmentation":
        return [("seg", Path("seg", 1, spec.filters, ("seg",)))]
    if v == "Registration":
        return [("reg", Path("reg", 2, spec.filters, ("dvf",)))]
    if v == "JRSRegistration":
        return [("reg", Path("reg", full, spec.filters, ("dvf",)))]
    if v == "FullyHardSharing":
        return [("shared", Path("shared", full, spec.filters, ("seg", "dvf")))]
    seg_in = full if spec.seg_path_full_input else 1
    return [("seg", Path("seg", seg_in, spec.filters, ("seg",))),
            ("reg", Path("reg", full, spec.filters, ("dvf",)))]


class Network:
    """Executable network: named float parameters, BN running stats and paths."""

    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.paths = _plan(spec)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn_state: dict = {}
        self.units: dict = {}

    # construction ---------------------------------------------------------

    def _allocate(self, rng: np.random.Generator):
        for _, path in self.paths:
            for name, shape, kind in path.param_shapes(self.spec.num_structures):
                if kind == "kernel":
                    arr = rng.normal(0.0, 0.02, size=shape)
                elif kind == "gamma":
                    arr = np.ones(shape)
                else:
                    arr = np.zeros(shape)
                self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)
            for bn in path.bn_layers():
                ch = self.params[bn + ".gamma"].shape[0]
                self.bn_state[bn] = BatchNormState(ch, self.spec.bn_momentum, self.spec.bn_eps, self.dtype)
        if self.spec.variant == "CrossStitch":
            ch = layer_channels(self.spec.filters)
            for l in self.spec.crossstitch_layers:
                name = f"cs.{l}.alpha"
                alpha = Tensor(cs.init_alpha(ch[l], rng, dtype=self.dtype), requires_grad=True, name=name)
                self.params[name] = alpha
                self.units[l] = cs.CrossStitchUnit(alpha, name)

    def parameters(self) -> list:
        return list(self.params.values())

    def set_identity_alpha(self):
        for unit in self.units.values():
            unit.alpha.data[...] = cs.identity_alpha(unit.channels, self.dtype)

    def input_channels(self) -> dict:
        return {role: path.in_channels for role, path in self.paths}

    # forward --------------------------------------------------------------

    def assemble_inputs(self, fixed, moving=None, moving_seg=None) -> dict:
        """Per-path input tensors from the raw fixed/moving/segmentation channels."""
        fixed = _tensor(fixed, self.dtype)
        parts = [fixed]
        if moving is not None:
            parts.append(_tensor(moving, self.dtype))
        if moving_seg is not None:
            ms = _tensor(moving_seg, self.dtype)
            if ms.shape[1] != self.spec.num_structures:
                raise ShapeError(f"moving segmentation has {ms.shape[1]} channels, "
                                 f"expected {self.spec.num_structures} (one-hot)")
            parts.append(ms)
        inputs = {}
        for role, path in self.paths:
            if path.in_channels == 1:
                x = fixed
            elif path.in_channels == 2:
                if moving is None:
                    raise ShapeError(f"{self.spec.variant} needs the moving image")
                x = ops.concat(parts[:2], axis=1)
            else:
                if moving is None or moving_seg is None:
                    raise ShapeError(f"{self.spec.variant} needs moving image and moving segmentation")
                x = ops.concat(parts, axis=1)
            inputs[role] = x
        return inputs

    def forward(self, fixed, moving=None, moving_seg=None, training: bool = False) -> MultiResOutputs:
        return self.forward_inputs(self.assemble_inputs(fixed, moving, moving_seg), training)

    def forward_inputs(self, inputs: dict, training: bool = False) -> MultiResOutputs:
        hs, skips = {}, {}
        for role, path in self.paths:
            x = inputs[role]
            if x.ndim != 5 or x.shape[1] != path.in_channels:
                raise ShapeError(f"path {role!r} expects {path.in_channels} input channels, got shape {x.shape}")
            for ext in x.shape[2:]:
                if ext < 44 or ext % 4:
                    raise DimensionError(f"input extents must be >= 44 and divisible by 4, got {x.shape[2:]}")
            hs[role] = x
            skips[role] = {}
        heads = {res: {"seg": None, "dvf": None} for res in RESOLUTIONS}
        for layer in range(1, 15):
            for role, path in self.paths:
                hs[role] = path.step(self, layer, hs[role], skips[role], training)
            if layer in self.units:
                hs["seg"], hs["reg"] = self.units[layer](hs["seg"], hs["reg"])
            if layer in HEAD_LAYERS:
                res = HEAD_LAYERS[layer]
                for role, path in self.paths:
                    heads[res].update(path.heads(self, layer, hs[role]))
        return MultiResOutputs(heads)

    def __call__(self, *args, **kwargs) -> MultiResOutputs:
        return self.forward(*args, **kwargs)


def _tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def build(spec: NetworkSpec, seed=0, dtype=np.float32) -> Network:
    """Instantiate and initialize a network deterministically from ``seed``."""
    spec.validate()
    net = Network(spec, dtype)
    net._allocate(np.random.default_rng(seed))
    return net


def count_parameters(net: Network) -> int:
    return int(sum(p.size for p in net.params.values()))


def count_alpha_parameters(net: Network) -> int:
    return int(sum(u.alpha.size for u in net.units.values()))


def output_shapes(net: Network, n: Optional[int] = None) -> dict:
    """Spatial extent of every head for an ``n``-voxel input, by dry arithmetic."""
    n = n or net.spec.input_patch
    return {"high": n - 40, "mid": n // 2 - 18, "low": n // 4 - 7}


# checkpoint container -------------------------------------------------------
#
# b"XSJR" | u32 version | u32 meta_len | meta JSON (utf-8) | u32 blob_count |
# blobs: u16 name_len | name | u8 ndim | u32 dims[ndim] | float32 LE data.
# Blob names: "param/<n>", "bn_mean/<n>", "bn_var/<n>", "opt_m/<n>", "opt_v/<n>".

MAGIC = b"XSJR"
VERSION = 1


def _write_blob(buf, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(net: Network, optimizer: Optional[dict] = None, meta: Optional[dict] = None) -> bytes:
    header = {
        "spec": net.spec.to_dict(),
        "bn_initialized": {k: bool(s.initialized) for k, s in net.bn_state.items()},
        "meta": meta or {},
        "optimizer": None,
    }
    blobs = [(f"param/{k}", p.data) for k, p in net.params.items()]
    blobs += [(f"bn_mean/{k}", s.mean) for k, s in net.bn_state.items()]
    blobs += [(f"bn_var/{k}", s.var) for k, s in net.bn_state.items()]
    if optimizer is not None:
        header["optimizer"] = {k: v for k, v in optimizer.items() if k not in ("m", "v")}
        blobs += [(f"opt_m/{k}", a) for k, a in optimizer["m"].items()]
        blobs += [(f"opt_v/{k}", a) for k, a in optimizer["v"].items()]
    meta_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        _write_blob(buf, name, np.asarray(arr))
    return buf.getvalue()


def save_checkpoint(path, net: Network, optimizer: Optional[dict] = None, meta: Optional[dict] = None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net, optimizer, meta))


def _read(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise FormatError("checkpoint truncated")
    return b


def parse_checkpoint(data: bytes):
    """Inverse of :func:`checkpoint_bytes`; returns ``(net, optimizer, meta)``."""
    buf = io.BytesIO(data)
    if _read(buf, 4) != MAGIC:
        raise FormatError("not a crossreg checkpoint (bad magic)")
    version, mlen = struct.unpack("<II", _read(buf, 8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(_read(buf, mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint header is not valid JSON ({e})") from None
    (count,) = struct.unpack("<I", _read(buf, 4))
    blobs = {}
    for _ in range(count):
        (nl,) = struct.unpack("<H", _read(buf, 2))
        name = _read(buf, nl).decode("utf-8")
        (nd,) = struct.unpack("<B", _read(buf, 1))
        shape = struct.unpack(f"<{nd}I", _read(buf, 4 * nd))
        size = int(np.prod(shape)) if nd else 1
        blobs[name] = np.frombuffer(_read(buf, 4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint blobs")

    spec = NetworkSpec.from_dict(header["spec"])
    net = Network(spec, np.float32)
    net._allocate(np.random.default_rng(0))
    for k, p in net.params.items():
        arr = blobs.get(f"param/{k}")
        if arr is None or arr.shape != p.shape:
            raise FormatError(f"parameter {k} missing or mis-shaped in checkpoint")
        p.data = arr.copy()
    for k, s in net.bn_state.items():
        if f"bn_mean/{k}" not in blobs or f"bn_var/{k}" not in blobs:
            raise FormatError(f"batch-norm statistics for {k} missing in checkpoint")
        s.mean = blobs[f"bn_mean/{k}"].copy()
        s.var = blobs[f"bn_var/{k}"].copy()
        s.initialized = bool(header["bn_initialized"].get(k, False))
    for l, unit in net.units.items():
        unit.alpha = net.params[f"cs.{l}.alpha"]
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = dict(header["optimizer"])
        optimizer["m"] = {k[6:]: v.copy() for k, v in blobs.items() if k.startswith("opt_m/")}
        optimizer["v"] = {k[6:]: v.copy() for k, v in blobs.items() if k.startswith("opt_v/")}
    return net, optimizer, header.get("meta", {})


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
