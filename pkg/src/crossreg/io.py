"""MetaImage volume files, dataset manifests and run configuration.

Volumes are arrays indexed ``(z, y, x)``; on disk they are little-endian,
x fastest, with header fields in MetaImage ``x y z`` order.  Spacing passed
to and returned from this module is in array order ``(z, y, x)``.
Displacement fields ``(3, z, y, x)`` are written with
``ElementNumberOfChannels = 3`` and channels interleaved (component order
unchanged: dz, dy, dx).
"""
from __future__ import annotations

from dataclasses import fields
import json
import os
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .synth import PhantomPair, PhantomSpec, make_pair
from .training import TrainConfig

ELEMENT_TYPES = {"MET_FLOAT": np.dtype("<f4"), "MET_UCHAR": np.dtype("u1"),
                 "MET_DOUBLE": np.dtype("<f8"), "MET_SHORT": np.dtype("<i2")}


def _element_type(arr: np.ndarray) -> str:
    if arr.dtype == np.bool_:
        return "MET_UCHAR"
    for name, dt in ELEMENT_TYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return name
    raise FormatError(f"cannot store dtype {arr.dtype}; use float32 or uint8")


def write_volume(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0), vector: Optional[bool] = None):
    """Write ``array`` as ``path`` (.mhd) plus a sibling .raw file.

    A 4D array with a leading axis of 3 is written as a vector field.
    """
    array = np.asarray(array)
    if vector is None:
        vector = array.ndim == 4 and array.shape[0] == 3
    spatial = array.shape[1:] if vector else array.shape
    if len(spatial) != 3:
        raise FormatError(f"expected a 3D volume (or 3-channel field), got shape {array.shape}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise FormatError(f"spacing must be three positive values, got {spacing}")
    etype = _element_type(array)
    data = np.moveaxis(array, 0, -1) if vector else array
    data = np.ascontiguousarray(data, dtype=ELEMENT_TYPES[etype])
    path = os.fspath(path)
    base = os.path.splitext(path)[0]
    raw_name = os.path.basename(base) + ".raw"
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "DimSize = " + " ".join(str(d) for d in reversed(spatial)),
        "ElementSpacing = " + " ".join(repr(s) for s in reversed(spacing)),
    ]
    if vector:
        lines.append("ElementNumberOfChannels = 3")
    lines += [f"ElementType = {etype}", f"ElementDataFile = {raw_name}"]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(os.path.dirname(path), raw_name), "wb") as fh:
        fh.write(data.tobytes())


def read_header(path) -> dict:
    header = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{n}: not a 'key = value' line")
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
    return header


def _field(header, key, path):
    if key not in header:
        raise FormatError(f"{path}: missing header field {key}")
    return header[key]


def read_volume(path):
    """Return ``(array, spacing)``; vector fields come back as ``(3, z, y, x)``."""
    path = os.fspath(path)
    h = read_header(path)
    if _field(h, "NDims", path) != "3":
        raise FormatError(f"{path}: NDims must be 3, got {h['NDims']}")
    if h.get("CompressedData", "False") != "False":
        raise FormatError(f"{path}: CompressedData is not supported")
    if h.get("BinaryDataByteOrderMSB", "False") != "False":
        raise FormatError(f"{path}: BinaryDataByteOrderMSB must be False")
    try:
        dims = [int(d) for d in _field(h, "DimSize", path).split()]
        spacing = [float(s) for s in h.get("ElementSpacing", "1 1 1").split()]
        channels = int(h.get("ElementNumberOfChannels", "1"))
    except ValueError as e:
        raise FormatError(f"{path}: unparseable numeric header field ({e})") from None
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise FormatError(f"{path}: DimSize must be three positive integers, got {dims}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise FormatError(f"{path}: ElementSpacing must be three positive values, got {spacing}")
    if channels not in (1, 3):
        raise FormatError(f"{path}: ElementNumberOfChannels must be 1 or 3, got {channels}")
    etype = _field(h, "ElementType", path)
    if etype not in ELEMENT_TYPES:
        raise FormatError(f"{path}: ElementType {etype} not supported")
    dtype = ELEMENT_TYPES[etype]
    raw = os.path.join(os.path.dirname(path), _field(h, "ElementDataFile", path))
    with open(raw, "rb") as fh:
        buf = fh.read()
    expected = int(np.prod(dims)) * channels * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"{path}: DimSize {' '.join(map(str, dims))} x {channels} channel(s) of "
                          f"{etype} needs {expected} bytes, {raw} has {len(buf)}")
    shape = tuple(reversed(dims)) + ((3,) if channels == 3 else ())
    arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
    if channels == 3:
        arr = np.moveaxis(arr, -1, 0)
    arr = np.ascontiguousarray(arr, dtype=dtype.newbyteorder("="))
    return arr, tuple(reversed(spacing))


# dataset ------------------------------------------------------------------

MANIFEST = "manifest.json"
PAIR_FILES = ("fixed", "moving", "fixed_seg", "moving_seg", "dvf")


def write_dataset(out_dir, spec: PhantomSpec, n_pairs: int, seed: int, n_test: int = 0) -> dict:
    """Generate ``n_pairs`` phantom pairs into ``out_dir`` with a manifest; the last ``n_test`` are held out."""
    if n_pairs < 1 or not 0 <= n_test <= n_pairs:
        raise ConfigError(f"need n_pairs >= 1 and 0 <= n_test <= n_pairs, got {n_pairs}, {n_test}")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n_pairs):
        pair_seed = 1000 * seed + i
        pair = make_pair(spec, pair_seed)
        name = f"pair{i:03d}"
        files = {}
        for key in PAIR_FILES:
            fname = f"{name}_{key}.mhd"
            write_volume(os.path.join(out_dir, fname), getattr(pair, key), pair.spacing)
            files[key] = fname
        entries.append({"name": name, "seed": pair_seed, "split": "test" if i >= n_pairs - n_test else "train",
                        **files})
    manifest = {"format": "crossreg-dataset", "version": 1, "phantom": spec.to_dict(), "pairs": entries}
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def read_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, MANIFEST)
    try:
        with open(path) as fh:
            m = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"no {MANIFEST} in {data_dir}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    if m.get("format") != "crossreg-dataset" or not isinstance(m.get("pairs"), list):
        raise FormatError(f"{path}: not a crossreg dataset manifest")
    return m


def load_pairs(data_dir, split: Optional[str] = None):
    """Return ``(names, pairs)`` for the manifest entries in ``split`` (all when None)."""
    m = read_manifest(data_dir)
    names, pairs = [], []
    for e in m["pairs"]:
        if split and e.get("split") != split:
            continue
        vols = {}
        spacing = (1.0, 1.0, 1.0)
        for key in PAIR_FILES:
            if key not in e:
                raise FormatError(f"manifest entry {e.get('name')} lacks {key}")
            vols[key], spacing = read_volume(os.path.join(data_dir, e[key]))
        names.append(e["name"])
        pairs.append(PhantomPair(seed=int(e.get("seed", 0)), spacing=spacing, **vols))
    if not pairs:
        raise FormatError(f"{data_dir}: no pairs with split {split!r}")
    return names, pairs


# run configuration ----------------------------------------------------------

EVAL_DEFAULTS = {"output_selection": "both", "window": None, "include_identity": False, "split": "test"}
DATA_DEFAULTS = {"n_pairs": 12, "n_test": 4, "seed": 0}
SECTIONS = ("phantom", "data", "train", "eval")


def _names(cls):
    return [f.name for f in fields(cls)]


def default_config() -> dict:
    """Every recognized key with its default value."""
    return {
        "phantom": PhantomSpec(size=64).to_dict(),
        "data": dict(DATA_DEFAULTS),
        "train": TrainConfig().to_dict(),
        "eval": dict(EVAL_DEFAULTS),
    }


def _reject_unknown(section: str, given: dict, allowed):
    if not isinstance(given, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(extra)}")


def parse_config(doc: dict) -> dict:
    """Validate a config document and return ``{phantom: PhantomSpec, train: TrainConfig, data, eval}``."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("<top level>", doc, SECTIONS)
    defaults = default_config()
    for sec in SECTIONS:
        _reject_unknown(sec, doc.get(sec, {}), defaults[sec])
    ph = {**defaults["phantom"], **doc.get("phantom", {})}
    tr = {**defaults["train"], **doc.get("train", {})}
    try:
        phantom = PhantomSpec(**ph)
        train = TrainConfig(**tr)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    data = {**DATA_DEFAULTS, **doc.get("data", {})}
    ev = {**EVAL_DEFAULTS, **doc.get("eval", {})}
    if ev["output_selection"] not in ("both", "segmentation", "registration"):
        raise ConfigError(f"eval.output_selection must be both|segmentation|registration")
    return {"phantom": phantom, "train": train, "data": data, "eval": ev}


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return parse_config({})
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(doc)
