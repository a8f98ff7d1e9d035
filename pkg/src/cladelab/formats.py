"""File formats: mask grids, PPM/PGM images, graph-spec text, checkpoints.

Masks are ASCII grids (first line ``H W N_c``, then H rows of W integers);
instance maps use the same format. Images are binary PPM (P6, maxval 255)
mapping [-1, 1] to [0, 255] via round((v + 1) * 127.5). Graph specs are
line-oriented key=value blocks separated by blank lines: a header block
(graph-level settings or a ``preset=`` shortcut) followed by one block per
layer. Checkpoints are a magic string, a JSON header echoing the graph
spec and blob layout, then raw little-endian float32 parameter blobs.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .generator import Entry, GraphError, GraphSpec, Model, graph_preset
from .norms import SegmentationMask

__all__ = [
    "SpecParseError", "CheckpointError",
    "read_mask", "write_mask", "write_ppm", "read_ppm", "write_pgm",
    "parse_graph_spec", "serialize_graph_spec",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"CLADELAB1"


class SpecParseError(ValueError):
    """Graph-spec text problem; carries the offending 1-based line number."""

    def __init__(self, message, line=0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# masks


def write_mask(path, mask):
    lines = [f"{mask.labels.shape[0]} {mask.labels.shape[1]} {mask.num_classes}"]
    for row in mask.labels:
        lines.append(" ".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask(path):
    text = Path(path).read_text().strip().splitlines()
    if not text:
        raise SpecParseError("empty mask file", 1)
    head = text[0].split()
    if len(head) != 3:
        raise SpecParseError("mask header must be 'H W N_c'", 1)
    h, w, nc = (int(v) for v in head)
    if len(text) - 1 != h:
        raise SpecParseError(f"expected {h} rows, found {len(text) - 1}", len(text))
    labels = np.zeros((h, w), np.int32)
    for i, line in enumerate(text[1:]):
        vals = line.split()
        if len(vals) != w:
            raise SpecParseError(f"expected {w} values, found {len(vals)}", i + 2)
        labels[i] = [int(v) for v in vals]
    return SegmentationMask(labels, nc)


# ---------------------------------------------------------------------------
# images


def write_ppm(path, image):
    """Binary P6 image from a (3, H, W) array in [-1, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {img.shape}")
    bytes_ = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = img.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(bytes_.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    """Read a P6 image back to a (3, H, W) float32 array in [-1, 1]."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a P6 PPM file")
    w, h = (int(v) for v in parts[1].split())
    raw = np.frombuffer(parts[3][: w * h * 3], np.uint8)
    img = raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)
    return img / 127.5 - 1.0


def write_pgm(path, image):
    """Grayscale P5 from a 2-D array, linearly rescaled to its own range."""
    img = np.asarray(image, np.float64)
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    bytes_ = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(bytes_.tobytes())


# ---------------------------------------------------------------------------
# graph-spec text format


_HEADER_KEYS = {
    "noise_dim": int, "num_classes": int, "norm_mode": str, "cm": int,
    "image_size": int, "use_edge": lambda v: bool(int(v)),
}
_LAYER_KEYS = {"layer": str, "cout": int, "k": int, "h": int, "w": int, "fn": str}


def _blocks(text):
    """Yield (start_line, {key: (value, line)}) per blank-line-separated block."""
    block = {}
    start = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if block:
                yield start, block
                block, start = {}, None
            continue
        if "=" not in line:
            raise SpecParseError(f"expected key=value, got {raw.strip()!r}", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if start is None:
            start = lineno
        if key in block:
            raise SpecParseError(f"duplicate key {key!r}", lineno)
        block[key] = (val, lineno)
    if block:
        yield start, block


def parse_graph_spec(text):
    """Parse the line-oriented graph-spec format into a validated GraphSpec."""
    blocks = list(_blocks(text))
    if not blocks:
        raise SpecParseError("empty graph spec", 1)
    start, header = blocks[0]
    if "layer" in header:
        raise SpecParseError("first block must be the header, not a layer", start)

    if "preset" in header:
        preset, line = header.pop("preset")
        overrides = {}
        for key, (val, lineno) in header.items():
            if key not in _HEADER_KEYS:
                raise SpecParseError(f"unknown header key {key!r}", lineno)
            overrides[key] = _HEADER_KEYS[key](val)
        if len(blocks) > 1:
            raise SpecParseError("preset specs cannot declare layers", blocks[1][0])
        try:
            return graph_preset(preset, **overrides)
        except GraphError as e:
            raise SpecParseError(str(e), line)

    settings = {}
    for key, (val, lineno) in header.items():
        if key not in _HEADER_KEYS:
            raise SpecParseError(f"unknown header key {key!r}", lineno)
        settings[key] = _HEADER_KEYS[key](val)
    for req in ("noise_dim", "num_classes", "image_size"):
        if req not in settings:
            raise SpecParseError(f"header missing {req!r}", start)

    entries = []
    for bstart, block in blocks[1:]:
        if "layer" not in block:
            raise SpecParseError("layer block missing 'layer=' key", bstart)
        kind = block.pop("layer")[0]
        kw = {}
        for key, (val, lineno) in block.items():
            if key not in _LAYER_KEYS or key == "layer":
                raise SpecParseError(f"unknown layer key {key!r}", lineno)
            kw[key] = _LAYER_KEYS[key](val)
        try:
            entries.append(Entry(kind, **kw))
        except TypeError:
            raise SpecParseError(f"bad fields for layer {kind!r}", bstart)
    spec = GraphSpec(entries=entries, **settings)
    try:
        return spec.validate()
    except GraphError as e:
        raise SpecParseError(str(e), start)


def serialize_graph_spec(spec):
    """Canonical text form; parse(serialize(spec)) reproduces the spec."""
    lines = [
        f"noise_dim={spec.noise_dim}",
        f"num_classes={spec.num_classes}",
        f"norm_mode={spec.norm_mode}",
        f"cm={spec.cm}",
        f"image_size={spec.image_size}",
        f"use_edge={int(spec.use_edge)}",
    ]
    for e in spec.entries:
        lines.append("")
        lines.append(f"layer={e.kind}")
        if e.kind == "linear":
            lines += [f"cout={e.cout}", f"h={e.h}", f"w={e.w}"]
        elif e.kind == "resblock":
            lines.append(f"cout={e.cout}")
        elif e.kind == "conv":
            lines += [f"cout={e.cout}", f"k={e.k}"]
        elif e.kind == "activation" and e.fn:
            lines.append(f"fn={e.fn}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, seed=None):
    """Write magic, JSON header (spec echo, blob layout, stats, seed), blobs."""
    params = model.parameters()
    blobs = []
    entries = []
    offset = 0
    for name, p in params:
        data = np.ascontiguousarray(p.data.astype("<f4"))
        blobs.append(data.tobytes())
        entries.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += data.nbytes
    stats_entries = []
    for i, site in enumerate(model.norm_sites()):
        st = site.stats
        if st.running_mean is None:
            continue
        for field_name, arr in (("running_mean", st.running_mean),
                                ("running_var", st.running_var)):
            data = np.ascontiguousarray(np.asarray(arr).astype("<f4"))
            blobs.append(data.tobytes())
            stats_entries.append({"name": f"{site.name}.{field_name}",
                                  "site": i, "stepped": bool(st._stepped),
                                  "shape": list(data.shape), "offset": offset})
            offset += data.nbytes
    header = {
        "spec": serialize_graph_spec(model.spec),
        "params": entries,
        "stats": stats_entries,
        "seed": int(model.seed if seed is None else seed),
    }
    header_bytes = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; outputs are bitwise reproducible.

    Returns (model, seed).
    """
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"bad magic in {path}")
    try:
        (hlen,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
        hstart = len(CHECKPOINT_MAGIC) + 4
        header = json.loads(raw[hstart:hstart + hlen])
        spec = parse_graph_spec(header["spec"])
        model = Model(spec, int(header["seed"]))
        body = hstart + hlen
        named = dict(model.parameters())
        for entry in header["params"]:
            name, shape, off = entry["name"], entry["shape"], entry["offset"]
            if name not in named:
                raise CheckpointError(f"unknown parameter {name!r}")
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, "<f4", count=count, offset=body + off)
            named[name].data = arr.reshape(shape).astype(np.float32).copy()
        sites = {s.name: s for s in model.norm_sites()}
        for entry in header.get("stats", []):
            site_name, field_name = entry["name"].rsplit(".", 1)
            site = sites.get(site_name)
            if site is None:
                raise CheckpointError(f"unknown norm site {site_name!r}")
            count = int(np.prod(entry["shape"]))
            arr = np.frombuffer(raw, "<f4", count=count, offset=body + entry["offset"])
            setattr(site.stats, field_name, arr.astype(np.float32).copy())
            site.stats._stepped = bool(entry.get("stepped", True))
        return model, int(header["seed"])
    except CheckpointError:
        raise
    except (KeyError, ValueError, struct.error, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}")
