"""Model files, IDX datasets, input normalization and report files."""

from __future__ import annotations

import csv
import gzip
import json
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import BadMagic, EmptyDataset, LabelOutOfRange, ParseError, Truncated
from .network import (
    ConvLayer,
    FcLayer,
    FlattenLayer,
    MaxpoolLayer,
    NetworkSpec,
    NormalizationConfig,
    ReluLayer,
)
from .oracle import BoundGapReport
from .relaxation import BoundsCache
from .verifier import ImageResult, VerificationReport, Verdict

MODEL_FORMAT_VERSION = 1
REPORT_SCHEMA_VERSION = 1
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


# -- model files -------------------------------------------------------------

def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)]


def _layer_record(layer) -> dict:
    if isinstance(layer, ConvLayer):
        return {
            "kind": "conv",
            "out_channels": layer.out_channels,
            "in_channels": layer.in_channels,
            "kernel": layer.kernel,
            "stride": layer.stride,
            "padding": layer.padding,
            "weights": _floats(layer.weight),
            "bias": _floats(layer.bias),
        }
    if isinstance(layer, ReluLayer):
        return {"kind": "relu"}
    if isinstance(layer, MaxpoolLayer):
        return {"kind": "maxpool", "kernel": layer.kernel, "stride": layer.stride}
    if isinstance(layer, FlattenLayer):
        return {"kind": "flatten"}
    if isinstance(layer, FcLayer):
        rows, cols = layer.weight.shape
        return {"kind": "fc", "rows": rows, "cols": cols, "weights": _floats(layer.weight), "bias": _floats(layer.bias)}
    raise TypeError(f"cannot serialize {type(layer).__name__}")


def dump_model(net: NetworkSpec, norm: Optional[NormalizationConfig] = None) -> str:
    """Serialize to text; floats use the shortest repr that round-trips exactly."""
    norm = norm or NormalizationConfig.identity(net.input_shape[0])
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "normalization": {"mean": list(norm.mean), "std": list(norm.std)},
    }
    layers = ",\n".join("    " + json.dumps(_layer_record(layer)) for layer in net.layers)
    head = json.dumps(header)[:-1]
    return f'{head},\n  "layers": [\n{layers}\n  ]\n}}\n'


def save_model(path, net: NetworkSpec, norm: Optional[NormalizationConfig] = None):
    Path(path).write_text(dump_model(net, norm), encoding="utf-8")


def _field(record: dict, name: str, index: int):
    try:
        return record[name]
    except KeyError:
        raise ParseError(f"missing field {name!r}", index) from None


def _array(record: dict, name: str, shape, index: int) -> np.ndarray:
    values = _field(record, name, index)
    expected = int(np.prod(shape))
    if not isinstance(values, list) or len(values) != expected:
        got = len(values) if isinstance(values, list) else type(values).__name__
        raise ParseError(f"{name} has {got} entries, expected {expected}", index)
    try:
        return np.array(values, dtype=np.float64).reshape(shape)
    except (TypeError, ValueError):
        raise ParseError(f"{name} contains non-numeric entries", index) from None


def _parse_layer(record: dict, index: int):
    if not isinstance(record, dict):
        raise ParseError("layer record must be an object", index)
    kind = _field(record, "kind", index)
    try:
        if kind == "conv":
            o, c, k = (int(_field(record, n, index)) for n in ("out_channels", "in_channels", "kernel"))
            weight = _array(record, "weights", (o, c, k, k), index)
            bias = _array(record, "bias", (o,), index)
            return ConvLayer(weight, bias, int(record.get("stride", 1)), int(record.get("padding", 0)))
        if kind == "relu":
            return ReluLayer()
        if kind == "maxpool":
            return MaxpoolLayer(int(_field(record, "kernel", index)), int(_field(record, "stride", index)))
        if kind == "flatten":
            return FlattenLayer()
        if kind == "fc":
            rows, cols = int(_field(record, "rows", index)), int(_field(record, "cols", index))
            return FcLayer(_array(record, "weights", (rows, cols), index), _array(record, "bias", (rows,), index))
    except ParseError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), index) from None
    raise ParseError(f"unknown layer kind {kind!r}", index)


def parse_model(text: str) -> Tuple[NetworkSpec, NormalizationConfig]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("model file must hold a JSON object")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {version!r}")
    records = doc.get("layers")
    if not isinstance(records, list):
        raise ParseError("missing layer list")
    layers = [_parse_layer(record, i) for i, record in enumerate(records)]
    try:
        shape = tuple(int(s) for s in doc["input_shape"])
        norm_doc = doc.get("normalization") or {}
        norm = NormalizationConfig(
            norm_doc.get("mean", (0.0,) * shape[0]), norm_doc.get("std", (1.0,) * shape[0])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad header: {exc}") from None
    if len(norm.mean) != shape[0]:
        raise ParseError(f"normalization has {len(norm.mean)} channels, input has {shape[0]}")
    return NetworkSpec(layers, shape), norm


def load_model(path) -> Tuple[NetworkSpec, NormalizationConfig]:
    return parse_model(Path(path).read_text(encoding="utf-8"))


# -- IDX datasets -------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx(path, num_classes: int = 10) -> np.ndarray:
    """Read an IDX file (optionally gzipped).

    Image files (magic 0x803) come back as ``(N, 1, H, W)`` floats in [0, 1];
    label files (magic 0x801) as an int64 vector checked against
    ``num_classes``.
    """
    data = _read_bytes(path)
    if len(data) < 4:
        raise Truncated("file shorter than its magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise BadMagic(f"unexpected magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise Truncated("header cut short")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise Truncated(f"expected {count} data bytes, found {len(data) - header}")
    values = np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == LABEL_MAGIC:
        bad = np.flatnonzero(values >= num_classes)
        if len(bad):
            raise LabelOutOfRange(f"label {values[bad[0]]} at position {bad[0]} exceeds {num_classes - 1}")
        return values.astype(np.int64)
    return (values.astype(np.float64) / 255.0)[:, None, :, :]


def write_idx(path, values: np.ndarray):
    """Write uint8 data as IDX: 3-d arrays as images, 1-d arrays as labels."""
    values = np.asarray(values, dtype=np.uint8)
    magic = {3: IMAGE_MAGIC, 1: LABEL_MAGIC}.get(values.ndim)
    if magic is None:
        raise ValueError("IDX images must be (N, H, W) and labels (N,)")
    header = struct.pack(f">I{values.ndim}I", magic, *values.shape)
    Path(path).write_bytes(header + values.tobytes())


# -- normalization -------------------------------------------------------------

def normalize(image, cfg: NormalizationConfig, eps_raw, clip: bool = False):
    """Map a raw-pixel image and raw-space radius into normalized coordinates.

    Returns ``(image', eps')`` with ``eps'`` shaped like the image.  With
    ``clip`` the raw box is first intersected with [0, 1]; the clipped box is
    then re-expressed as a centre and radius.
    """
    image = np.asarray(image, dtype=np.float64)
    mean = np.asarray(cfg.mean).reshape(-1, 1, 1)
    std = np.asarray(cfg.std).reshape(-1, 1, 1)
    if mean.shape[0] != image.shape[0]:
        raise ValueError(f"normalization has {mean.shape[0]} channels, image has {image.shape[0]}")
    eps_raw = np.broadcast_to(np.asarray(eps_raw, dtype=np.float64), image.shape)
    if np.any(eps_raw < 0):
        raise ValueError("epsilon must be non-negative")
    center = image
    if clip:
        low = np.clip(image - eps_raw, 0.0, 1.0)
        high = np.clip(image + eps_raw, 0.0, 1.0)
        center, eps_raw = (low + high) / 2, (high - low) / 2
    return (center - mean) / std, eps_raw / std


# -- reports -------------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def report_to_dict(report: VerificationReport, timings: bool = True) -> dict:
    """Plain-dict form with a stable key order; ``timings=False`` drops wall times."""
    if not report.images:
        raise EmptyDataset("report has no images")
    images = []
    for r in report.images:
        entry = {
            "index": r.index,
            "label": r.label,
            "predicted": r.predicted,
            "verdict": r.verdict.value,
            "margins": {str(c): j for c, j in r.margins.items()},
            "min_margin": r.min_margin,
        }
        if timings:
            entry["time_s"] = r.time_s
        images.append(entry)
    aggregate = {
        "images": len(report.images),
        "correct": report.correct,
        "verified": report.verified,
        "verified_robustness": report.verified_robustness,
    }
    if timings:
        aggregate["average_time_s"] = report.average_time
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "epsilon": _jsonable(report.epsilon),
        "aggregate": aggregate,
        "images": images,
    }


def report_from_dict(doc: dict) -> VerificationReport:
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ParseError(f"unsupported report schema {doc.get('schema_version')!r}")
    images = [
        ImageResult(
            label=e["label"],
            predicted=e["predicted"],
            verdict=Verdict(e["verdict"]),
            margins={int(c): j for c, j in e["margins"].items()},
            time_s=e.get("time_s", 0.0),
            index=e["index"],
        )
        for e in doc["images"]
    ]
    return VerificationReport(epsilon=doc["epsilon"], images=images)


CSV_FIELDS = ("image_index", "label", "predicted", "verdict", "min_margin", "time_ms")


def write_report(report: VerificationReport, path, csv_path=None):
    doc = report_to_dict(report)  # raises before any file is created
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            for r in report.images:
                margin = "" if r.min_margin is None else repr(r.min_margin)
                writer.writerow([r.index, r.label, r.predicted, r.verdict.value, margin, repr(r.time_s * 1e3)])


def read_report(path) -> VerificationReport:
    return report_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _key_rows(key_name: str, layer: int, lower: np.ndarray, upper: np.ndarray):
    for n, (lo, hi) in enumerate(zip(lower.reshape(-1), upper.reshape(-1))):
        yield [layer, key_name, n, repr(float(lo)), repr(float(hi))]


def write_bounds_csv(cache: BoundsCache, path):
    """One row per bounded quantity: layer, quantity, flat neuron index, lower, upper."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "quantity", "neuron", "lower", "upper"])
        for i in sorted(set(cache.preact) | set(cache.maxpool)):
            if i in cache.preact:
                writer.writerows(_key_rows("preact", i, *cache.preact[i]))
            else:
                mb = cache.maxpool[i]
                writer.writerows(_key_rows("maxpool_m", i, mb.l_m, mb.u_m))
                writer.writerows(_key_rows("maxpool_bar", i, mb.l_bar, mb.u_bar))


GAP_FIELDS = ("layer", "quantity", "neuron", "l_p", "u_p", "l_est", "u_est", "g_p", "g_r", "difference", "violation")


def write_gap_csv(report: BoundGapReport, path):
    """Per-neuron bound gaps; the per-operation means are in ``report.rows``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GAP_FIELDS)
        for row in report.rows:
            name, layer = row.key
            d = report.detail[row.key]
            flat = {k: v.reshape(-1) for k, v in d.items()}
            for n in range(row.neurons):
                l_p, u_p, l_r, u_r = (float(flat[k][n]) for k in ("l_p", "u_p", "l_est", "u_est"))
                writer.writerow([
                    layer, name, n, repr(l_p), repr(u_p), repr(l_r), repr(u_r),
                    repr(u_p - l_p), repr(u_r - l_r), repr(float(flat["diff"][n])), int(flat["violation"][n]),
                ])

