"""File formats: attention bundles, annotation sets and run records.

Attention bundles and annotations are JSON. Floats are written with
``repr`` precision, so every write/read round trip is exact.

Bundle layout::

    {"format": "attn-bundle/1",
     "layout": {"n_l": 4, "n_v": 3},
     "num_layers": 2, "num_heads": 2,
     "scale": 0.35355,              # optional softmax scale, default 1.0
     "layers": [[<N x N>, ...], ...],   # [layer][head] raw scores
     "annotations": {"objects": [...]}}  # optional
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import ModalityLayout
from .isda import AnnotatedObject, ObjectAnnotationSet
from .training.retrieval import RetrievalMetrics
from .training.trainer import RECORD_FIELDS, Checkpoint

BUNDLE_FORMAT = "attn-bundle/1"


class FormatError(ValueError):
    """Malformed input file. ``where`` is a JSON path or a byte/line offset."""

    kind = "format"

    def __init__(self, path, where: str, message: str):
        self.path = str(path)
        self.where = where
        super().__init__(f"{self.path}: {where}: {message}")


class ParseError(FormatError):
    kind = "parse"


class VersionError(FormatError):
    kind = "version"


class ShapeError(FormatError):
    kind = "shape"


class ValueFormatError(FormatError):
    kind = "value"


@dataclass(frozen=True)
class AttentionBundle:
    layout: ModalityLayout
    scores: list[list[np.ndarray]]  # [layer][head] -> (N, N)
    annotations: ObjectAnnotationSet | None = None
    scale: float = 1.0
    version: str = BUNDLE_FORMAT

    @property
    def num_layers(self) -> int:
        return len(self.scores)

    @property
    def num_heads(self) -> int:
        return len(self.scores[0]) if self.scores else 0

    def layer(self, index: int | str = "last") -> list[np.ndarray]:
        if index == "last":
            index = -1
        index = int(index)
        if not -self.num_layers <= index < self.num_layers:
            raise IndexError(f"layer {index} out of range for {self.num_layers} layers")
        return self.scores[index]


def _load_json(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(path, f"line {e.lineno} column {e.colno} (offset {e.pos})", e.msg) from None


def _index_list(path, where, value):
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ValueFormatError(path, where, "expected a list of integers")
    return tuple(value)


def annotations_from_json(doc, path="<annotations>", prefix="$") -> ObjectAnnotationSet:
    if not isinstance(doc, dict) or not isinstance(doc.get("objects"), list):
        raise ValueFormatError(path, prefix, "expected an object with an 'objects' list")
    objects = []
    for i, entry in enumerate(doc["objects"]):
        where = f"{prefix}.objects[{i}]"
        if not isinstance(entry, dict):
            raise ValueFormatError(path, where, "expected an object")
        name = entry.get("name", f"object_{i}")
        tokens = _index_list(path, where + ".token_indices", entry.get("token_indices"))
        regions = _index_list(path, where + ".region_indices", entry.get("region_indices"))
        objects.append(AnnotatedObject(str(name), tokens, regions))
    try:
        return ObjectAnnotationSet(objects)
    except ValueError as e:
        raise ValueFormatError(path, prefix + ".objects", str(e)) from None


def annotations_to_json(ann: ObjectAnnotationSet) -> dict:
    return {"objects": [{"name": o.name, "token_indices": list(o.token_indices),
                         "region_indices": list(o.region_indices)} for o in ann.objects]}


def read_annotations(path) -> ObjectAnnotationSet:
    return annotations_from_json(_load_json(path), path)


def write_annotations(ann: ObjectAnnotationSet, path) -> None:
    Path(path).write_text(json.dumps(annotations_to_json(ann), indent=1) + "\n", encoding="utf-8")


def _matrix(path, where, value, n) -> np.ndarray:
    if not isinstance(value, list) or len(value) != n:
        got = len(value) if isinstance(value, list) else type(value).__name__
        raise ShapeError(path, where, f"expected {n} rows, got {got}")
    for r, row in enumerate(value):
        if not isinstance(row, list) or len(row) != n:
            got = len(row) if isinstance(row, list) else type(row).__name__
            raise ShapeError(path, f"{where}[{r}]", f"expected {n} columns, got {got}")
        for c, x in enumerate(row):
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise ValueFormatError(path, f"{where}[{r}][{c}]", "expected a number")
            if not math.isfinite(x):
                raise ValueFormatError(path, f"{where}[{r}][{c}]", f"non-finite value {x!r}")
    return np.array(value, dtype=np.float64)


def bundle_from_json(doc, path="<bundle>") -> AttentionBundle:
    if not isinstance(doc, dict):
        raise ParseError(path, "$", "expected a JSON object")
    version = doc.get("format")
    if version != BUNDLE_FORMAT:
        raise VersionError(path, "$.format", f"unsupported format {version!r}, expected {BUNDLE_FORMAT!r}")
    lay = doc.get("layout")
    if not isinstance(lay, dict) or not all(isinstance(lay.get(k), int) for k in ("n_l", "n_v")):
        raise ValueFormatError(path, "$.layout", "expected integer n_l and n_v")
    try:
        layout = ModalityLayout(lay["n_l"], lay["n_v"])
    except ValueError as e:
        raise ValueFormatError(path, "$.layout", str(e)) from None
    n_layers, n_heads = doc.get("num_layers"), doc.get("num_heads")
    if not isinstance(n_layers, int) or not isinstance(n_heads, int) or n_layers < 1 or n_heads < 1:
        raise ValueFormatError(path, "$", "num_layers and num_heads must be positive integers")
    layers = doc.get("layers")
    if not isinstance(layers, list) or len(layers) != n_layers:
        raise ShapeError(path, "$.layers", f"expected {n_layers} layers")
    scores = []
    for li, heads in enumerate(layers):
        if not isinstance(heads, list) or len(heads) != n_heads:
            raise ShapeError(path, f"$.layers[{li}]", f"layer {li}: expected {n_heads} heads")
        scores.append([_matrix(path, f"$.layers[{li}][{hi}]", m, layout.n) for hi, m in enumerate(heads)])
    scale = doc.get("scale", 1.0)
    if isinstance(scale, bool) or not isinstance(scale, (int, float)) or not scale > 0 or not math.isfinite(scale):
        raise ValueFormatError(path, "$.scale", "scale must be a positive number")
    ann = None
    if doc.get("annotations") is not None:
        ann = annotations_from_json(doc["annotations"], path, "$.annotations")
        try:
            ann.validate_layout(layout)
        except IndexError as e:
            raise ValueFormatError(path, "$.annotations", str(e)) from None
    return AttentionBundle(layout, scores, ann, float(scale), version)


def bundle_to_json(bundle: AttentionBundle) -> dict:
    doc = {
        "format": bundle.version,
        "layout": {"n_l": bundle.layout.n_l, "n_v": bundle.layout.n_v},
        "num_layers": bundle.num_layers,
        "num_heads": bundle.num_heads,
        "scale": bundle.scale,
        "layers": [[np.asarray(m, dtype=np.float64).tolist() for m in heads] for heads in bundle.scores],
    }
    if bundle.annotations is not None:
        doc["annotations"] = annotations_to_json(bundle.annotations)
    return doc


def read_attention_bundle(path) -> AttentionBundle:
    return bundle_from_json(_load_json(path), path)


def write_attention_bundle(bundle: AttentionBundle, path) -> None:
    Path(path).write_text(json.dumps(bundle_to_json(bundle)) + "\n", encoding="utf-8")


def bundle_from_encoding(enc, annotations=None) -> AttentionBundle:
    """Wrap an :class:`~iais.attention.EncodedPair` as a bundle."""
    return AttentionBundle(enc.layout, [list(h) for h in enc.scores], annotations, enc.attention_scale)


# -- run records ----------------------------------------------------------------

def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def run_record_csv(checkpoints) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for cp in checkpoints:
        row = cp.row()
        w.writerow([_fmt(row[k]) for k in RECORD_FIELDS])
    return buf.getvalue()


def write_run_record(record, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "run.csv", out / "summary.json"
    csv_path.write_text(run_record_csv(record.checkpoints), encoding="utf-8")
    json_path.write_text(json.dumps(record.summary(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def read_run_csv(path) -> list[Checkpoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise FormatError(path, "header", f"expected columns {','.join(RECORD_FIELDS)}")
        rows = []
        for i, r in enumerate(reader):
            try:
                recall = RetrievalMetrics(*(float(r[k]) for k in ("r1_i", "r5_i", "r10_i", "r1_t", "r5_t", "r10_t")))
                rows.append(Checkpoint(int(r["step"]), float(r["lambda"]), float(r["margin_loss"]),
                                       float(r["iais_loss"]), float(r["iais_v"]), float(r["iais_l"]),
                                       float(r["isda"]), recall))
            except (TypeError, ValueError) as e:
                raise FormatError(path, f"row {i + 1}", str(e)) from None
    return rows
