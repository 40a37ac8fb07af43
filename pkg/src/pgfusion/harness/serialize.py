"""Deterministic artifact files: metrics JSON, detections CSV/JSON, 16-bit PGM.

The JSON writer is hand-rolled so that every float is printed with 17
significant digits (lossless for float64) and keys come out sorted; two runs
that compute the same numbers then produce byte-identical files.
"""

import csv
import json
import math

import numpy as np

from ..detection import DetectionSet
from ..scene import Box7

METRICS_SCHEMA = "pgf-metrics/1"
DETECTIONS_SCHEMA = "pgf-detections/1"
ABLATION_SCHEMA = "pgf-ablation/1"

_PGM_MAXVAL = 65535


def _fmt_float(v):
    v = float(v)
    if not math.isfinite(v):
        raise ValueError("non-finite float in payload: %r" % v)
    return "%.17g" % v


def dumps_canonical(obj, indent=0):
    """JSON text with sorted keys and 17-significant-digit floats."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps_canonical(obj.tolist(), indent)
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [dumps_canonical(v, indent + 1) for v in obj]
        return "[\n" + ",\n".join(inner + it for it in items) + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        if not all(isinstance(k, str) for k in obj):
            raise TypeError("JSON object keys must be strings")
        items = [
            "%s%s: %s" % (inner, json.dumps(k), dumps_canonical(obj[k], indent + 1))
            for k in sorted(obj)
        ]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    raise TypeError("cannot serialize %r" % type(obj))


def save_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_canonical(payload))
        f.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _threshold_key(t):
    return "%g" % t


def metrics_payload(result, config_echo=None, extra=None, timestamp=None):
    """Metrics dict ready for save_json; timestamp is the only field two
    identical runs are allowed to disagree on."""
    per_class = {}
    per_class_mean = {}
    for k in range(result.ap.shape[0]):
        cid = str(k + 1)
        per_class[cid] = {
            _threshold_key(t): float(result.ap[k, ti])
            for ti, t in enumerate(result.thresholds)
        }
        per_class_mean[cid] = float(result.class_mean[k])
    counts = {
        _threshold_key(t): {
            "tp": int(result.tp[ti]),
            "fp": int(result.fp[ti]),
            "fn": int(result.fn[ti]),
        }
        for ti, t in enumerate(result.thresholds)
    }
    payload = {
        "schema": METRICS_SCHEMA,
        "thresholds": [float(t) for t in result.thresholds],
        "per_class_ap": per_class,
        "per_class_mean": per_class_mean,
        "mean_ap": float(result.mean_ap),
        "counts": counts,
        "no_gt_classes": [int(c) for c in result.no_gt_classes],
    }
    if config_echo is not None:
        payload["config"] = config_echo
    if extra:
        payload.update(extra)
    if timestamp is not None:
        payload["generated_at"] = timestamp
    return payload


_DET_FIELDS = ("cx", "cy", "cz", "l", "w", "h", "yaw", "class_id", "score")


def save_detections_csv(path, dets_per_scene):
    """One row per detection: scene index plus the box fields, floats with
    17 significant digits so a reload is bit-exact."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("scene",) + _DET_FIELDS)
        for si, det_set in enumerate(dets_per_scene):
            for box in det_set.boxes:
                writer.writerow(
                    [si]
                    + [
                        _fmt_float(v)
                        for v in (box.cx, box.cy, box.cz, box.l, box.w, box.h, box.yaw)
                    ]
                    + [box.class_id, _fmt_float(box.score)]
                )


def load_detections_csv(path, n_scenes=None):
    """Inverse of save_detections_csv; scenes with no rows come back empty.

    n_scenes pads the result so trailing empty scenes survive the roundtrip.
    """
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != ("scene",) + _DET_FIELDS:
            raise ValueError("unexpected detections CSV header: %r" % (header,))
        rows = [r for r in reader if r]
    max_scene = -1
    parsed = []
    for r in rows:
        si = int(r[0])
        if si < 0:
            raise ValueError("negative scene index in detections CSV")
        max_scene = max(max_scene, si)
        parsed.append(
            (
                si,
                Box7(
                    cx=float(r[1]),
                    cy=float(r[2]),
                    cz=float(r[3]),
                    l=float(r[4]),
                    w=float(r[5]),
                    h=float(r[6]),
                    yaw=float(r[7]),
                    class_id=int(r[8]),
                    score=float(r[9]),
                ),
            )
        )
    count = max_scene + 1 if n_scenes is None else n_scenes
    if max_scene >= count:
        raise ValueError(
            "detections CSV references scene %d but only %d scenes expected"
            % (max_scene, count)
        )
    scenes = [[] for _ in range(count)]
    for si, box in parsed:
        scenes[si].append(box)
    return [DetectionSet(boxes=b, provenance=None) for b in scenes]


def detections_payload(dets_per_scene):
    scenes = []
    for det_set in dets_per_scene:
        scenes.append(
            [
                {
                    "cx": box.cx,
                    "cy": box.cy,
                    "cz": box.cz,
                    "l": box.l,
                    "w": box.w,
                    "h": box.h,
                    "yaw": box.yaw,
                    "class_id": box.class_id,
                    "score": box.score,
                }
                for box in det_set.boxes
            ]
        )
    return {"schema": DETECTIONS_SCHEMA, "scenes": scenes}


def load_detections_json(path):
    payload = load_json(path)
    if payload.get("schema") != DETECTIONS_SCHEMA:
        raise ValueError("unexpected detections schema: %r" % payload.get("schema"))
    out = []
    for scene in payload["scenes"]:
        boxes = [Box7(**{k: (int(d[k]) if k == "class_id" else float(d[k])) for k in d}) for d in scene]
        out.append(DetectionSet(boxes=boxes, provenance=None))
    return out


def save_pgm16(path, image):
    """16-bit big-endian binary PGM of a [0, 1] map (netpbm P5)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2D map, got shape %r" % (arr.shape,))
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("PGM expects finite values in [0, 1]")
    quant = np.round(arr * _PGM_MAXVAL).astype(">u2")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n%d\n" % (arr.shape[1], arr.shape[0], _PGM_MAXVAL))
        f.write(quant.tobytes())


def load_pgm16(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != _PGM_MAXVAL:
        raise ValueError("expected maxval %d, got %s" % (_PGM_MAXVAL, parts[2]))
    raw = np.frombuffer(parts[3], dtype=">u2", count=h * w).reshape(h, w)
    return raw.astype(np.float64) / _PGM_MAXVAL
