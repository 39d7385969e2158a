"""Report emission: a JSON result tree plus a CSV table of bands and data.

Payloads carry no timestamps or absolute paths, keys are sorted and floats
are written with ``repr`` precision, so identical inputs give identical bytes.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

from ..errors import IUQError

SCHEMA_VERSION = "1"
REPORT_NAME = "report.json"
BANDS_NAME = "bands.csv"


def to_jsonable(obj):
    """Plain-Python tree; numpy values converted, non-finite floats -> None."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(payload):
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2, allow_nan=False) + "\n"


def build_report(config_hash, seed, generation, methods=None, fuq=None, envelope=None):
    report = {"schema_version": SCHEMA_VERSION, "config_hash": config_hash, "seed": int(seed),
              "generation": generation, "methods": methods or {}}
    if fuq is not None:
        report["fuq"] = fuq
    if envelope is not None:
        report["envelope"] = envelope
    return to_jsonable(report)


def write_json(path, payload):
    try:
        Path(path).write_text(dumps(payload), encoding="utf-8")
    except OSError as exc:
        raise IUQError(f"cannot write {path}: {exc}") from None


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_bands_csv(path, bands, experiments):
    """One row per data point: band ends, median and the measured value."""
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise IUQError(f"cannot write {path}: {exc}") from None
    with fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["design_label", "time_s", "qoi_label", "lower", "median", "upper", "data"])
        for rec, lo, med, hi in zip(experiments, bands.lower, bands.median, bands.upper):
            obs = rec.observed
            if obs.is_time_series:
                for z, label in enumerate(obs.labels):
                    for k, t in enumerate(obs.times):
                        w.writerow([rec.label, repr(float(t)), label, repr(float(lo[z, k])),
                                    repr(float(med[z, k])), repr(float(hi[z, k])),
                                    repr(float(obs.values[z, k]))])
            else:
                for z, label in enumerate(obs.labels):
                    w.writerow([rec.label, "", label, repr(float(lo[z])), repr(float(med[z])),
                                repr(float(hi[z])), repr(float(obs.values[z]))])


def emit_report(out_dir, report, bands=None, experiments=None):
    """Write ``report.json`` (and ``bands.csv`` when bands are given)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IUQError(f"cannot create {out}: {exc}") from None
    write_json(out / REPORT_NAME, report)
    if bands is not None:
        write_bands_csv(out / BANDS_NAME, bands, experiments)
    return out / REPORT_NAME
