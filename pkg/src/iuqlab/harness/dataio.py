"""Experiment records as comma-separated text.

Header: ``design_label,time_s,qoi_label,value,noise_sd``. ``time_s`` is empty
for scalar QoIs. Design values are not part of the table; records read back are
matched to the scenario designs by label.
"""

import csv
from collections import OrderedDict

import numpy as np

from ..errors import ValidationError
from ..models import DesignPoint, ExperimentRecord, QoIVector

HEADER = ["design_label", "time_s", "qoi_label", "value", "noise_sd"]


def write_experiments(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for rec in records:
            obs = rec.observed
            sd = rec.noise_sd
            labels = obs.labels
            if obs.is_time_series:
                for z, row in enumerate(obs.values):
                    for k, t in enumerate(obs.times):
                        w.writerow([rec.label, repr(float(t)), labels[z], repr(float(row[k])),
                                    repr(float(sd[z, k]))])
            else:
                for z, v in enumerate(obs.values):
                    w.writerow([rec.label, "", labels[z], repr(float(v)), repr(float(sd[z]))])


def read_experiments(path, designs):
    """Read records; ``designs`` maps design label -> design values."""
    rows = OrderedDict()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != HEADER:
            raise ValidationError(f"unexpected header {header}; expected {HEADER}", field="data_file")
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValidationError(f"line {n}: expected 5 columns", field="data_file")
            label, t, q, v, s = (c.strip() for c in row)
            try:
                rows.setdefault(label, []).append(
                    (None if t == "" else float(t), q, float(v), float(s)))
            except ValueError:
                raise ValidationError(f"line {n}: non-numeric value", field="data_file") from None
    records = []
    for label, entries in rows.items():
        if label not in designs:
            raise ValidationError(f"design {label!r} in data file has no design values",
                                  field="data_file")
        qois = list(OrderedDict.fromkeys(e[1] for e in entries))
        timed = entries[0][0] is not None
        if timed:
            times = np.array(sorted({e[0] for e in entries}))
            vals = np.full((len(qois), times.size), np.nan)
            sds = np.full_like(vals, np.nan)
            for t, q, v, s in entries:
                k = int(np.searchsorted(times, t))
                vals[qois.index(q), k] = v
                sds[qois.index(q), k] = s
            if np.isnan(vals).any():
                raise ValidationError(f"design {label!r}: traces are not on a common time grid",
                                      field="data_file")
            obs = QoIVector(vals, times=times, labels=tuple(qois))
        else:
            vals = np.array([e[2] for e in entries])
            sds = np.array([e[3] for e in entries])
            obs = QoIVector(vals, labels=tuple(qois))
        records.append(ExperimentRecord(DesignPoint(designs[label], name=label), obs, sds**2,
                                        label=label))
    return records
