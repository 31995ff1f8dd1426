"""Displacement metrics, balanced per-city evaluation, and report emission.

The balanced averages are unweighted means over the per-city means, so a
city with ten samples counts as much as one with ten thousand. Reports go
out as JSON plus a CSV sidecar (city,ade,fde,n) and, on the CLI path, a
rendered figure.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .planner import ModelParams, NUM_WAYPOINTS, forward_batch


def ade(pred, gt) -> float:
    """Mean Euclidean displacement over the five waypoints."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != (NUM_WAYPOINTS, 2) or g.shape != (NUM_WAYPOINTS, 2):
        raise ValueError("waypoint sets must be 5x2")
    return float(np.linalg.norm(p - g, axis=1).mean())


def fde(pred, gt) -> float:
    """Euclidean displacement at the final waypoint only."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != (NUM_WAYPOINTS, 2) or g.shape != (NUM_WAYPOINTS, 2):
        raise ValueError("waypoint sets must be 5x2")
    return float(np.linalg.norm(p[-1] - g[-1]))


def predict_waypoints(records, model: ModelParams, batch_size: int = 64,
                      threads: int = 1) -> np.ndarray:
    """Predicted waypoints [n, 5, 2] conditioning each record on its own
    command."""
    records = list(records)
    if not records:
        return np.zeros((0, NUM_WAYPOINTS, 2))
    chunks = [records[i:i + batch_size]
              for i in range(0, len(records), batch_size)]

    def run(chunk):
        images = np.stack([r.image for r in chunk]).astype(np.float64)
        speeds = np.array([r.speed for r in chunk], dtype=np.float64)
        regions = np.array([r.region_id for r in chunk], dtype=np.int64)
        preds, _ = forward_batch(images, speeds, regions, model)
        picked = preds.value[np.arange(len(chunk)),
                             [int(r.command) for r in chunk]]
        return picked.copy()

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(chunk) for chunk in chunks]
    return np.concatenate(parts, axis=0)


@dataclass
class MetricsReport:
    per_city: dict[str, dict]          # city -> {"ade", "fde", "n"}
    balanced_ade: float
    balanced_fde: float
    per_event: dict[str, dict]         # tag -> {"ade", "fde", "n"}
    config_fingerprint: str = ""
    model_fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "per_city": {c: dict(v) for c, v in sorted(self.per_city.items())},
            "balanced_ade": self.balanced_ade,
            "balanced_fde": self.balanced_fde,
            "per_event": {t: dict(v) for t, v in sorted(self.per_event.items())},
            "config_fingerprint": self.config_fingerprint,
            "model_fingerprint": self.model_fingerprint,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(per_city=doc["per_city"], balanced_ade=doc["balanced_ade"],
                   balanced_fde=doc["balanced_fde"], per_event=doc["per_event"],
                   config_fingerprint=doc.get("config_fingerprint", ""),
                   model_fingerprint=doc.get("model_fingerprint", ""))


def _group_mean(rows) -> dict[str, dict]:
    groups: dict[str, list] = {}
    for key, a, f in rows:
        groups.setdefault(key, []).append((a, f))
    out = {}
    for key in sorted(groups):
        vals = groups[key]
        out[key] = {"ade": float(np.mean([v[0] for v in vals])),
                    "fde": float(np.mean([v[1] for v in vals])),
                    "n": len(vals)}
    return out


def evaluate(model: ModelParams, records, tags_of_interest=None,
             batch_size: int = 64, threads: int = 1,
             model_fingerprint: str = "", config_fingerprint: str = ""
             ) -> MetricsReport:
    """Per-city and per-event displacement metrics, conditioning on each
    record's ground-truth command.

    Accumulation is sorted by record id first, so the result is bit-stable
    under dataset reordering and chunk-parallel execution.
    """
    records = list(records)
    if any(r.waypoints is None for r in records):
        raise ValueError("evaluation requires labeled records")
    preds = predict_waypoints(records, model, batch_size=batch_size,
                              threads=threads)
    scored = []
    for record, pred in zip(records, preds):
        a = ade(pred, record.waypoints)
        f = fde(pred, record.waypoints)
        scored.append((record.id, record.region_name, tuple(record.tags), a, f))
    scored.sort(key=lambda row: (row[0], row[1], row[3], row[4]))

    per_city = _group_mean([(city, a, f) for _, city, _, a, f in scored])
    tag_rows = []
    for _, _, tags, a, f in scored:
        for tag in tags:
            if tags_of_interest is None or tag in tags_of_interest:
                tag_rows.append((tag, a, f))
    per_event = _group_mean(tag_rows)

    cities = sorted(per_city)
    balanced_ade = float(np.mean([per_city[c]["ade"] for c in cities])) \
        if cities else 0.0
    balanced_fde = float(np.mean([per_city[c]["fde"] for c in cities])) \
        if cities else 0.0
    return MetricsReport(per_city=per_city, balanced_ade=balanced_ade,
                         balanced_fde=balanced_fde, per_event=per_event,
                         model_fingerprint=model_fingerprint,
                         config_fingerprint=config_fingerprint)


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def emit_report(report: MetricsReport, path, figures: bool = True) -> None:
    """Write the JSON report, its CSV sidecar, and (optionally) a per-city
    figure alongside."""
    path = Path(path)
    path.write_text(report_json(report), encoding="utf-8")
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["city", "ade", "fde", "n"])
        for city in sorted(report.per_city):
            entry = report.per_city[city]
            writer.writerow([city, repr(entry["ade"]), repr(entry["fde"]),
                             entry["n"]])
    if figures:
        from .figures import render_city_metrics
        render_city_metrics(report, path.with_name(path.stem + "_cities.png"))


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))
