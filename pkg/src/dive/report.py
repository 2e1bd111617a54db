"""Metric report: a JSON document with a fixed schema.

Schema (version 1)::

    {
      "schema": "dive-metric-report",
      "schema_version": 1,
      "fid": float | null,
      "class_distances": {"intra": Stats, "inter": Stats} | null,
      "retrieval": {"cmc": [float], "mAP": float, "evaluated": int,
                    "skipped": int} | null,
      "modality": {"infrared_rate": float, "n": int} | null,
      "counts": {str: int},
      "provenance": {str: str | int | float | {str: float}}
    }

where ``Stats`` is ``{"mean", "median", "count", "histogram", "bin_edges"}``.
Keys are sorted on output, so equal reports serialize to equal bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import DistanceStats, RetrievalResult

__all__ = ["MetricReport", "SCHEMA", "SCHEMA_VERSION"]

SCHEMA = "dive-metric-report"
SCHEMA_VERSION = 1


def _stats(s: DistanceStats) -> dict:
    return {"mean": s.mean, "median": s.median, "count": s.count,
            "histogram": [int(v) for v in s.histogram],
            "bin_edges": [float(v) for v in s.bin_edges]}


@dataclass
class MetricReport:
    fid: float | None = None
    class_distances: dict | None = None
    retrieval: dict | None = None
    modality: dict | None = None
    counts: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def set_class_distances(self, intra: DistanceStats, inter: DistanceStats) -> None:
        self.class_distances = {"intra": _stats(intra), "inter": _stats(inter)}

    def set_retrieval(self, result: RetrievalResult) -> None:
        self.retrieval = {"cmc": [float(v) for v in result.cmc], "mAP": result.mAP,
                          "evaluated": result.evaluated, "skipped": result.skipped}

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "schema_version": SCHEMA_VERSION, "fid": self.fid,
                "class_distances": self.class_distances, "retrieval": self.retrieval,
                "modality": self.modality, "counts": dict(self.counts),
                "provenance": dict(self.provenance)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        if data.get("schema") != SCHEMA:
            raise ValueError("not a metric report")
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report version {data.get('schema_version')}")
        return cls(data["fid"], data["class_distances"], data["retrieval"], data["modality"],
                   data["counts"], data["provenance"])

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def summary(self) -> str:
        rows = []
        if self.fid is not None:
            rows.append(("FID", f"{self.fid:.4f}"))
        if self.class_distances:
            rows.append(("intra distance (mean)", f"{self.class_distances['intra']['mean']:.4f}"))
            rows.append(("inter distance (mean)", f"{self.class_distances['inter']['mean']:.4f}"))
        if self.retrieval:
            cmc = self.retrieval["cmc"]
            for k in (1, 5, 10):
                if len(cmc) >= k:
                    rows.append((f"rank-{k}", f"{100 * cmc[k - 1]:.2f}"))
            rows.append(("mAP", f"{100 * self.retrieval['mAP']:.2f}"))
            if self.retrieval["skipped"]:
                rows.append(("queries skipped", str(self.retrieval["skipped"])))
        if self.modality:
            rows.append(("infrared rate", f"{100 * self.modality['infrared_rate']:.1f}%"))
        for k, v in sorted(self.counts.items()):
            rows.append((k, str(v)))
        width = max((len(k) for k, _ in rows), default=0)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
