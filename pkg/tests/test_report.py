import json

import numpy as np
import pytest

from dive.metrics import DistanceStats, RetrievalResult
from dive.report import SCHEMA, MetricReport


def _report():
    r = MetricReport(fid=1.5, counts={"synthetic": 12}, provenance={"seed": 0})
    stats = DistanceStats(0.3, 0.25, 4, np.array([1, 3]), np.array([0.0, 0.5, 1.0]))
    r.set_class_distances(stats, stats)
    r.set_retrieval(RetrievalResult(np.array([0.5, 1.0]), 0.75, 4, 1))
    r.modality = {"infrared_rate": 0.9, "n": 10}
    return r


def test_roundtrip_and_stable_bytes(tmp_path):
    r = _report()
    path = r.save(tmp_path / "r.json")
    back = MetricReport.load(path)
    assert back.to_json() == r.to_json()
    data = json.loads(path.read_text())
    assert data["schema"] == SCHEMA and data["schema_version"] == 1
    assert list(data) == sorted(data)


def test_rejects_foreign_documents():
    with pytest.raises(ValueError):
        MetricReport.from_dict({"schema": "other"})
    with pytest.raises(ValueError, match="version"):
        MetricReport.from_dict({"schema": SCHEMA, "schema_version": 9})


def test_summary_lists_metrics():
    text = _report().summary()
    for needle in ("FID", "rank-1", "mAP", "queries skipped", "infrared rate", "synthetic"):
        assert needle in text
    assert "rank-5" not in text
    assert MetricReport().summary() == ""
