import json

import numpy as np
import pytest

from pillfscil.metrics import (EvalReport, ReportError, SessionResult, Track, accuracy,
                               average_accuracy, confusion_csv, confusion_matrix, emit_report,
                               load_report, performance_drop, report_csv, round_half_up, row_normalized)

from _table1 import PD_MISPRINTS, ROWS, row_id


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 75.0
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])


def test_aa_and_pd_examples():
    assert round_half_up(average_accuracy([96.38, 94.54, 92.74, 92.03, 91.04, 90.41, 90.68, 90.66, 89.59])) == 92.01
    assert average_accuracy([73.2]) == 73.2
    assert round_half_up(average_accuracy([82.26, 79.52, 73.65, 70.92, 67.52, 66.35, 62.36, 59.24, 58.40])) == 68.91
    assert round_half_up(performance_drop([96.38, 94.54, 92.74, 92.03, 91.04, 90.41, 90.68, 90.66, 89.59])) == 6.79
    assert performance_drop([80.0, 80.0, 80.0]) == 0.0
    assert round_half_up(performance_drop([96.22, 92.84, 89.98, 89.31, 87.80, 86.72, 87.09, 86.67, 84.73])) == 11.49
    for f in (average_accuracy, performance_drop):
        with pytest.raises(ValueError):
            f([])


def test_round_half_up():
    assert round_half_up(92.005) == 92.01
    assert round_half_up(0.125) == 0.13
    assert round_half_up(-1.005) == -1.01
    assert round_half_up(2.0) == 2.0


@pytest.mark.parametrize("row", [r for r in ROWS], ids=row_id)
def test_table_aa_cells(row):
    _, _, accs, aa, _ = row
    assert abs(round_half_up(average_accuracy(accs)) - aa) <= 0.005


@pytest.mark.parametrize("row", [r for r in ROWS if (r[0], r[1]) not in PD_MISPRINTS], ids=row_id)
def test_table_pd_cells(row):
    _, _, accs, _, pd = row
    assert abs(round_half_up(performance_drop(accs)) - pd) <= 0.005


@pytest.mark.parametrize("row", [r for r in ROWS if (r[0], r[1]) in PD_MISPRINTS], ids=row_id)
def test_table_pd_misprints_are_off_by_one_cent(row):
    # first minus last of the published row is exact at 2 decimals; the cell is not
    _, _, accs, _, pd = row
    assert abs(round_half_up(performance_drop(accs)) - pd) == pytest.approx(0.01, abs=1e-9)


def test_confusion_matrix_conserves_counts():
    labels = np.array([0, 0, 1, 1, 1, 2])
    preds = np.array([0, 1, 1, 1, 2, 2])
    cm = confusion_matrix(preds, labels, 3)
    assert cm.sum() == 6
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(labels))
    np.testing.assert_allclose(row_normalized(cm).sum(axis=1), 1.0)
    res = SessionResult.from_predictions(1, preds, labels, 3)
    assert res.accuracy == pytest.approx(100 * np.trace(cm) / 6)
    assert res.per_class == {0: 50.0, 1: pytest.approx(200 / 3), 2: 100.0}
    assert res.subset_accuracy([0, 1]) == 60.0
    res.check()


def test_row_normalized_handles_empty_rows():
    np.testing.assert_array_equal(row_normalized([[0, 0], [1, 3]]), [[0, 0], [0.25, 0.75]])


def _report(accs=(90.0, 85.0, 80.0)):
    tracks = []
    for name in ("softmax", "ncm"):
        sessions = []
        for i, a in enumerate(accs):
            n = i + 2
            labels = np.repeat(np.arange(n), 4)
            preds = labels.copy()
            preds[: int(round((100 - a) / 100 * labels.size))] = n - 1
            sessions.append(SessionResult.from_predictions(i, preds, labels, n, name))
        tracks.append(Track(name, sessions))
    return EvalReport(7, {"run": {"seed": 7}}, tracks, ["a warning"], {"started": "t0"})


def test_emit_and_load_json(tmp_path):
    rep = _report()
    path = tmp_path / "r.json"
    emit_report(rep, path)
    back = load_report(path)
    assert back.to_dict() == rep.to_dict()
    d = json.loads(path.read_text())
    for key in ("schema_version", "seed", "config", "tracks", "warnings"):
        assert key in d
    t = d["tracks"][0]
    assert set(t) == {"name", "sessions", "aa", "pd"}
    assert set(t["sessions"][0]) >= {"id", "accuracy", "per_class", "confusion"}


def test_payload_excludes_timestamps():
    a, b = _report(), _report()
    b.timestamps = {"started": "other"}
    assert a.payload() == b.payload()
    assert "timestamps" not in a.payload()


def test_load_rejects_inconsistent_aa(tmp_path):
    d = _report().to_dict()
    d["tracks"][0]["aa"] += 0.5
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ReportError, match="AA"):
        load_report(path)


def test_load_rejects_bad_schema(tmp_path):
    path = tmp_path / "bad.json"
    d = _report().to_dict()
    del d["warnings"]
    path.write_text(json.dumps(d))
    with pytest.raises(ReportError, match="warnings"):
        load_report(path)
    d = _report().to_dict()
    d["tracks"][1]["sessions"][0]["accuracy"] = 12.0
    path.write_text(json.dumps(d))
    with pytest.raises(ReportError, match="trace"):
        load_report(path)
    path.write_text("{not json")
    with pytest.raises(ReportError):
        load_report(path)


def test_csv_outputs():
    rep = _report()
    rows = report_csv(rep).splitlines()
    assert rows[0] == "track,session,accuracy"
    accs = rep.tracks[0].accuracies
    assert f"softmax,AA,{round_half_up(sum(accs) / 3):.2f}" in rows
    assert f"ncm,PD,{round_half_up(accs[0] - accs[-1]):.2f}" in rows
    assert len(rows) == 1 + 2 * (3 + 2)
    cm_rows = confusion_csv(rep.tracks[0].sessions[1]).splitlines()
    assert cm_rows[0] == "true,predicted,count,fraction"
    assert len(cm_rows) == 1 + 9
