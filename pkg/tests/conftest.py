import pytest

from pillfscil.config import Config
from pillfscil.sessions import build_protocol


def tiny_config(seed=0, **overrides):
    """A few-second protocol: 4 base classes, 2 sessions of 2-way 3-shot, 16 px."""
    cfg = Config().replace(
        data={"n_base_classes": 4, "n_sessions": 2, "n_way": 2, "k_shot": 3, "train_per_class": 40,
              "test_per_class": 10, "image_size": 16},
        model={"hidden_dims": (32,), "feature_dim": 8},
        stage1={"learning_rate": 0.05, "batch_size": 32},
        stage2={"n_stored": 3},
        pfs={"n_pseudo": 4},
        run={"seed": seed, "epoch_scale": 0.3},
    )
    return cfg.replace(**overrides) if overrides else cfg


@pytest.fixture(scope="session")
def tiny():
    cfg = tiny_config()
    sessions, _ = build_protocol(cfg)
    return cfg, sessions


# acceptance bookkeeping: tests marked ``criterion(n, title, limit=seconds)``
# are grouped and reported as one PASS/FAIL line per criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title, limit=None): acceptance criterion n")


def pytest_itemcollected(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", (m.args[0], m.args[1], m.kwargs.get("limit"))))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        n, title, limit = props["criterion"]
        entry = _CRITERIA.setdefault(n, {"title": title, "limit": limit, "ok": 0, "n": 0, "time": 0.0})
        entry["n"] += 1
        entry["ok"] += int(report.passed)
        entry["time"] += report.duration


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        in_time = e["limit"] is None or e["time"] < e["limit"]
        verdict = "PASS" if e["ok"] == e["n"] and in_time else "FAIL"
        limit = "" if e["limit"] is None else f" (limit {e['limit']:g} s)"
        terminalreporter.write_line(
            f"criterion {n} {verdict}: {e['title']} [{e['ok']}/{e['n']} checks, {e['time']:.2f} s{limit}]")
