from pathlib import Path

import pytest

from pillfscil.config import Config, ConfigError, dump_config, load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_default_file_matches_built_in_defaults():
    assert load_config(CONFIGS / "default.toml").to_dict() == Config().to_dict()


def test_desk_file_only_scales_epochs():
    desk = load_config(CONFIGS / "desk.toml")
    assert desk.run.epoch_scale == 0.2
    assert [desk.epochs(s) for s in ("stage1", "stage2", "stage3")] == [20, 10, 10]
    assert desk.replace(run={"epoch_scale": 1.0}).to_dict() == Config().to_dict()


def test_dump_load_round_trip(tmp_path):
    cfg = Config().replace(model={"hidden_dims": (16, 8)}, pfs={"entropy_threshold": 0.25},
                           run={"seed": 2**63 + 5, "vcg": False})
    path = tmp_path / "c.toml"
    dump_config(cfg, path)
    assert load_config(path).to_dict() == cfg.to_dict()
    dump_config(Config(), path)
    assert load_config(path).pfs.entropy_threshold is None


def test_ablation_tokens():
    cfg = Config().with_ablation(["vcg", "ct"])
    assert cfg.switches() == {"vcg": False, "ct": False, "pfs": True, "us": True}
    with pytest.raises(ConfigError, match="foo"):
        Config().with_ablation(["foo"])


@pytest.mark.parametrize("text, pattern", [
    ("[stage1]\nmargin = -1\n", "margin"),
    ("[stage1]\nfold = 3\n", "fold"),
    ("[stage9]\nx = 1\n", "section"),
    ("[pfs]\nq = 1\n", "unknown key"),
    ("[run]\nvcg = maybe\n", "run.vcg"),
    ("[eval]\ntrack = \"both!\"\n", "track"),
    ("[stage3]\ntemperature = 0\n", "temperature"),
    ("[run]\nseed = -1\n", "seed"),
    ("not a config", "c.toml"),
])
def test_invalid_configs(tmp_path, text, pattern):
    path = tmp_path / "c.toml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=pattern):
        load_config(path)


def test_epochs_never_below_one():
    assert Config().replace(run={"epoch_scale": 0.0001}).epochs("stage3") == 1
