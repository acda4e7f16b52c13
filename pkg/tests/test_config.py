from pathlib import Path

import pytest
import tomli

from gmdlearn.config import ConfigError, load_config, parse_config

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.toml"

BASE = {"data": {"source": "synthetic", "signal_strength": [0.9, 0.4, 0.4]}}


def with_(section, **kw):
    raw = {k: dict(v) for k, v in BASE.items()}
    raw.setdefault(section, {}).update(kw)
    return raw


def test_example_config_parses():
    cfg = load_config(EXAMPLE)
    assert cfg.train["seeds"] == [0, 1, 2, 3, 4]
    assert cfg.train_config().sampler.k == 5
    assert Path(cfg.output["dir"]).is_absolute()


def test_defaults_are_resolved():
    cfg = parse_config(BASE)
    r = cfg.resolved()
    assert r["train"]["optimizer"]["name"] == "adam" and r["model"]["fusion"] == "mean"
    assert r["data"]["n_classes"] == 4 and r["diagnostics"]["window"] == 100


def test_echo_round_trip(tmp_path):
    cfg = load_config(EXAMPLE)
    p = tmp_path / "config.toml"
    p.write_text(cfg.to_toml())
    again = load_config(p)
    assert again.resolved() == cfg.resolved()
    assert again.section_hashes() == cfg.section_hashes()


@pytest.mark.parametrize(
    "raw,key",
    [
        ({"data": {"source": "synthetic", "signal_strength": [1.0]}, "trian": {}}, "trian"),
        (with_("train", stpes=10), "train.stpes"),
        (with_("train", optimizer={"lr": 0.0}), "train.optimizer.lr"),
        (with_("train", optimizer={"lr": -1}), "train.optimizer.lr"),
        (with_("train", steps="ten"), "train.steps"),
        (with_("train", gmd=1), "train.gmd"),
        (with_("train", pool="sometimes"), "train.pool"),
        (with_("train", k=1), "train.k"),
        (with_("model", fusion="max"), "model.fusion"),
        (with_("model", encoder=[[8, "relu"]]), "model"),
        (with_("data", splits=[0.5, 0.5]), "data.splits"),
        (with_("data", path="x.csv"), "data.path"),
        ({"model": {}}, "data"),
        ({"data": {"source": "file", "path": "x.csv", "schema": {"modality_cols": ["cols 0..1"]}}}, "data.schema.target_col"),
        ({"data": {"source": "web"}}, "data.source"),
        (with_("diagnostics", window=0), "diagnostics.window"),
        (with_("eval", pool="missing9"), "eval.pool"),
    ],
)
def test_validation_names_the_key(raw, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(raw)
    assert str(exc.value).startswith(key)


def test_gmd_flag_changes_only_the_train_hash():
    on = parse_config(with_("train", gmd=True)).section_hashes()
    off = parse_config(with_("train", gmd=False)).section_hashes()
    assert [k for k in on if on[k] != off[k]] == ["train"]


def test_file_source_resolves_paths(tmp_path):
    raw = {
        "data": {
            "source": "file",
            "path": "d.csv",
            "schema": {"modality_cols": ["cols 0..1", "col 2"], "target_col": "col 3",
                       "splits": {"train": "a.idx", "val": "b.idx", "test": "c.idx"}},
        },
        "train": {"k": 3},
    }
    cfg = parse_config(raw, tmp_path)
    assert cfg.data.resolved["path"] == str(tmp_path / "d.csv")
    assert cfg.data.schema().splits["val"] == str(tmp_path / "b.idx")
    assert cfg.data.schema().modality_cols == ((0, 1), (2, 2)) and cfg.data.schema().target_col == 3
    assert cfg.train["loss"] == "cross_entropy"
    reg = parse_config({**raw, "data": {**raw["data"], "schema": {**raw["data"]["schema"], "task": "regression"}}}, tmp_path)
    assert reg.train["loss"] == "mse"
    with pytest.raises(ConfigError, match="train.loss"):
        parse_config({**reg.resolved(), "train": {"k": 3, "loss": "cross_entropy"}}, tmp_path)
    with pytest.raises(ConfigError, match="^train.k"):
        parse_config({**raw, "train": {"k": 5}}, tmp_path)


def test_overrides():
    cfg = parse_config(BASE).with_seeds([7]).with_output("/tmp/x")
    assert cfg.train_config().seeds == (7,) and cfg.output["dir"] == "/tmp/x"


def test_bad_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[data\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")


def test_echo_is_valid_toml():
    assert tomli.loads(load_config(EXAMPLE).to_toml())["train"]["k"] == 5
