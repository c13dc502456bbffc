import hashlib
import json

import numpy as np
import pytest

from timeomni.cli import CHECKPOINT_FILE, EVAL_FILE, LOSSES_FILE, REPORT_FILE, load_run_checkpoint, main
from timeomni.config import ConfigError, load_config, parse_config
from timeomni.dataset import (
    Dataset,
    SeriesTarget,
    TaskInstance,
    TaskType,
    TimeSeries,
    generate_toy_suite,
    load_dataset,
    write_dataset,
)
from timeomni.numerics import load_checkpoint

TINY = """\
seed = 3
out_dir = "run"

[model]
d_llm = 8
n_layers = 1
n_heads = 2
d_enc = 4
num_prototypes = 4
reprog_heads = 2
expert_max_exponent = 16
head_lengths = [8, 16, 32, 64, 96]
max_new_tokens = 3

[train]
lr = 1e-3
epochs = 1

[data]
train = "data/dataset.jsonl"
eval = "data/dataset.jsonl"
"""

SIZES = "classification=2,anomaly=1,mcq=1,forecasting=2,forecasting_mv=1,imputation=1,event=1,synthesis=1"


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def workdir(tmp_path):
    assert main(["gen-toy", "--seed", "7", "--out", str(tmp_path / "data"), "--sizes", SIZES]) == 0
    (tmp_path / "run.toml").write_text(TINY)
    return tmp_path


# --- gen-toy ----------------------------------------------------------------


def test_gen_toy_defaults_cover_all_families(tmp_path, capsys):
    assert main(["gen-toy", "--out", str(tmp_path)]) == 0
    ds = load_dataset(tmp_path / "dataset.jsonl")
    assert {tt for _, tt in ds.manifest.values()} == set(TaskType)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest) == set(ds.manifest)


def test_gen_toy_same_seed_same_bytes(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-toy", "--seed", "7", "--out", str(tmp_path / d), "--sizes", SIZES]) == 0
    assert sha(tmp_path / "a" / "dataset.jsonl") == sha(tmp_path / "b" / "dataset.jsonl")


def test_gen_toy_sizes_flag(tmp_path):
    assert main(["gen-toy", "--out", str(tmp_path), "--sizes", "forecasting=50"]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["FOR01"]["count"] == 50


def test_gen_toy_bad_sizes(tmp_path, capsys):
    assert main(["gen-toy", "--out", str(tmp_path), "--sizes", "nonsense=3"]) == 2
    assert "nonsense" in capsys.readouterr().err


# --- config -----------------------------------------------------------------


def test_config_resolves_relative_paths(tmp_path):
    cfg = parse_config(TINY, tmp_path)
    assert cfg.data.train == tmp_path / "data" / "dataset.jsonl"
    assert cfg.train.seed == 3 and cfg.seed == 3
    assert cfg.model.head_lengths == (8, 16, 32, 64, 96)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError) as info:
        parse_config("[train]\nlearning_rate = 1\n")
    assert info.value.field == "train.learning_rate"
    with pytest.raises(ConfigError):
        parse_config("bogus = 1\n")


def test_config_reports_bad_toml():
    with pytest.raises(ConfigError):
        parse_config("[model\n")


# --- train ------------------------------------------------------------------


def test_missing_dataset_exits_2_naming_field(tmp_path, capsys):
    (tmp_path / "run.toml").write_text(TINY)
    assert main(["train", "--config", str(tmp_path / "run.toml")]) == 2
    assert "data.train" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.toml")]) == 2


def test_train_writes_artifacts_and_echoes_config(workdir):
    assert main(["train", "--config", str(workdir / "run.toml")]) == 0
    run = workdir / "run"
    assert (run / CHECKPOINT_FILE).is_file()
    lines = (run / LOSSES_FILE).read_text().splitlines()
    assert lines[0] == "step,lr,loss_u,loss_g"
    assert len(lines) > 1
    _, meta = load_checkpoint(run / CHECKPOINT_FILE)
    assert meta["config_text"].encode() == (workdir / "run.toml").read_bytes()


def test_train_is_deterministic(workdir):
    for out in ("r1", "r2"):
        assert main(["train", "--config", str(workdir / "run.toml"), "--out", str(workdir / out)]) == 0
    assert sha(workdir / "r1" / LOSSES_FILE) == sha(workdir / "r2" / LOSSES_FILE)
    assert sha(workdir / "r1" / CHECKPOINT_FILE) == sha(workdir / "r2" / CHECKPOINT_FILE)


def test_resume_matches_uninterrupted(workdir):
    cfg = str(workdir / "run.toml")
    assert main(["train", "--config", cfg, "--out", str(workdir / "full")]) == 0
    assert main(["train", "--config", cfg, "--out", str(workdir / "part"), "--max-steps", "2"]) == 0
    ck = str(workdir / "part" / CHECKPOINT_FILE)
    assert main(["train", "--config", cfg, "--out", str(workdir / "rest"), "--resume", ck]) == 0
    full = (workdir / "full" / LOSSES_FILE).read_text().splitlines()
    part = (workdir / "part" / LOSSES_FILE).read_text().splitlines()
    rest = (workdir / "rest" / LOSSES_FILE).read_text().splitlines()
    joined = part + rest[1:]
    assert len(joined) == len(full)
    for a, b in zip(joined[1:], full[1:]):
        va, vb = [float(x) for x in a.split(",")], [float(x) for x in b.split(",")]
        assert va[0] == vb[0]
        assert all(abs(x - y) <= 1e-9 for x, y in zip(va[2:], vb[2:]))
    m1, _, _ = load_run_checkpoint(workdir / "full" / CHECKPOINT_FILE)
    m2, _, _ = load_run_checkpoint(workdir / "rest" / CHECKPOINT_FILE)
    s1, s2 = m1.state(), m2.state()
    assert max(float(np.max(np.abs(s1[k] - s2[k]))) for k in s1) <= 1e-9


# --- eval / report ----------------------------------------------------------


def _trained(workdir):
    assert main(["train", "--config", str(workdir / "run.toml"), "--max-steps", "1"]) == 0
    return workdir / "run" / CHECKPOINT_FILE


def test_eval_is_byte_identical(workdir):
    ck = _trained(workdir)
    cfg = str(workdir / "run.toml")
    for out in ("e1", "e2"):
        assert main(["eval", "--config", cfg, "--checkpoint", str(ck), "--out", str(workdir / out)]) == 0
    assert sha(workdir / "e1" / EVAL_FILE) == sha(workdir / "e2" / EVAL_FILE)
    report = json.loads((workdir / "e1" / EVAL_FILE).read_text())
    ds = load_dataset(workdir / "data" / "dataset.jsonl")
    assert set(report["models"]["TimeOmni"]) == set(ds.manifest)


def test_eval_survives_oversized_instance(workdir):
    ck = _trained(workdir)
    ds = generate_toy_suite(1, {"forecasting": 1})
    huge = TaskInstance(
        "huge", "toy", "BIG", TaskType.FORECASTING, "p",
        TimeSeries(np.zeros(200 * 2**16 + 1, dtype=np.float32)), SeriesTarget(TimeSeries(np.ones(8))),
    )  # fmt: skip
    path = workdir / "mixed" / "dataset.jsonl"
    path.parent.mkdir()
    write_dataset(Dataset(ds.instances + (huge,)), path)
    out = workdir / "ev"
    rc = main(["eval", "--config", str(workdir / "run.toml"), "--checkpoint", str(ck),
               "--data", str(path), "--out", str(out)])  # fmt: skip
    assert rc == 0
    report = json.loads((out / EVAL_FILE).read_text())
    big = report["models"]["TimeOmni"]["BIG"]
    assert big["failures"] == {"TLS": 1}
    assert big["marker"] == "(0/1)"
    assert report["models"]["TimeOmni"]["FOR01"]["n_success"] == 1


def test_eval_missing_checkpoint(workdir, capsys):
    rc = main(["eval", "--config", str(workdir / "run.toml"), "--checkpoint", str(workdir / "x.tok1")])
    assert rc == 2
    assert "--checkpoint" in capsys.readouterr().err


def test_report_single_run_ranks_first(workdir, capsys):
    ck = _trained(workdir)
    cfg = str(workdir / "run.toml")
    assert main(["eval", "--config", cfg, "--checkpoint", str(ck), "--out", str(workdir / "e")]) == 0
    assert main(["report", "--runs", str(workdir / "e"), "--out", str(workdir / "rep")]) == 0
    merged = json.loads((workdir / "rep" / EVAL_FILE).read_text())
    for table in merged["rankings"].values():
        assert set(table["avg_rank"].values()) == {1.0}
    assert "AvgRk" in (workdir / "rep" / REPORT_FILE).read_text()


def test_report_merges_two_models(workdir):
    ck = _trained(workdir)
    a, b = workdir / "a", workdir / "b"
    cfg_b = workdir / "b.toml"
    cfg_b.write_text(TINY + '\n[eval]\nmodel_name = "Other"\n')
    assert main(["eval", "--config", str(workdir / "run.toml"), "--checkpoint", str(ck), "--out", str(a)]) == 0
    assert main(["eval", "--config", str(cfg_b), "--checkpoint", str(ck), "--out", str(b)]) == 0
    # make the second model fail every forecasting instance
    rep = json.loads((b / EVAL_FILE).read_text())
    rep["models"]["Other"]["FOR01"].update(n_success=0, metrics={"success_rate": 0.0}, failures={"TLS": 2})
    (b / EVAL_FILE).write_text(json.dumps(rep))
    assert main(["report", "--runs", str(a), str(b), "--out", str(workdir / "rep")]) == 0
    merged = json.loads((workdir / "rep" / EVAL_FILE).read_text())
    ranks = merged["rankings"]["generation"]["ranks"]["FOR01"]
    assert ranks == {"Other": 2.0, "TimeOmni": 1.0}
    text = (workdir / "rep" / REPORT_FILE).read_text()
    other = next(line for line in text.split("== generation")[1].splitlines() if line.startswith("Other"))
    assert "(0/1)" in other


def test_report_malformed_run(tmp_path):
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / EVAL_FILE).write_text("{}")
    assert main(["report", "--runs", str(tmp_path / "bad")]) == 2
    assert main(["report", "--runs", str(tmp_path / "missing")]) == 2


def test_load_config_keeps_raw_text(tmp_path):
    p = tmp_path / "c.toml"
    p.write_bytes(b"# comment kept\nseed = 1\n")
    assert load_config(p).text == "# comment kept\nseed = 1\n"


def test_gen_toy_holdout_split(tmp_path):
    assert main(["gen-toy", "--out", str(tmp_path), "--sizes", SIZES, "--holdout", "0.5"]) == 0
    full = load_dataset(tmp_path / "dataset.jsonl")
    train_ds = load_dataset(tmp_path / "train.jsonl")
    held = load_dataset(tmp_path / "held_out.jsonl")
    assert len(train_ds) + len(held) == len(full)
    assert {i.id for i in train_ds.instances}.isdisjoint(i.id for i in held.instances)
    assert main(["gen-toy", "--out", str(tmp_path / "x"), "--holdout", "1.5"]) == 2
