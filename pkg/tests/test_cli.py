import json
import subprocess
import sys

import pytest

from cmlm.cli import PIPELINE, main
from cmlm.config import ConfigInvalid, load_config

SMALL_INI = """\
[global]
preset = fixture
seed = 5
[corpus]
num_sentences = 1500
base_vocab_size = 300
num_eval_sentences = 30
[bpe]
num_merges = 400
[ngrams]
top_m = 300
[embed]
epochs = 2
dim = 32
[map]
rounds = 3
top_f = 300
[pretrain]
max_steps = 20
eval_every = 10
warmup_steps = 10
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL_INI, encoding="utf-8")
    return p


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(SMALL_INI, encoding="utf-8")
    runs = []
    for name in ("a", "b"):
        code = main(["pipeline", "-c", str(root / "small.ini"), "-w", str(root / name), "--with-baseline"])
        runs.append((code, root / name))
    return runs


def test_pipeline_runs_every_stage(pipeline_run):
    code, wd = pipeline_run[0]
    assert code == 0
    for name in ("bpe.codes", "vocab.txt", "ngrams.x", "emb.y.vec", "mapping.txt", "table.x-y.tsv",
                 "table.y-x.tsv", "encoder.ckpt", "metrics.jsonl", "align.encoder.json", "align.static.json",
                 "table.report.json", "config.ini"):
        assert (wd / name).exists(), name


def test_pipeline_is_deterministic(pipeline_run):
    (_, a), (_, b) = pipeline_run
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and not p.name.endswith(".prov.json"))
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and not p.name.endswith(".prov.json"))
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_artifacts_carry_provenance(pipeline_run):
    _, wd = pipeline_run[0]
    prov = json.loads((wd / "encoder.ckpt.prov.json").read_text())
    assert prov["stage"] == "pretrain" and prov["seed"] == 5
    assert set(prov) >= {"artifact", "stage", "config_hash", "seed", "tool_version", "created"}
    cfg = load_config(wd / "config.ini")
    assert prov["config_hash"] == cfg.digest()


def test_missing_input_is_a_stage_failure(tmp_path, ini, capsys):
    assert main(["pretrain", "-c", str(ini), "-w", str(tmp_path / "empty")]) == 3
    assert "stage pretrain failed" in capsys.readouterr().err


def test_unknown_config_key_exits_with_config_error(tmp_path, ini, capsys):
    assert main(["show-config", "-c", str(ini), "-s", "pretrain.nonsense=1"]) == 2
    err = capsys.readouterr().err
    assert "invalid configuration" in err and "nonsense" in err
    bad = tmp_path / "bad.ini"
    bad.write_text("[nowhere]\na = 1\n", encoding="utf-8")
    assert main(["show-config", "-c", str(bad)]) == 2


def test_usage_errors_exit_with_one():
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1


def test_show_config_applies_preset_and_overrides(ini, capsys):
    assert main(["show-config", "-c", str(ini), "-s", "pretrain.max_steps=7"]) == 0
    out = capsys.readouterr().out
    assert "max_steps = 7" in out and "dim = 64" in out


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        load_config(overrides=["pretrain.dim=30", "pretrain.heads=4"])
    with pytest.raises(ConfigInvalid):
        load_config(overrides=["pretrain.stream_len=512"])
    with pytest.raises(ConfigInvalid):
        load_config(overrides=["pretrain.max_steps=lots"])
    with pytest.raises(ConfigInvalid):
        load_config(overrides=["noequals"])
    assert load_config(overrides=["global.preset=full"]).pretrain.dim == 1024


def test_config_digest_tracks_values():
    a, b = load_config(), load_config(overrides=["global.seed=99"])
    assert a.digest() == load_config().digest() and a.digest() != b.digest()


def test_grad_check_command(capsys):
    assert main(["grad-check", "--coords", "2"]) == 0
    assert "max" in capsys.readouterr().out.lower()


def test_stage_order():
    assert PIPELINE[0] == "gen-corpus" and PIPELINE[-1] == "eval-table"


def test_console_entry_point_runs():
    r = subprocess.run([sys.executable, "-m", "cmlm.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("cmlm ")
