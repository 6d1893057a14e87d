import math

import numpy as np
import pytest

from fedirm import cli, gradcheck
from fedirm.config import ExperimentConfig, config_from_text, config_to_text, load_config
from fedirm.errors import ConfigError

TINY = """
[experiment]
seed = 4
clients = 4
labeled = 1
rounds = 2

[data]
n_classes = 3
per_class = 30
dim = 4
spread = 1.0

[model]
hidden = 6

[local]
batch_size = 8
lr = 0.01
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_defaults_follow_protocol():
    cfg = ExperimentConfig().resolved()
    assert (cfg.clients, cfg.labeled, cfg.rounds) == (10, 2, 100)
    assert cfg.effective_unlabeled == 8
    loc = cfg.local
    assert (loc.tau, loc.mc_passes, loc.entropy_threshold, loc.warmup_horizon, loc.local_epochs) == \
        (2.0, 8, math.log(2), 30, 1)
    assert loc.batch_size == 16  # synthetic data
    img = config_from_text("[data]\nsource = idx\nimages = a\nlabels = b\n").resolved()
    assert img.local.batch_size == 48


def test_all_labeled_forces_every_client_labeled():
    cfg = config_from_text("[experiment]\nmode = fedavg_all_labeled\n").resolved()
    assert cfg.labeled == cfg.clients == 10
    assert cfg.effective_unlabeled == 0


@pytest.mark.parametrize("text", [
    "[experiment]\nrounds_ = 3\n",
    "[optimizer]\nlr = 1\n",
    "[local]\nlr = fast\n",
    "[experiment]\nlabeled = 11\n",
    "[experiment]\nmode = magic\n",
    "[local]\ntau = 0\n",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        config_from_text(text).resolved()


def test_ln2_literal_accepted():
    assert config_from_text("[local]\nentropy_threshold = ln2\n").local.entropy_threshold == math.log(2)


def test_config_echo_round_trips(tiny_config, tmp_path):
    cfg = load_config(tiny_config).resolved()
    echo = config_from_text(config_to_text(cfg)).resolved()
    assert echo == cfg
    assert cli.main(["run", "--config", str(tiny_config), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--config", str(tmp_path / "a" / "config.resolved"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.ini"
    assert cli.main(["run", "--config", str(missing)]) != 0
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    assert str(missing) in err
    assert err.startswith("fedirm: error kind=ConfigError")


def test_flag_overrides(tiny_config, capsys):
    assert cli.main(["run", "--config", str(tiny_config), "--seed", "9", "--mode", "fed_consistency",
                     "--print-config"]) == 0
    cfg = config_from_text(capsys.readouterr().out)
    assert cfg.seed == 9 and cfg.mode == "fed_consistency"


def test_run_writes_outputs(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert "test_auc=" in capsys.readouterr().out
    for name in ("metrics.csv", "config.resolved", "test_report.txt", "checkpoints/final.bin",
                 "checkpoints/best.bin", "relations/round_0.csv"):
        assert (out / name).is_file(), name


def test_dump_relations_from_checkpoint(tiny_config, tmp_path):
    out = tmp_path / "run"
    cli.main(["run", "--config", str(tiny_config), "--out", str(out)])
    dump = tmp_path / "rel.csv"
    assert cli.main(["dump-relations", "--config", str(tiny_config), "--checkpoint",
                     str(out / "checkpoints" / "final.bin"), "--out", str(dump)]) == 0
    lines = dump.read_text().splitlines()
    assert lines[0] == "matrix,class,e0,e1,e2,valid"
    assert [line.split(",")[0] for line in lines[1:]] == \
        ["labeled_aggregate"] * 3 + ["unlabeled"] * 3 + ["abs_difference"] * 3


def test_dump_relations_bad_checkpoint(tiny_config, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert cli.main(["dump-relations", "--config", str(tiny_config), "--checkpoint", str(bad)]) == 2
    assert "kind=FormatError" in capsys.readouterr().err


def test_gradcheck_healthy(capsys):
    assert cli.main(["gradcheck", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    for name in ("cross_entropy", "consistency", "irm"):
        assert name in out


def test_gradcheck_negative_control(monkeypatch, capsys):
    honest = gradcheck.LOSSES["irm"]

    def corrupted(*args):
        loss, grads = honest(*args)
        return loss, grads.scaled(1.5)

    monkeypatch.setitem(gradcheck.LOSSES, "irm", corrupted)
    assert cli.main(["gradcheck", "--trials", "3"]) != 0
    assert "loss=irm" in capsys.readouterr().err


# --- sweep ----------------------------------------------------------------------------

def test_sweep_row_count(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDIRM_THREADS", "1")
    base = load_config(tiny_config).resolved()
    base.out_dir = str(tmp_path)
    base.clients = 6
    rows = cli.run_sweep(base, "n", [1, 2], [0, 1])
    assert len(rows) == 2 * 3
    assert {(r["value"], r["mode"]) for r in rows} == {(v, m) for v in (1, 2) for m in cli.SWEEP_MODES}
    assert all(r["seeds_ok"] == 2 for r in rows)


def test_sweep_single_cell_matches_run(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDIRM_THREADS", "1")
    base = load_config(tiny_config).resolved()
    base.out_dir = str(tmp_path / "sweep")
    rows = cli.run_sweep(base, "m", [1], [4], modes=("fedirm",))
    assert cli.main(["run", "--config", str(tiny_config), "--out", str(tmp_path / "run")]) == 0
    sweep_csv = tmp_path / "sweep" / "m=1" / "fedirm" / "seed=4" / "metrics.csv"
    assert sweep_csv.read_bytes() == (tmp_path / "run" / "metrics.csv").read_bytes()
    assert rows[0]["auc_std"] == 0.0


def test_sweep_records_cell_failures(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDIRM_THREADS", "1")
    real = cli._run_cell

    def flaky(cfg):
        if cfg.mode == "fed_consistency":
            raise FloatingPointError("diverged")
        return real(cfg)

    monkeypatch.setattr(cli, "_run_cell", flaky)
    base = load_config(tiny_config).resolved()
    base.out_dir = str(tmp_path)
    rows = cli.run_sweep(base, "n", [1], [0])
    bad = [r for r in rows if r["mode"] == "fed_consistency"][0]
    assert bad["seeds_failed"] == 1 and "diverged" in bad["errors"]
    assert np.isnan(bad["auc_mean"])
    assert all(r["seeds_ok"] == 1 for r in rows if r["mode"] != "fed_consistency")


def test_sweep_rejects_axis_value_too_large(tiny_config, tmp_path, capsys):
    code = cli.main(["sweep", "--config", str(tiny_config), "--axis", "n", "--values", "8",
                     "--out", str(tmp_path)])
    assert code == 2
    assert "n=8" in capsys.readouterr().err


def test_sweep_default_grid_shape():
    assert cli.SWEEP_AXES["n"] == (1, 2, 4, 8)
    assert cli.SWEEP_AXES["m"] == (1, 2, 3, 4)
    assert ExperimentConfig().labeled == 2


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("FEDIRM_THREADS", "3")
    assert cli.sweep_workers(10) == 3
    assert cli.sweep_workers(2) == 2
