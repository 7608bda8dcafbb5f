import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cafield import cli, fields, so3
from cafield import canonicalizer as cz
from cafield import metrics as mt
from cafield.network import FieldNet

SMALL = ["--resolution", "16", "--lmax", "2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen", "--category", "wedge", "--count", 4, "--seed", 7, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def model(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data", dataset, "--out", out, "--epochs", 1, *SMALL) == 0
    return out


# -- gen ----------------------------------------------------------------------

def test_gen_deterministic_manifest(dataset, tmp_path):
    assert run("gen", "--category", "wedge", "--count", 4, "--seed", 7, "--out", tmp_path) == 0
    assert read(tmp_path / "manifest.txt") == read(dataset / "manifest.txt")
    assert read(tmp_path / "artifacts.txt") == read(dataset / "artifacts.txt")


def test_gen_grids_reload_and_match_manifest(dataset):
    man = fields.DatasetManifest.read(dataset / "manifest.txt")
    assert len(man.entries) == 4 and len({e.seed for e in man.entries}) == 4
    for e in man.entries:
        g = fields.grid_read(dataset / e.path)      # validated on load
        assert g.values.shape == (64, 64, 64)
        assert os.path.getsize(dataset / e.path) == fields.grid_file_size(64)
        inst, _ = fields.synth_generate(e.category, e.seed)
        np.testing.assert_array_equal(e.R_gt, inst.R_gt)
    rows = read(dataset / "artifacts.txt").decode().splitlines()
    assert len(rows) == 5 and all(len(r.split()) == 3 for r in rows)


def test_gen_count_zero(tmp_path):
    assert run("gen", "--count", 0, "--out", tmp_path) == 0
    assert fields.DatasetManifest.read(tmp_path / "manifest.txt").entries == []


def test_gen_unknown_category_is_usage(tmp_path):
    assert run("gen", "--category", "teapot", "--out", tmp_path) == cli.EXIT_USAGE


# -- config and usage ---------------------------------------------------------

def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nepochs = 5\nlr = 0.01   # inline\nsiamese = off\n")
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--lr", "0.02"])
    r = cli.resolve("train", args)
    assert r["epochs"] == 5            # file
    assert r["lr"] == 0.02             # CLI beats file
    assert r["siamese"] is False
    assert r["weight_decay"] == 1e-5   # default


def test_config_unknown_key_and_bad_value(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = 5\nlearning_rate = 1\n")
    assert run("train", "--config", bad) == cli.EXIT_USAGE
    bad.write_text("epochs = many\n")
    assert run("train", "--config", bad) == cli.EXIT_USAGE
    assert run("train", "--signal", "rgb") == cli.EXIT_USAGE
    assert run("train", "--config", tmp_path / "missing.cfg") == cli.EXIT_USAGE
    assert run("frobnicate") == cli.EXIT_USAGE
    assert run() == cli.EXIT_USAGE


@pytest.mark.parametrize("cmd", [c for c in cli.COMMANDS if c != "inspect"])
def test_help_documents_every_key(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([cmd, "--help"])
    assert e.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    for name in cli.COMMANDS[cmd][1]:
        k = cli.K[name]
        assert k.flag in text
        assert f"(default: {cli._show(cli.default_for(cmd, name))}; {k.provenance})" in text


def test_help_marks_published_hyperparameters(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for flag, val in (("--epochs", "300"), ("--lr", "0.0006"), ("--batch-size", "2"),
                      ("--weight-decay", "1e-05")):
        assert f"(default: {val}; published setting)" in text.split(flag, 2)[2]


def test_threads_env(monkeypatch):
    env = {"CAFIELD_THREADS": "2"}
    assert cli.apply_threads(env) == 2
    assert all(env[v] == "2" for v in cli.THREAD_VARS)
    assert cli.apply_threads({}) is None
    with pytest.raises(cli.UsageError):
        cli.apply_threads({"CAFIELD_THREADS": "zero"})
    monkeypatch.setenv("CAFIELD_THREADS", "-1")
    assert run("verify", "--groups", "sh") == cli.EXIT_USAGE


# -- train --------------------------------------------------------------------

def test_train_smoke_writes_loadable_checkpoint(model):
    net, meta = FieldNet.load(model / "model")
    assert net.config.l_max == 2 and meta["epochs"] == "1"
    log = (model / "train.log").read_text().splitlines()
    assert "lr=0.0006" in log[0] and "wd=1e-05" in log[0] and "batch=2" in log[0]
    assert "w_canon=2 w_ortho=1 w_siamese=1" in log[0]
    assert log[1] == "# epoch canon ortho siamese total"
    assert len(log[3].split()) == 5
    listed = {r.split()[0] for r in (model / "artifacts.txt").read_text().splitlines()}
    assert listed == {"train.log", "model/manifest.txt", "model/blob.bin"}


def test_train_no_siamese_log(dataset, tmp_path):
    assert run("train", "--data", dataset, "--out", tmp_path, "--epochs", 1, "--no-siamese",
               *SMALL) == 0
    log = (tmp_path / "train.log").read_text().splitlines()
    assert "siamese=off" in log[0] and "siamese" not in log[1]
    assert len(log[3].split()) == 4


def test_train_missing_manifest_is_data_error(tmp_path):
    assert run("train", "--data", tmp_path, "--out", tmp_path / "o") == cli.EXIT_DATA


def test_train_numeric_failure_exit(dataset, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise cz.NumericError("loss diverged at epoch 1")
    monkeypatch.setattr(cz, "train", boom)
    assert run("train", "--data", dataset, "--out", tmp_path, "--epochs", 1) == cli.EXIT_NUMERIC


def test_train_single_instance_siamese_is_usage(tmp_path):
    run("gen", "--count", 1, "--out", tmp_path / "d")
    assert run("train", "--data", tmp_path / "d", "--out", tmp_path / "o", "--epochs", 1,
               *SMALL) == cli.EXIT_USAGE


# -- canonicalize -------------------------------------------------------------

def test_canonicalize_records(dataset, model, tmp_path):
    args = ["canonicalize", "--data", dataset, "--checkpoint", model / "model",
            "--resolution", 16]
    assert run(*args, "--out", tmp_path / "a") == 0
    rows = (tmp_path / "a" / "canonical.txt").read_text().splitlines()[1:]
    assert len(rows) == 4
    for r in rows:
        vals = r.split()
        R = np.array([float(v) for v in vals[1:10]]).reshape(3, 3)
        assert abs(np.linalg.det(R) - 1) < 1e-12 and np.abs(R @ R.T - np.eye(3)).max() < 1e-12
    assert run(*args, "--out", tmp_path / "b") == 0
    assert read(tmp_path / "a" / "canonical.txt") == read(tmp_path / "b" / "canonical.txt")


def test_canonicalize_per_item_failure(dataset, model, tmp_path):
    good = dataset / fields.DatasetManifest.read(dataset / "manifest.txt").entries[0].path
    bad = tmp_path / "broken.cafg"
    bad.write_bytes(b"CAFG\x01\x00")
    empty = tmp_path / "empty.cafg"
    fields.grid_write(empty, fields.DensityGrid(np.zeros((16,) * 3), np.zeros(3), 2.0))
    code = run("canonicalize", "--checkpoint", model / "model", "--resolution", 16,
               "--out", tmp_path / "o", bad, good, empty)
    assert code == cli.EXIT_DATA
    rows = (tmp_path / "o" / "canonical.txt").read_text().splitlines()[1:]
    assert [r.split()[1] == "FAILED" for r in rows] == [True, False, True]
    assert "FormatError" in rows[0] and "DegenerateError" in rows[2]


def test_canonicalize_missing_checkpoint(dataset, tmp_path):
    assert run("canonicalize", "--data", dataset, "--checkpoint", tmp_path) == cli.EXIT_DATA


# -- eval ---------------------------------------------------------------------

def test_eval_oracle_and_identity(dataset, tmp_path):
    assert run("eval", "--data", dataset, "--out", tmp_path, "--canonicalizer", "oracle,identity",
               "--T", 2, "--n-points", 64) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    o, i = rep["results"]["oracle"]["wedge"], rep["results"]["identity"]["wedge"]
    assert f"{o['IC']:.2f}" == "0.00" and f"{o['GEC']:.2f}" == "0.00"
    # CC compares different instances: under the oracle it is the shape floor
    man = fields.DatasetManifest.read(dataset / "manifest.txt")
    insts = [mt.eval_instance(e.category, e.seed, n_points=64) for e in man.entries]
    floor = np.mean([mt.chamfer(mt.unit_scale(a.points), mt.unit_scale(b.points))
                     for a in insts for b in insts if a is not b])
    assert o["CC"] == pytest.approx(100 * floor, rel=1e-9)
    assert i["GEC"] > 0
    assert rep["scale"] == 100 and rep["annotations"]["ablation.siamese"] == {"on": 1.57, "off": 1.86}
    assert "reference averages" in (tmp_path / "report.txt").read_text()


def test_eval_model_and_pca(dataset, model, tmp_path):
    assert run("eval", "--data", dataset, "--out", tmp_path, "--checkpoint", model / "model",
               "--canonicalizer", "model,pca", "--T", 1, "--n-points", 64,
               "--resolution", 16) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert set(rep["results"]) == {"model", "pca"}
    assert rep["meta"]["model_config"]["l_max"] == "2"


def test_eval_without_dataset_and_bad_names(tmp_path):
    assert run("eval", "--data", "", "--count", 2, "--out", tmp_path,
               "--canonicalizer", "identity", "--T", 1, "--n-points", 32) == 0
    assert run("eval", "--canonicalizer", "magic", "--out", tmp_path) == cli.EXIT_USAGE


# -- verify -------------------------------------------------------------------

def test_verify_groups_pass(tmp_path, capsys):
    assert run("verify", "--groups", "sh,cg,losses", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "all 9 checks passed" in out
    assert (tmp_path / "verify.txt").read_text() == out


def test_verify_fault_fails_d1(capsys):
    assert run("verify", "--groups", "sh", "--inject-fault", "wigner-sign") == cli.EXIT_VERIFY
    out = capsys.readouterr().out
    assert "FAIL sh/d1_cartesian" in out
    assert not so3._FAULTS     # hook cleared afterwards
    assert run("verify", "--groups", "sh") == 0


def test_verify_bad_group():
    assert run("verify", "--groups", "sh,colour") == cli.EXIT_USAGE


# -- inspect ------------------------------------------------------------------

def test_inspect(dataset, model, capsys):
    entry = fields.DatasetManifest.read(dataset / "manifest.txt").entries[0]
    assert run("inspect", dataset / entry.path) == 0
    assert run("inspect", model / "model") == 0
    assert run("inspect", dataset) == 0
    out = capsys.readouterr().out
    assert "64x64x64" in out and "checkpoint" in out and "dataset" in out and "meta l_max = 2" in out
    assert run("inspect", dataset / "nothing.cafg") == cli.EXIT_DATA


def test_module_entry_point(tmp_path):
    env = dict(os.environ, CAFIELD_THREADS="1")
    p = subprocess.run([sys.executable, "-m", "cafield", "gen", "--count", "1", "--out",
                        str(tmp_path)], capture_output=True, text=True, env=env)
    assert p.returncode == 0 and (tmp_path / "manifest.txt").exists()
