"""Acceptance criteria 1-10, one printed PASS/FAIL line each.

Run with ``pytest -v tests/test_acceptance.py``; lines go straight to the
terminal. Tolerances and runtime budgets are pinned here.
"""
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from cafield import canonicalizer as cz
from cafield import cli, fields, network, verify
from cafield import metrics as mt


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


def _group(report, n, group, budget, **kw):
    t = time.perf_counter()
    checks = verify.run([group], **kw)
    dt = time.perf_counter() - t
    ok = all(c.passed for c in checks) and dt < budget
    worst = "; ".join(f"{c.name} {c.value:.2e}{c.relation}{c.bound:.0e}" for c in checks)
    report(n, ok, f"{worst}; {dt:.1f}s < {budget}s")
    failed = [c.line() for c in checks if not c.passed]
    assert not failed, failed
    assert dt < budget


def test_criterion_01_sh_wigner(report):
    # l <= 3, 100 random (R, x): relation < 1e-9, homomorphism < 1e-8
    _group(report, 1, "sh", 10)


def test_criterion_02_cg(report):
    # equivariance < 1e-8, stacked projections orthogonal within 1e-9
    _group(report, 2, "cg", 30)


def test_criterion_03_lemmas(report):
    # local average 1e-4, density scaling 1e-6, gradient 1e-6 analytic / 5 dx^2 discrete
    _group(report, 3, "lemmas", 60)


def test_criterion_04_layers(report):
    # EQConv 1e-6, nonlinear stack 2e-4, pool 1e-6, head_E 1e-5, H 1e-5, P 1e-4;
    # 20 rotations, L_max 2, 16^3
    _group(report, 4, "layers", 300, l_max=2, resolution=16, rotations=20)


def test_criterion_05_gradcheck(report):
    # every op and the full loss graph on a ~20-point toy field, rel. err < 1e-4
    _group(report, 5, "gradcheck", 120)


def test_criterion_06_loss_identities(report):
    # canon 0 on exact reconstruction, ortho 0 on rotations and >= eps/2 at eps = 1e-3,
    # siamese equal to the O(n^2) oracle on 50-point sets
    _group(report, 6, "losses", 60)


def test_criterion_07_gec_degeneracy(report):
    # 5-instance asymmetric category: identity GEC x100 > 1.0, oracle < 1e-12
    _group(report, 7, "gec", 60)


# -- criterion 8: desk-scale training -----------------------------------------

def desk_instances():
    train = []
    for s in range(16):
        _, prov = fields.synth_generate("wedge", 100 + s)
        train.append(cz.TrainItem("wedge", prov, fields.scene_probe(prov)))
    test = [mt.eval_instance("wedge", 200 + s) for s in range(4)]
    return train, test


@pytest.mark.slow
def test_criterion_08_desk_training(report):
    t = time.perf_counter()
    train, test = desk_instances()
    nc = network.NetConfig(l_max=2, M=4)
    tc = cz.TrainingConfig(epochs=50, resolution=16, seed=0)
    net = network.FieldNet(nc, seed=0)
    pairs = mt.rotation_pairs(10, 0)
    ic0 = mt.instance_consistency(mt.ModelCanonicalizer(net, 16), test, pairs=pairs)
    net, records = cz.train(train, tc, nc, net=net)
    ic1 = mt.instance_consistency(mt.ModelCanonicalizer(net, 16), test, pairs=pairs)
    dt = time.perf_counter() - t
    loss_ratio = records[-1].total / records[0].total
    ic_ratio = ic1 / ic0
    ok = loss_ratio <= 0.5 and ic_ratio <= 0.5 and dt < 1800
    report(8, ok, f"loss ratio {loss_ratio:.3f} <= 0.5; test IC x100 {100 * ic0:.2f} -> "
                  f"{100 * ic1:.2f} (ratio {ic_ratio:.3f} <= 0.5); {dt:.0f}s < 1800s")
    assert loss_ratio <= 0.5
    assert ic_ratio <= 0.5
    assert dt < 1800


# -- criterion 9: ablation harness --------------------------------------------

@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("desk")
    assert cli.main(["gen", "--count", "4", "--seed", "3", "--out", str(d)]) == 0
    return d


ABLATIONS = {
    "signal": ["--signal", "xyz"],
    "weighting": ["--weighting", "local-average"],
    "siamese": ["--no-siamese"],
}


def test_criterion_09_ablation_harness(report, desk_data, tmp_path):
    small = ["--resolution", "16", "--lmax", "2"]
    rows, complete = [], True
    for name, flag in ABLATIONS.items():
        run = tmp_path / name
        assert cli.main(["train", "--data", str(desk_data), "--out", str(run), "--epochs", "2",
                         *small, *flag]) == 0
        assert cli.main(["eval", "--data", str(desk_data), "--out", str(run),
                         "--checkpoint", str(run / "model"), "--T", "2", "--n-points", "128",
                         "--resolution", "16"]) == 0
        rep = json.loads((run / "report.json").read_text())
        ann = rep["annotations"]
        for canon in ("model", "pca", "identity", "oracle"):
            r = rep["results"][canon]["wedge"]
            complete &= all(np.isfinite(r[k]) for k in ("IC", "CC", "GEC"))
        complete &= ann[f"ablation.{name}"] == mt.REFERENCE[f"ablation.{name}"]
        complete &= ann["ablation.signal"] == {"gradient": 1.57, "xyz": 1.95}
        complete &= ann["ablation.siamese"] == {"on": 1.57, "off": 1.86}
        rows.append(f"{name} GEC x100 {rep['results']['model']['wedge']['GEC']:.2f}")
    report(9, complete, "; ".join(rows) + " (reported, not gated); reference annotations present")
    assert complete


# -- criterion 10: determinism ------------------------------------------------

def _cli(cwd, *argv):
    cwd.mkdir(parents=True, exist_ok=True)
    p = subprocess.run([sys.executable, "-m", "cafield", *map(str, argv)],
                       capture_output=True, cwd=cwd)
    return p.returncode, p.stdout


def test_criterion_10_determinism(report, tmp_path):
    # two runs in separate directories with identical relative paths
    same = {}
    a, b = tmp_path / "a", tmp_path / "b"
    outs = [_cli(d, "verify", "--groups", "sh,cg,lemmas,losses,gec", "--out", "v") for d in (a, b)]
    same["verify"] = outs[0] == outs[1] and \
        (a / "v" / "verify.txt").read_bytes() == (b / "v" / "verify.txt").read_bytes()
    for d in (a, b):
        codes = [_cli(d, "gen", "--count", "2", "--seed", "5", "--out", "data")[0],
                 _cli(d, "train", "--data", "data", "--out", "run", "--epochs", "1",
                      "--resolution", "16", "--lmax", "2")[0],
                 _cli(d, "eval", "--data", "data", "--out", "eval", "--checkpoint", "run/model",
                      "--T", "1", "--n-points", "64", "--resolution", "16")[0]]
        assert codes == [0, 0, 0]
    for step in ("data", "run", "eval"):
        fa, fb = (a / step / "artifacts.txt").read_bytes(), (b / step / "artifacts.txt").read_bytes()
        same[step] = fa == fb and len(fa) > 0
    same["report"] = (a / "eval" / "report.json").read_bytes() == (b / "eval" / "report.json").read_bytes()
    ok = all(same.values())
    report(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok, same
