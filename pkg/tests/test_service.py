"""Service and CLI plumbing: request/response schemas, error envelopes,
in-process handlers vs HTTP round trips, and the command line front end."""

import json
import re

import numpy as np
import pytest
from fastapi.testclient import TestClient

from rode import cli, data, harness
from rode.errors import NumericalDivergence
from rode.service import app as service_app
from rode.service import schemas
from rode.service.app import create_app

TINY = dict(
    d=6, time_dim=3, dropout=0.0, lr=1e-2, epochs=2, solver_steps=2,
    grid=8, seed=3, split=(0.7, 0.15, 0.15), clamp_negative_w=False,
)


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Small synthetic corpus plus one trained checkpoint, shared read-only."""
    root = tmp_path_factory.mktemp("svc")
    out = harness.generate_synthetic(
        12, 8, seed=5, mean_length=5.0, out_dir=str(root)
    )
    cfg_patch = schemas.ConfigPatch(**TINY)
    req = schemas.TrainRequest(
        dataset=schemas.DatasetRef(
            graph=str(root / "graph.tsv"), features=str(root / "features.tsv")
        ),
        cascades=str(root / "cascades.tsv"),
        out=str(root / "model.ckpt"),
        config=cfg_patch,
    )
    resp = service_app.handle_train(req)
    assert resp.epochs == TINY["epochs"]
    return root, out


def _dataset_payload(root):
    return {"graph": str(root / "graph.tsv"), "features": str(root / "features.tsv")}


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok"
    assert isinstance(body["version"], str) and body["version"]


def test_synth_endpoint_writes_files(client, tmp_path):
    r = client.post(
        "/synth",
        json={"users": 10, "cascades": 4, "seed": 9, "out_dir": str(tmp_path)},
    )
    assert r.status_code == 200
    body = r.json()
    assert body["num_users"] == 10
    assert body["num_cascades"] == 4
    for key in ("graph", "features", "cascades", "teacher"):
        path = body["files"][key]
        assert path.startswith(str(tmp_path))
        with open(path) as fh:
            assert fh.read()


def test_train_eval_predict_flow(client, dataset, tmp_path):
    root, synth = dataset
    ckpt = str(tmp_path / "m.ckpt")
    r = client.post(
        "/train",
        json={
            "dataset": _dataset_payload(root),
            "cascades": str(root / "cascades.tsv"),
            "out": ckpt,
            "config": TINY,
        },
    )
    assert r.status_code == 200
    body = r.json()
    assert body["checkpoint"] == ckpt
    assert body["epochs"] == 2
    assert sum(body["split_sizes"]) == 8

    r = client.post(
        "/eval",
        json={
            "ckpt": ckpt,
            "dataset": _dataset_payload(root),
            "cascades": str(root / "cascades.tsv"),
            "ks": [1, 3],
            "eval_split": "test",
        },
    )
    assert r.status_code == 200
    body = r.json()
    assert body["evaluated_cascades"] >= 1
    rep = body["report"]
    assert set(rep["hits_at"]) == {"1", "3"}
    assert rep["hits_at"]["1"] <= rep["hits_at"]["3"]
    assert "H@" in body["table"]

    r = client.post(
        "/predict/next",
        json={
            "ckpt": ckpt,
            "dataset": _dataset_payload(root),
            "cascades": str(root / "cascades.tsv"),
        },
    )
    assert r.status_code == 200
    entries = r.json()["entries"]
    assert entries
    for e in entries:
        scores = [s for _, s in e["ranking"]]
        assert scores == sorted(scores, reverse=True)

    prefix_file = tmp_path / "prefix.tsv"
    c = synth.cascades[0]
    data.write_cascades([c.prefix(2)], str(prefix_file))
    r = client.post(
        "/predict/time",
        json={
            "ckpt": ckpt,
            "dataset": _dataset_payload(root),
            "prefix": str(prefix_file),
            "horizon": 100.0,
        },
    )
    assert r.status_code == 200
    preds = r.json()["predictions"]
    infected = {u for u, _ in c.events[:2]}
    assert len(preds) == 12 - len(infected)
    for p in preds:
        assert 0.0 <= p["t_sys"] <= 1.0
        assert p["t_wallclock"] == pytest.approx(p["t_sys"] * 100.0)
        assert p["min_distance"] >= 0.0


def test_validation_error_envelope(client, dataset):
    root, _ = dataset
    r = client.post(
        "/eval",
        json={
            "ckpt": "/no/such/file.ckpt",
            "dataset": _dataset_payload(root),
            "cascades": str(root / "cascades.tsv"),
        },
    )
    assert r.status_code == 400
    err = r.json()["error"]
    assert err["kind"] == "validation"
    assert "file.ckpt" in err["message"]


def test_request_schema_error_envelope(client):
    r = client.post("/synth", json={"users": 10})  # cascades and out_dir missing
    assert r.status_code == 400
    err = r.json()["error"]
    assert err["kind"] == "validation"
    assert "cascades" in err["message"] and "out_dir" in err["message"]
    # message must not leak server source paths
    assert "File \"" not in err["message"]


def test_divergence_error_envelope(client, dataset, tmp_path, monkeypatch):
    root, _ = dataset

    def boom(*a, **k):
        raise NumericalDivergence("loss went non-finite", step=4)

    monkeypatch.setattr(harness, "train", boom)
    r = client.post(
        "/train",
        json={
            "dataset": _dataset_payload(root),
            "cascades": str(root / "cascades.tsv"),
            "out": str(tmp_path / "x.ckpt"),
            "config": TINY,
        },
    )
    assert r.status_code == 500
    err = r.json()["error"]
    assert err["kind"] == "divergence"
    assert err["step"] == 4


def test_num_users_inference(tmp_path):
    graph = tmp_path / "g.tsv"
    graph.write_text("# comment\n0\t3\n1\t2\n")
    ref = schemas.DatasetRef(graph=str(graph))
    assert service_app._resolve_num_users(ref) == 4

    feats = tmp_path / "f.tsv"
    feats.write_text("\n".join("0.0\t1.0" for _ in range(6)) + "\n")
    ref = schemas.DatasetRef(graph=str(graph), features=str(feats))
    assert service_app._resolve_num_users(ref) == 6

    ref = schemas.DatasetRef(graph=str(graph), num_users=9)
    assert service_app._resolve_num_users(ref) == 9


# -- CLI ------------------------------------------------------------------------


def _run(argv):
    return cli.main(argv)


def test_cli_synth_train_eval_roundtrip(tmp_path, capsys):
    d = tmp_path / "corpus"
    assert _run([
        "synth", "--users", "12", "--cascades", "8", "--seed", "5",
        "--mean-length", "5.0", "--out-dir", str(d),
    ]) == 0
    out = capsys.readouterr().out
    assert "num_cascades\t8" in out

    ckpt = str(tmp_path / "model.ckpt")
    assert _run([
        "train", "--graph", str(d / "graph.tsv"),
        "--features", str(d / "features.tsv"),
        "--cascades", str(d / "cascades.tsv"), "--out", ckpt,
        "--d", "6", "--time-dim", "3", "--dropout", "0.0", "--lr", "0.01",
        "--epochs", "2", "--solver-steps", "2", "--grid", "8", "--seed", "3",
        "--split", "0.7,0.15,0.15", "--clamp-negative-w", "off",
    ]) == 0
    out = capsys.readouterr().out
    assert f"checkpoint\t{ckpt}" in out
    assert "epochs\t2" in out

    report_file = tmp_path / "report.json"
    assert _run([
        "eval", "--ckpt", ckpt, "--graph", str(d / "graph.tsv"),
        "--features", str(d / "features.tsv"),
        "--cascades", str(d / "cascades.tsv"), "--ks", "1,3",
        "--eval-split", "test", "--json", str(report_file),
    ]) == 0
    out = capsys.readouterr().out
    assert "H@" in out and "RMSE" in out
    rep = json.loads(report_file.read_text())
    assert set(rep["hits_at"]) == {"1", "3"}
    assert rep["counts"]["rank_steps"] > 0


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("clic")
    _run([
        "synth", "--users", "12", "--cascades", "8", "--seed", "5",
        "--mean-length", "5.0", "--out-dir", str(d),
    ])
    ckpt = str(d / "model.ckpt")
    code = _run([
        "train", "--graph", str(d / "graph.tsv"),
        "--features", str(d / "features.tsv"),
        "--cascades", str(d / "cascades.tsv"), "--out", ckpt,
        "--d", "6", "--time-dim", "3", "--dropout", "0.0", "--lr", "0.01",
        "--epochs", "1", "--solver-steps", "2", "--grid", "8", "--seed", "3",
        "--split", "0.7,0.15,0.15",
    ])
    assert code == 0
    return d, ckpt


def test_cli_predict_next_format(cli_corpus, capsys):
    d, ckpt = cli_corpus
    capsys.readouterr()
    assert _run([
        "predict-next", "--ckpt", ckpt, "--graph", str(d / "graph.tsv"),
        "--features", str(d / "features.tsv"),
        "--cascades", str(d / "cascades.tsv"),
    ]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines
    pat = re.compile(r"^c\d{4}\t\d+\t\d+:-?\d+\.\d{6}(,\d+:-?\d+\.\d{6})*$")
    steps_by_msg: dict[str, list[int]] = {}
    for line in lines:
        assert pat.match(line), line
        mid, step, ranked = line.split("\t")
        steps_by_msg.setdefault(mid, []).append(int(step))
        scores = [float(tok.split(":")[1]) for tok in ranked.split(",")]
        assert scores == sorted(scores, reverse=True)
    for steps in steps_by_msg.values():
        assert steps == list(range(1, len(steps) + 1))


def test_cli_predict_time(cli_corpus, tmp_path, capsys):
    d, ckpt = cli_corpus
    cascades = data.load_cascades(str(d / "cascades.tsv"))
    prefix = cascades[0].prefix(2)
    prefix_file = tmp_path / "prefix.tsv"
    data.write_cascades([prefix], str(prefix_file))
    infected = set(prefix.users)
    target = next(u for u in range(12) if u not in infected)
    capsys.readouterr()
    assert _run([
        "predict-time", "--ckpt", ckpt, "--graph", str(d / "graph.tsv"),
        "--features", str(d / "features.tsv"),
        "--cascade-prefix", str(prefix_file),
        "--target-user", str(target), "--horizon", "250", "--grid", "16",
    ]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1
    tgt, t_sys, t_wall, min_d = lines[0].split("\t")
    assert int(tgt) == target
    assert 0.0 <= float(t_sys) <= 1.0
    assert float(t_wall) == pytest.approx(float(t_sys) * 250.0, abs=1e-3)
    assert float(min_d) >= 0.0

    # no --target-user: one line per uninfected user
    capsys.readouterr()
    assert _run([
        "predict-time", "--ckpt", ckpt, "--graph", str(d / "graph.tsv"),
        "--features", str(d / "features.tsv"),
        "--cascade-prefix", str(prefix_file), "--horizon", "250",
    ]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 12 - len(infected)


def test_cli_validation_exit_code(cli_corpus, capsys):
    d, _ = cli_corpus
    code = _run([
        "eval", "--ckpt", "/no/such.ckpt", "--graph", str(d / "graph.tsv"),
        "--cascades", str(d / "cascades.tsv"),
    ])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_cli_bad_flag_values(cli_corpus, capsys):
    d, ckpt = cli_corpus
    code = _run([
        "train", "--graph", str(d / "graph.tsv"),
        "--cascades", str(d / "cascades.tsv"), "--out", "/tmp/x.ckpt",
        "--split", "0.5,0.5",
    ])
    assert code == 1
    assert "--split" in capsys.readouterr().err

    code = _run([
        "eval", "--ckpt", ckpt, "--graph", str(d / "graph.tsv"),
        "--cascades", str(d / "cascades.tsv"), "--ks", "a,b",
    ])
    assert code == 1
    assert "--ks" in capsys.readouterr().err


def test_cli_divergence_exit_code(cli_corpus, capsys, monkeypatch):
    d, _ = cli_corpus

    def boom(*a, **k):
        raise NumericalDivergence("loss went non-finite", step=2)

    monkeypatch.setattr(harness, "train", boom)
    code = _run([
        "train", "--graph", str(d / "graph.tsv"),
        "--features", str(d / "features.tsv"),
        "--cascades", str(d / "cascades.tsv"), "--out", "/tmp/x2.ckpt",
        "--epochs", "1",
    ])
    assert code == 2
    assert "diverged" in capsys.readouterr().err


def test_cli_server_mode(cli_corpus, tmp_path, capsys, monkeypatch):
    d, ckpt = cli_corpus
    http_client = TestClient(create_app())

    def fake_post(url, json=None, timeout=None):
        import httpx

        return http_client.post(httpx.URL(url).path, json=json)

    monkeypatch.setattr("httpx.post", fake_post)

    assert _run([
        "--server", "http://svc", "eval", "--ckpt", ckpt,
        "--graph", str(d / "graph.tsv"), "--features", str(d / "features.tsv"),
        "--cascades", str(d / "cascades.tsv"), "--ks", "1,3", "--json", "-",
    ]) == 0
    out = capsys.readouterr().out
    assert "H@" in out
    assert '"hits_at"' in out

    # server-side validation errors surface as exit code 1
    code = _run([
        "--server", "http://svc", "eval", "--ckpt", "/no/such.ckpt",
        "--graph", str(d / "graph.tsv"),
        "--cascades", str(d / "cascades.tsv"),
    ])
    assert code == 1
    assert "error:" in capsys.readouterr().err

    # and server-side divergence as exit code 2
    def boom(*a, **k):
        raise NumericalDivergence("loss went non-finite", step=1)

    monkeypatch.setattr(harness, "train", boom)
    code = _run([
        "--server", "http://svc", "train", "--graph", str(d / "graph.tsv"),
        "--cascades", str(d / "cascades.tsv"), "--out", str(tmp_path / "y.ckpt"),
    ])
    assert code == 2


def test_config_patch_rejects_unknown_fields():
    with pytest.raises(Exception):
        schemas.ConfigPatch(nonsense=1)


def test_local_and_server_eval_agree(cli_corpus, tmp_path, capsys, monkeypatch):
    d, ckpt = cli_corpus
    args = [
        "eval", "--ckpt", ckpt, "--graph", str(d / "graph.tsv"),
        "--features", str(d / "features.tsv"),
        "--cascades", str(d / "cascades.tsv"), "--ks", "1,3", "--json", "-",
    ]
    assert _run(args) == 0
    local_out = capsys.readouterr().out

    http_client = TestClient(create_app())

    def fake_post(url, json=None, timeout=None):
        import httpx

        return http_client.post(httpx.URL(url).path, json=json)

    monkeypatch.setattr("httpx.post", fake_post)
    assert _run(["--server", "http://svc"] + args) == 0
    assert capsys.readouterr().out == local_out
