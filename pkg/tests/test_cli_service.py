import hashlib
import http.client
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from rfv.bank import Bank, load_bank, save_bank
from rfv.cli import main
from rfv.config import RunConfig
from rfv.errors import ConfigError
from rfv.retriever import EmbedderConfig, build_index, embed_text, mips_topk
from rfv.service import RetrievalService, serve_in_thread

TINY_CONFIG = {
    "seed": 3,
    "embedder": {"dim": 64},
    "featurizer": {"d_model": 16},
    "policy": {"d_hidden": 16, "heads": 2, "layers": 1, "steps": 4},
    "sim": {"demos_per_task": 1, "bank_per_task": 4, "seeds": [0], "episodes": 2},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY_CONFIG))
    return str(p)


@pytest.fixture
def synth_bank(tmp_path, tiny_config):
    out = tmp_path / "bank"
    assert main(["bank", "synth", "--out", str(out), "--config", tiny_config]) == 0
    return out


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_synth_counts_and_rebuild_identical(tmp_path, tiny_config, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    argv = ["bank", "synth", "--tasks", "Reach,Push", "--n-per-task", "5", "--config", tiny_config]
    assert main(argv + ["--out", str(a)]) == 0
    assert capsys.readouterr().out.startswith("10 entries")
    assert main(argv + ["--out", str(b)]) == 0
    for name in ("bank.jsonl", "meta.json"):
        assert _sha(a / name) == _sha(b / name)
    assert main(["bank", "synth", "--tasks", "Fly", "--out", str(a)]) == 2


def test_bank_build_bad_input(tmp_path, capsys):
    bad = tmp_path / "det.jsonl"
    bad.write_text("{not json\n")
    assert main(["bank", "build", "--input", str(bad), "--out", str(tmp_path / "b")]) != 0
    assert "CorruptManifest" in capsys.readouterr().err


def test_retrieve_matches_library(synth_bank, capsys):
    bank = load_bank(synth_bank)
    idx = build_index(bank, EmbedderConfig(bank.embedding_dim))
    for e in list(bank)[::3]:
        assert main(["retrieve", "--query", e.narration.text, "--k", "5", "--bank", str(synth_bank)]) == 0
        got = json.loads(capsys.readouterr().out)
        ref = mips_topk(idx, embed_text(e.narration.text, EmbedderConfig(idx.dim)), 5).to_json()
        assert got == ref
        assert got[0]["score"] == pytest.approx(1.0)
    assert main(["retrieve", "--query", "touch", "--bank", str(synth_bank)]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 3  # default k


def test_retrieve_user_errors(tmp_path, synth_bank, capsys):
    empty = save_bank(Bank(embedding_dim=8), tmp_path / "empty")
    assert main(["retrieve", "--query", "x", "--bank", str(empty)]) == 2
    assert "EmptyIndex" in capsys.readouterr().err
    assert main(["retrieve", "--query", "x", "--k", "0", "--bank", str(synth_bank)]) == 2
    assert main(["retrieve", "--query", "x", "--bank", str(tmp_path / "missing")]) != 0


def test_config_validation(tmp_path, monkeypatch):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"policy": {"no_such_key": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"policy": {"k_retrieved": 0}})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 11, "embedder": {"dim": 32}}))
    monkeypatch.setenv("RFV_CONFIG", str(p))
    cfg = RunConfig.load()
    assert cfg.seed == 11 and cfg.policy_config().embed_dim == 32
    p.write_text('{"seed": "x"}')
    assert main(["bank", "synth", "--out", str(tmp_path / "o")]) == 2


def test_train_deterministic_and_eval(tmp_path, tiny_config, synth_bank, capsys):
    outs = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        assert main(["train", "--out", str(out), "--bank", str(synth_bank), "--config", tiny_config,
                     "--seed", "5"]) == 0
        outs.append(out)
    for name in ("params.rfvb", "params.json", "config.json"):
        assert _sha(outs[0] / "checkpoint" / name) == _sha(outs[1] / "checkpoint" / name)
    assert (outs[0] / "loss.csv").read_text() == (outs[1] / "loss.csv").read_text()
    assert main(["eval", "--checkpoint", str(outs[0] / "checkpoint"), "--bank", str(synth_bank),
                 "--out", str(tmp_path / "ev"), "--config", tiny_config]) == 0
    rows = (tmp_path / "ev" / "success.csv").read_text().splitlines()
    assert rows[0] == "task,seed0,mean" and len(rows) == 6


def test_eval_expert_is_perfect(tmp_path, tiny_config, capsys):
    assert main(["eval", "--expert", "--out", str(tmp_path), "--config", tiny_config]) == 0
    last = (tmp_path / "success.csv").read_text().splitlines()[-1]
    assert last == "aggregate,1.0000,1.0000"


def test_ablate_k_table(tmp_path, tiny_config, synth_bank, capsys):
    assert main(["ablate", "--which", "k", "--out", str(tmp_path), "--bank", str(synth_bank),
                 "--config", tiny_config]) == 0
    head = (tmp_path / "ablation_k.csv").read_text().splitlines()[0].split(",")
    assert head == ["variant", "k=1", "k=3", "k=5", "k=7"]


def _request(port, method, path, body=None):
    conn = http.client.HTTPConnection("127.0.0.1", port, timeout=10)
    conn.request(method, path, body=body, headers={"Content-Type": "application/json"})
    resp = conn.getresponse()
    data = resp.read()
    conn.close()
    return resp.status, data


@pytest.fixture
def service(synth_bank):
    bank = load_bank(synth_bank)
    svc = RetrievalService(bank)
    srv, th = serve_in_thread(svc)
    yield svc, srv.server_address[1]
    srv.shutdown()
    srv.server_close()


def test_service_health_and_entries(service):
    svc, port = service
    assert _request(port, "GET", "/v1/health") == (200, b"ok")
    eid = svc.bank.ids()[0]
    status, data = _request(port, "GET", f"/v1/entries/{eid}")
    meta = json.loads(data)
    assert status == 200 and meta["entry_id"] == eid
    assert meta["clip"]["num_frames"] == 10 and "frames" not in meta["clip"]
    status, data = _request(port, "GET", "/v1/entries/nope")
    assert status == 404 and "error" in json.loads(data)


def test_service_validation(service):
    _, port = service
    for body in (b"{bad", b'"just a string"', b'{"query": "x", "k": 0}', b'{"query": ""}',
                 b'{"query": "x", "k": true}', b'{"query": "x", "extra": 1}', b'{"k": 2}'):
        status, data = _request(port, "POST", "/v1/retrieve", body)
        assert status == 400 and "error" in json.loads(data), body


def test_service_equals_library_concurrently(service):
    svc, port = service
    rng = np.random.default_rng(0)
    words = "touch place put push the cube ball block box on in towards lamp mug shelf red".split()
    queries = [(" ".join(rng.choice(words, rng.integers(1, 6))), int(rng.integers(1, 8)))
               for _ in range(100)]

    def one(qk):
        q, k = qk
        status, data = _request(port, "POST", "/v1/retrieve", json.dumps({"query": q, "k": k}).encode())
        return status, data, q, k

    with ThreadPoolExecutor(8) as pool:
        results = list(pool.map(one, queries))
    for status, data, q, k in results:
        ranked = mips_topk(svc.index, embed_text(q, svc.embedder), k)
        assert status == 200
        assert data == json.dumps({"results": ranked.to_json()}).encode()


def test_demos_then_train_from_disk(tmp_path, tiny_config, synth_bank, capsys):
    assert main(["demos", "--out", str(tmp_path / "d"), "--config", tiny_config]) == 0
    assert capsys.readouterr().out.startswith("4 episodes")
    argv = ["train", "--bank", str(synth_bank), "--config", tiny_config]
    assert main(argv + ["--demos", str(tmp_path / "d"), "--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0  # same seed: same demos collected
    assert (tmp_path / "a" / "loss.csv").read_text() == (tmp_path / "b" / "loss.csv").read_text()
