import hashlib
import os
import signal
import subprocess
import sys

import pytest

from fogsound import sim
from fogsound.cli import main, parse_spec
from fogsound.errors import InvalidConfig


def run_cli(*argv, **kw):
    return subprocess.run([sys.executable, "-m", "fogsound.cli", *map(str, argv)],
                          capture_output=True, text=True, timeout=120, **kw)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["gen-corpus", str(root), "--clips-per-class", "10", "--duration", "2", "--seed", "5"]) == 0
    return root


@pytest.fixture(scope="module")
def model_file(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.bin"
    assert main(["train", str(corpus), str(path), "--epochs", "300"]) == 0
    return path


def test_gen_corpus_fifty_per_class(tmp_path):
    assert main(["gen-corpus", str(tmp_path / "a"), "--seed", "1"]) == 0
    wavs = sorted((tmp_path / "a").rglob("*.wav"))
    assert len(wavs) == 500
    assert all(p.stat().st_size == 128_044 for p in wavs)
    assert len((tmp_path / "a" / "index.csv").read_text().splitlines()) == 501
    assert main(["gen-corpus", str(tmp_path / "b"), "--seed", "1"]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_train_accuracy(corpus, model_file, capsys):
    out = model_file.parent / "again.bin"
    assert main(["train", str(corpus), str(out), "--epochs", "500"]) == 0
    acc = float(capsys.readouterr().out.split()[-1])
    assert acc >= 0.95
    assert out.read_bytes()[:4] == b"FMLP"


def test_train_zero_epochs_is_chance(corpus, tmp_path, capsys):
    assert main(["train", str(corpus), str(tmp_path / "m.bin"), "--epochs", "0"]) == 0
    acc = float(capsys.readouterr().out.split()[-1])
    # 30 held-out clips, 3 per class; an untrained net lands near one class in ten
    assert acc <= 0.25


def test_extract_and_classify(corpus, model_file, tmp_path, capsys):
    wav = next((corpus / "fold1").glob("*.wav"))
    assert main(["extract", str(wav), "--binary", "-o", str(tmp_path / "f.bin")]) == 0
    assert (tmp_path / "f.bin").stat().st_size == 1544
    assert main(["extract", str(wav)]) == 0
    assert len(capsys.readouterr().out.split()) == 193
    assert main(["classify", str(model_file), str(wav)]) == 0
    assert 0 <= int(capsys.readouterr().out.split()[0]) <= 9


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["node", "h:1", "1", "config9", "synth:1"]) == 1
    assert main(["node", "127.0.0.1:1", "1", "config1", "synth:1"]) == 1  # needs --model
    assert main(["train", str(tmp_path / "missing"), str(tmp_path / "m.bin")]) == 2
    assert main(["classify", str(tmp_path / "missing.bin"), "x.wav"]) == 2
    assert main(["node", "127.0.0.1:1", "1", "proposed", "synth:1"]) == 2  # nothing listening
    assert run_cli("--help").returncode == 0
    assert run_cli("bogus").returncode == 1


def spec_file(tmp_path, text, name="spec.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_simulate_latency_rows(tmp_path):
    spec = spec_file(tmp_path, "experiment: latency\nnode_counts: [4, 8, 12]\nseed: 3\n")
    assert main(["simulate", str(spec), str(tmp_path / "a.csv")]) == 0
    assert main(["simulate", str(spec), str(tmp_path / "b.csv")]) == 0
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == ",".join(sim.CSV_COLUMNS)
    assert len(lines) == 1 + 90
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_simulate_power_rows_and_report(tmp_path, capsys):
    spec = spec_file(tmp_path, '{"experiment": "power", "out_csv": "p.csv"}', "spec.json")
    assert main(["simulate", str(spec)]) == 0
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 1 + 60
    capsys.readouterr()
    assert main(["report", str(tmp_path / "p.csv")]) == 0
    body = [l for l in capsys.readouterr().out.splitlines() if l and not l.startswith("#")]
    assert [l.split()[1] for l in body] == ["config1", "config2", "proposed"]
    assert float(body[0].split()[5]) == pytest.approx(1852.0, rel=0.01)


def test_spec_validation(tmp_path):
    with pytest.raises(InvalidConfig):
        parse_spec(spec_file(tmp_path, "experiment: power\ncolour: blue\n"))
    with pytest.raises(InvalidConfig):
        parse_spec(spec_file(tmp_path, "experiment: power\nstage_durations: {record: 1}\n"))
    with pytest.raises(InvalidConfig):
        parse_spec(spec_file(tmp_path, "experiment: jitter\n"))
    with pytest.raises(InvalidConfig):
        parse_spec(spec_file(tmp_path, "experiment: power\nout_csv: nowhere/x.csv\n"))
    spec = parse_spec(spec_file(tmp_path, "experiment: [power, recorder]\niterations: 2\n"
                                          "stage_durations: {record_s: 8}\n"))
    assert spec.experiments == ["power", "recorder"]
    assert spec.base.stage_durations.record_s == 8.0
    assert main(["simulate", str(tmp_path / "spec.yaml"), str(tmp_path / "o.csv")]) == 0
    assert main(["simulate", str(spec_file(tmp_path, "bad: 1\n")), str(tmp_path / "o.csv")]) == 2


def test_out_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FOGSOUND_OUT_DIR", str(tmp_path))
    spec = spec_file(tmp_path, "experiment: recorder\niterations: 3\n")
    assert main(["simulate", str(spec)]) == 0
    assert len((tmp_path / "simulation.csv").read_text().splitlines()) == 1 + 6


def test_serve_and_nodes(model_file, tmp_path):
    results = tmp_path / "results.csv"
    server = subprocess.Popen(
        [sys.executable, "-m", "fogsound.cli", "serve", str(model_file), "--port", "0",
         "--nodes", "3", "--results", str(results), "--skip-after", "0.3"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        addr = server.stdout.readline().split()[-1]
        nodes = [subprocess.Popen([sys.executable, "-m", "fogsound.cli", "node", addr, str(i), cfg,
                                   f"synth:{i}", "--count", "2", "--model", str(model_file)],
                                  stdout=subprocess.PIPE, text=True)
                 for i, cfg in ((1, "config1"), (2, "config2"), (3, "proposed"))]
        outs = [n.communicate(timeout=120)[0] for n in nodes]
        assert [n.returncode for n in nodes] == [0, 0, 0]
        sizes = [{int(line.split()[1]) for line in o.splitlines()} for o in outs]
        assert sizes == [{13}, {128_053}, {1_553}]
    finally:
        server.send_signal(signal.SIGINT)
        server.wait(timeout=10)
    assert server.returncode == 0
    rows = results.read_text().splitlines()
    assert rows[0] == "timestamp,node_id,class_id"
    assert sorted(int(r.split(",")[1]) for r in rows[1:]) == [1, 1, 2, 2, 3, 3]


def test_serve_bind_failure(model_file):
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        env = dict(os.environ, FOGSOUND_PORT=str(port))
        proc = run_cli("serve", model_file, env=env)
    assert proc.returncode == 2
    assert "cannot bind" in proc.stderr
