"""Command-line entry point: ``fogsound <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import audio, classifier, features, placement, power, sim, wire
from .errors import FogSoundError, InvalidConfig

log = logging.getLogger("fogsound")

ENV_PORT = "FOGSOUND_PORT"
ENV_OUT_DIR = "FOGSOUND_OUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ------------------------------------------------------------ experiment spec

_SPEC_KEYS = {"experiment", "iterations", "node_counts", "seed", "bandwidth_Bps",
              "base_delay_ms", "fog_hop_ms", "jitter_ms", "clip_seconds", "stage_durations",
              "server_service", "power_params", "out_csv"}


@dataclass
class ExperimentSpec:
    experiments: list[str]
    base: sim.SimConfig
    iterations: int | None = None
    node_counts: tuple[int, ...] = (4, 8, 12)
    out_csv: Path | None = None


def _sub(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise InvalidConfig(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**{k: float(v) for k, v in raw.items()})


def parse_spec(path) -> ExperimentSpec:
    """Read a YAML/JSON experiment spec; unknown keys are rejected."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise InvalidConfig(f"cannot read spec {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"spec {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfig("spec must be a mapping")
    unknown = set(raw) - _SPEC_KEYS
    if unknown:
        raise InvalidConfig(f"unknown spec keys: {sorted(unknown)}")
    exp = raw.get("experiment", "all")
    exps = list(sim.EXPERIMENTS) if exp == "all" else ([exp] if isinstance(exp, str) else list(exp))
    for e in exps:
        if e not in sim.EXPERIMENTS:
            raise InvalidConfig(f"unknown experiment {e!r}")
    params = raw.get("power_params")
    base = sim.SimConfig(
        seed=int(raw.get("seed", 0)),
        bandwidth_Bps=float(raw.get("bandwidth_Bps", sim.BANDWIDTH_BPS)),
        base_delay_ms=float(raw.get("base_delay_ms", sim.BASE_DELAY_MS)),
        fog_hop_ms=float(raw.get("fog_hop_ms", sim.FOG_HOP_MS)),
        jitter_ms=float(raw.get("jitter_ms", 0.0)),
        clip_seconds=float(raw.get("clip_seconds", 4.0)),
        stage_durations=_sub(power.StageDurations, raw.get("stage_durations"), "stage_durations"),
        server_service=_sub(sim.ServerService, raw.get("server_service"), "server_service"),
        params=None if params is None else _params(params),
    )
    out_csv = raw.get("out_csv")
    if out_csv is not None:
        out_csv = (path.parent / out_csv) if not Path(out_csv).is_absolute() else Path(out_csv)
        if not out_csv.parent.is_dir():
            raise InvalidConfig(f"output directory {out_csv.parent} does not exist")
    iterations = raw.get("iterations")
    return ExperimentSpec(exps, base, None if iterations is None else int(iterations),
                          tuple(int(n) for n in raw.get("node_counts", (4, 8, 12))), out_csv)


def _params(raw) -> power.PowerParams:
    names = {f.name for f in fields(power.PowerParams)}
    if not isinstance(raw, dict) or set(raw) != names:
        raise InvalidConfig(f"power_params needs exactly {sorted(names)}")
    return power.PowerParams(**{k: float(v) for k, v in raw.items()})


def simulate_rows(spec: ExperimentSpec) -> list[sim.MetricsRow]:
    rows = []
    for e in spec.experiments:
        kw = {"node_counts": spec.node_counts}
        if spec.iterations is not None:
            kw["iterations"] = spec.iterations
        rows += sim.experiment_rows(e, spec.base, **kw)
    return rows


# ------------------------------------------------------------------ commands

def cmd_gen_corpus(args) -> int:
    n = audio.write_corpus(args.out_dir, args.clips_per_class, args.duration, args.seed)
    print(f"wrote {n} clips to {args.out_dir}")
    return 0


def cmd_extract(args) -> int:
    fv = features.extract_features(audio.load_wav(args.wav))
    if args.binary:
        Path(args.out).write_bytes(features.serialize_features(fv))
    elif args.out:
        Path(args.out).write_text(features.features_to_text(fv))
    else:
        sys.stdout.write(features.features_to_text(fv))
    return 0


def featurize(clips) -> classifier.Dataset:
    items = [(features.extract_features(c.clip), c.class_id) for c in clips if len(c.clip)]
    return classifier.Dataset.from_items(items)


def train_corpus(corpus_dir, epochs: int, lr: float, seed: int):
    loaded = audio.load_dataset_dir(corpus_dir)
    if loaded.skipped:
        log.warning("skipped %d unreadable files", loaded.skipped)
    data = featurize(loaded.clips)
    train_set, test_set = classifier.split_dataset(data, 0.7, seed)
    model = classifier.fit_normalizer(classifier.init_model(seed), train_set)
    model = classifier.train(model, train_set, classifier.TrainSpec(epochs, lr, seed))
    return model, classifier.evaluate(model, test_set)


def cmd_train(args) -> int:
    model, acc = train_corpus(args.corpus_dir, args.epochs, args.lr, args.seed)
    classifier.save_model(model, args.model_out)
    print(f"held-out accuracy: {acc:.4f}")
    return 0


def cmd_classify(args) -> int:
    model = classifier.load_model(args.model)
    cid = classifier.classify(model, features.extract_features(audio.load_wav(args.wav)))
    print(f"{cid} {audio.CLASS_NAMES[cid]}")
    return 0


def _registry(args) -> wire.NodeRegistry:
    if args.registry:
        return wire.NodeRegistry.load(args.registry)
    return wire.NodeRegistry((i + 1, sim.node_address(i)) for i in range(args.nodes))


def _wait_for_signal(stop: threading.Event):
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(0.2):
        pass


def cmd_serve(args) -> int:
    model = classifier.load_model(args.model)
    out_dir = Path(os.environ.get(ENV_OUT_DIR, "."))
    store = wire.ResultStore(args.results or out_dir / "results.csv")
    port = args.port if args.port is not None else int(os.environ.get(ENV_PORT, wire.DEFAULT_PORT))
    server = wire.serve(_registry(args), wire.PipelineHandler(model, store),
                        wire.loopback_transport(port, args.host), skip_after=args.skip_after)
    print(f"serving on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        _wait_for_signal(threading.Event())
    finally:
        server.stop()
    return 0


def _clips(source: str, count: int, seed: int):
    """Clip source: a WAV file, a corpus directory, or ``synth:<class>``."""
    if source.startswith("synth:"):
        k = int(source.split(":", 1)[1])
        return [audio.synth_clip(k, 4.0, seed + i).clip for i in range(count)]
    p = Path(source)
    if p.is_dir():
        return [c.clip for c in audio.load_dataset_dir(p).clips[:count]]
    return audio.segment(audio.load_wav(p)) or [audio.load_wav(p)]


def cmd_node(args) -> int:
    cfg = placement.preset(args.config)
    model = classifier.load_model(args.model) if args.model else None
    if cfg[placement.Stage.CLASSIFY] == placement.Tier.DEVICE and model is None:
        raise UsageError(f"{args.config} classifies on the device and needs --model")
    host, _, port = args.server.rpartition(":")
    port = int(port) if port else int(os.environ.get(ENV_PORT, wire.DEFAULT_PORT))
    with wire.NodeClient(host or "127.0.0.1", port) as client:
        for clip in _clips(args.clips, args.count, args.seed):
            msg = wire.node_message(cfg, args.node_id, clip, model)
            reply = client.send(msg)
            print(f"sent {msg.wire_size} bytes ({msg.kind.name}); "
                  f"reply {reply.status.name} class {reply.class_id}", flush=True)
    return 0


def cmd_simulate(args) -> int:
    spec = parse_spec(args.spec)
    out = args.out_csv or spec.out_csv
    if out is None:
        out = Path(os.environ.get(ENV_OUT_DIR, ".")) / "simulation.csv"
    rows = simulate_rows(spec)
    Path(out).write_text(sim.csv_text(rows))
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def summarize(rows):
    """Mean of each metric per (experiment, config, n_nodes), in first-seen order."""
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.experiment, r.config, r.n_nodes), []).append(r)
    out = []
    for (e, c, n), rs in groups.items():
        out.append((e, c, n, len(rs),
                    float(np.mean([r.avg_latency_ms for r in rs])),
                    float(np.mean([r.avg_power_mw for r in rs])),
                    float(np.mean([r.energy_mj for r in rs])),
                    float(np.mean([r.duration_s for r in rs]))))
    return out


def cmd_report(args) -> int:
    with open(args.csv, newline="") as fh:
        rows = sim.read_csv(fh)
    lines = ["# experiment config n_nodes iterations avg_latency_ms avg_power_mw energy_mj duration_s"]
    last = None
    for e, c, n, k, lat, pw_, mj, dur in summarize(rows):
        if last is not None and (e, c) != last:
            lines += ["", ""]  # gnuplot index separator
        last = (e, c)
        lines.append(f"{e} {c} {n} {k} {lat:.3f} {pw_:.3f} {mj:.3f} {dur:.3f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fogsound", description="IoT-fog urban sound sensing framework")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-corpus", help="write a synthetic labelled corpus")
    s.add_argument("out_dir")
    s.add_argument("--clips-per-class", type=int, default=50)
    s.add_argument("--duration", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("extract", help="extract a feature vector from a WAV file")
    s.add_argument("wav")
    s.add_argument("-o", "--out")
    s.add_argument("--binary", action="store_true", help="write the 1,544-byte binary form")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train the classifier on a corpus directory")
    s.add_argument("corpus_dir")
    s.add_argument("model_out")
    s.add_argument("--epochs", type=int, default=5000)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("classify", help="classify one WAV file")
    s.add_argument("model")
    s.add_argument("wav")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("serve", help="run the classification server on TCP")
    s.add_argument("model")
    s.add_argument("--port", type=int)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--registry", help="CSV with node_id,address columns")
    s.add_argument("--nodes", type=int, default=3, help="registry size when no file is given")
    s.add_argument("--results", help="results log path")
    s.add_argument("--skip-after", type=float, default=2.0)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("node", help="emulate one sensing node")
    s.add_argument("server", help="host:port")
    s.add_argument("node_id", type=int)
    s.add_argument("config", choices=sorted(placement.PRESETS))
    s.add_argument("clips", help="WAV file, corpus directory or synth:<class>")
    s.add_argument("--model", help="model file (needed for config1)")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_node)

    s = sub.add_parser("simulate", help="run simulated experiments from a spec file")
    s.add_argument("spec")
    s.add_argument("out_csv", nargs="?")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("report", help="summarise a simulation CSV (gnuplot layout)")
    s.add_argument("csv")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fogsound: {exc}", file=sys.stderr)
        return 1
    except (FogSoundError, OSError, ValueError) as exc:
        print(f"fogsound: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
