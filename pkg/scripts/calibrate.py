"""Offline fit of the shipped timing and power defaults.

Steps, all against the default link (2.5 MB/s, 2 ms):

1. handoff_s so the uncontended config2 round lasts 16.42 s;
2. classify_s so the uncontended config1 round lasts 57.77 s;
3. classify-from-audio service time by bisection so config2 at 12 nodes
   averages 300 ms over 10 iterations (handoff re-solved each step);
4. for each candidate extract_s, solve the 4x4 linear system mapping
   (p_idle, p_mic, p_cpu_busy, p_radio_tx) to the three config averages and
   the recorder delta; keep the candidate whose recording-state power is
   closest to the config1 average with every component >= 1 mW.

Prints the constants to paste into fogsound.power / fogsound.sim.
"""
from __future__ import annotations

import argparse
from dataclasses import replace

import numpy as np

from fogsound import power as pw
from fogsound import sim

TARGET_RUNTIME = {"config1": 57.77, "config2": 16.42}
TARGET_AVG_MW = {"config1": 1852.00, "config2": 1830.54, "proposed": 1786.86}
TARGET_DELTA_MW = 127.54
TARGET_JUMP_MS = 300.0


def with_handoff(base: sim.SimConfig) -> sim.SimConfig:
    c2 = replace(base, placement="config2")
    fixed = sim.nominal_round_seconds(c2) - base.stage_durations.handoff_s
    d = replace(base.stage_durations, handoff_s=round(TARGET_RUNTIME["config2"] - fixed, 3))
    return replace(base, stage_durations=d)


def with_classify(base: sim.SimConfig) -> sim.SimConfig:
    c1 = replace(base, placement="config1")
    fixed = sim.nominal_round_seconds(c1) - base.stage_durations.classify_s
    d = replace(base.stage_durations, classify_s=round(TARGET_RUNTIME["config1"] - fixed, 3))
    return replace(base, stage_durations=d)


def config2_jump(base: sim.SimConfig) -> float:
    cfg = replace(base, placement="config2", n_nodes=12, rounds=10, seed=base.seed * 1000 + 12)
    return sim.run(cfg).avg_latency_ms


def fit_service(base: sim.SimConfig, lo=1.25, hi=1.45, iters=40) -> sim.SimConfig:
    def build(s):
        b = replace(base, server_service=replace(base.server_service, classify_from_audio_s=s))
        return with_handoff(b)

    for _ in range(iters):
        mid = (lo + hi) / 2
        if config2_jump(build(mid)) < TARGET_JUMP_MS:
            lo = mid
        else:
            hi = mid
    return build(round((lo + hi) / 2, 4))


def design_row(base: sim.SimConfig, placement: str) -> list[float]:
    """Time fractions (1, mic, cpu, radio) of one uncontended round."""
    rep = sim.run(replace(base, placement=placement, n_nodes=1, rounds=1))
    r = rep.rounds[0]
    pc = sim.preset(placement)
    tl = pw.timeline_for_round(pc, base.stage_durations, r.tx_us / sim.US,
                               reply_wait_s=(r.end_us - r.grant_us - r.tx_us) / sim.US)
    total = tl.duration_s
    return [1.0,
            tl.time_in(lambda s: s.mic_on) / total,
            tl.time_in(lambda s: s.busy) / total,
            tl.time_in(lambda s: s.radio_on) / total]


def solve_power(base: sim.SimConfig) -> np.ndarray:
    rows = [design_row(base, name) for name in ("config1", "config2", "proposed")]
    tx = (sim.HEADER_BYTES + sim.uplink_payload(sim.preset("config2"), base.clip_seconds)) / base.bandwidth_Bps
    rec = base.stage_durations.record_s
    f = tx / (rec + tx)
    rows.append([0.0, -f, 0.0, f])
    b = [TARGET_AVG_MW[k] for k in ("config1", "config2", "proposed")] + [TARGET_DELTA_MW]
    return np.linalg.lstsq(np.array(rows), np.array(b), rcond=None)[0]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--extract-grid", type=float, nargs=3, default=(0.5, 3.0, 0.1),
                    metavar=("START", "STOP", "STEP"))
    args = ap.parse_args(argv)

    base = fit_service(sim.SimConfig())
    best = None
    for e in np.arange(*args.extract_grid):
        cand = replace(base, stage_durations=replace(base.stage_durations, extract_s=round(float(e), 3)))
        cand = with_classify(with_handoff(cand))
        p = solve_power(cand)
        if p.min() < 1.0:
            continue
        gap = abs(p[0] + p[1] + p[2] - TARGET_AVG_MW["config1"])
        if best is None or gap < best[0]:
            best = (gap, cand, p)
    if best is None:
        raise SystemExit("no feasible extract duration in grid")
    _, cfg, p = best
    d = cfg.stage_durations
    print(f"classify_from_audio_s = {cfg.server_service.classify_from_audio_s!r}")
    print(f"record_s={d.record_s!r} extract_s={d.extract_s!r} "
          f"classify_s={d.classify_s!r} handoff_s={d.handoff_s!r}")
    print("p_idle={:.4f} p_mic={:.4f} p_cpu_busy={:.4f} p_radio_tx={:.4f}".format(*p))
    print(f"config2 jump at 12 nodes: {config2_jump(cfg):.2f} ms")


if __name__ == "__main__":
    main()
