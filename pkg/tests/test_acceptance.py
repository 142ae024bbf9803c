"""Acceptance gate: one test and one PASS/FAIL line per criterion.

The experiment criteria read the pipeline results in ``CONDSEG_ACCEPTANCE_DIR``
(default ``<repo>/acceptance-runs``). Missing cells, or cells produced with
different settings, are (re)computed first, so a cold run trains every model:
about an hour on one core. Delete the directory after changing code that
affects training.
"""

from __future__ import annotations

import heapq
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from condseg import autodiff as ad
from condseg.experiments import PRESETS, RunSettings, load_run, run_dir, run_experiment, run_one
from condseg.polygon import douglas_peucker
from condseg.training import (AdamState, CyclicLRConfig, adam_step, cyclic_lr, load_checkpoint, read_checkpoint,
                              save_checkpoint)
from conftest import ACCEPTANCE_LINES, t64
from gradcheck import gradient_suite
from oracles import (adam_scalar, bce_naive, channel_scale_loops, conv2d_loops, linear_loops, min_simplification,
                     triangular_lr)

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (1, 2, 3)
PIPELINE_BUDGET_S = 45 * 60
UNIT_BUDGET_S = 5 * 60
RUN_CPU_BUDGET_S = 10 * 60
WORKERS = 4


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def pipeline() -> Path:
    out = Path(os.environ.get("CONDSEG_ACCEPTANCE_DIR", ROOT / "acceptance-runs"))
    settings = RunSettings()
    for preset in PRESETS:
        run_experiment(preset, None, SEEDS, out, settings, resume=True)
    return out


def runs(out, preset, variant):
    return [load_run(out, preset, variant, s) for s in SEEDS]


def col(reports, mode, column):
    vals = [r["reports"][mode]["per_subset"][column] if column != "average" else r["reports"][mode]["average"]
            for r in reports]
    return float(np.mean(vals)), vals


def fmt(vals):
    return "[" + ", ".join(f"{v:.3f}" for v in vals) + "]"


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_gradient_suite():
    t0 = time.process_time()
    errs = gradient_suite(seeds=range(5))
    cpu = time.process_time() - t0
    worst_name = max(errs, key=errs.get)
    ok = max(errs.values()) <= 1e-5 and cpu <= 120
    record(1, ok, f"{len(errs)} cases, worst {worst_name} rel err {errs[worst_name]:.2e} (<= 1e-5), "
                  f"{cpu:.0f}s CPU (<= 120s)")
    assert ok, errs


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_oracle_equivalence():
    r = np.random.default_rng(2024)
    gaps = {}
    with ad.float64_mode():
        x, w, b = r.standard_normal((2, 3, 7, 7)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)
        for padding, pad, stride in (("valid", 0, 1), ("same", 1, 1), ("same", 1, 2), ("valid", 0, 2)):
            got = ad.conv2d(t64(x), t64(w), t64(b), padding, stride).data
            gaps[f"conv2d p{pad}s{stride}"] = np.abs(got - conv2d_loops(x, w, b, pad, stride)).max()
        xl, wl, bl = r.standard_normal((5, 6)), r.standard_normal((3, 6)), r.standard_normal(3)
        gaps["linear"] = np.abs(ad.linear(t64(xl), t64(wl), t64(bl)).data - linear_loops(xl, wl, bl)).max()
        g = r.uniform(size=(2, 3))
        gaps["channel_scale"] = np.abs(ad.channel_scale(t64(x), t64(g)).data - channel_scale_loops(x, g)).max()
        z, t = r.standard_normal((2, 1, 5, 5)) * 3, (r.uniform(size=(2, 1, 5, 5)) > 0.5).astype(float)
        gaps["bce_with_logits"] = abs(float(ad.bce_with_logits(t64(z), t).data) - bce_naive(z, t))

    # greedy splitting is not globally minimal; the canonical arc is asserted,
    # the family rate is reported
    def arc(seed):
        q = np.random.default_rng(seed)
        s = np.linspace(0, np.pi, 12)
        return 10 * np.stack([np.cos(s), np.sin(s)], 1) + q.normal(0, 0.4, (12, 2))
    dp_sizes = (len(douglas_peucker(arc(0), 1.5)), len(min_simplification(arc(0), 1.5)))
    family = sum(len(douglas_peucker(arc(s), 1.5)) == len(min_simplification(arc(s), 1.5)) for s in range(50))

    with ad.float64_mode():
        p = ad.Parameter("theta", ad.Tensor(np.array([1.0]), requires_grad=True))
        state, traj = AdamState(), []
        for _ in range(5):
            p.tensor.grad = 2 * p.tensor.data.copy()
            adam_step(state, [p], 0.1)
            traj.append(float(p.tensor.data[0]))
    adam_gap = max(abs(a - b) for a, b in zip(traj, adam_scalar(1.0, lambda v: 2 * v, 0.1, 5)))

    worst = max(gaps, key=gaps.get)
    ok = max(gaps.values()) <= 1e-6 and dp_sizes[0] == dp_sizes[1] and adam_gap <= 1e-12
    record(2, ok, f"max gap {gaps[worst]:.1e} ({worst}) <= 1e-6; DP canonical arc {dp_sizes[0]} pts vs "
                  f"exhaustive {dp_sizes[1]} (family match {family}/50); Adam scalar gap {adam_gap:.1e} <= 1e-12")
    assert ok


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_schedule_exactness():
    cfg = CyclicLRConfig(total_batches=800, lr_min=0.0002, lr_max=0.0008, cycles=8)
    start, mid, quarter = cyclic_lr(cfg, 0), cyclic_lr(cfg, 50), cyclic_lr(cfg, 25)
    exact = all(cyclic_lr(cfg, i) == triangular_lr(i, 800, 0.0002, 0.0008, 8) for i in range(800))
    mean = float(np.mean([cyclic_lr(cfg, i) for i in range(100)]))
    ok = (start == 0.0002 and mid == 0.0008 and abs(quarter - 0.0005) <= 1e-18 and exact
          and abs(mean - 0.0005) <= 1e-12)
    record(3, ok, f"start {start!r}, mid {mid!r}, quarter {quarter!r}, bit-exact={exact}, "
                  f"cycle mean {mean!r} (|err| {abs(mean - 0.0005):.1e})")
    assert ok


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_multitask_switch(pipeline):
    sme = runs(pipeline, "multitask", "sme")
    base = runs(pipeline, "multitask", "baseline-stratified")
    dummy = runs(pipeline, "multitask", "sme-dummy")
    a_sme, a_sme_v = col(sme, "correct", "anomaly")
    a_base, a_base_v = col(base, "correct", "anomaly")
    swap, swap_v = col(sme, "swap", "average")
    a_dummy, a_dummy_v = col(dummy, "dummy", "anomaly")
    n_dummy, _ = col(dummy, "dummy", "nuclei")
    n_correct, _ = col(sme, "correct", "nuclei")
    cpu = max(json.loads((run_dir(pipeline, "multitask", v.name, s) / "timing.json").read_text())["cpu_seconds"]
              for v in PRESETS["multitask"].variants for s in SEEDS)
    ok_a = a_sme - a_base >= 0.05
    ok_b = swap < 0.2
    ok_c = a_dummy < 0.3 and abs(n_dummy - n_correct) <= 0.05
    ok = ok_a and ok_b and ok_c and cpu <= RUN_CPU_BUDGET_S
    record(4, ok, f"(a) anomaly SME {a_sme:.3f} {fmt(a_sme_v)} vs stratified {a_base:.3f} {fmt(a_base_v)}, "
                  f"delta {a_sme - a_base:+.3f} (>= 0.05); (b) swap F1 {swap:.3f} {fmt(swap_v)} (< 0.2); "
                  f"(c) dummy anomaly {a_dummy:.3f} {fmt(a_dummy_v)} (< 0.3), nuclei {n_dummy:.3f} vs "
                  f"{n_correct:.3f} (|d| {abs(n_dummy - n_correct):.3f} <= 0.05); slowest run {cpu:.0f}s CPU")
    assert ok


# ---------------------------------------------------------------- criterion 5


def test_criterion_5_domains_direction(pipeline):
    sme, sme_v = col(runs(pipeline, "domains", "sme"), "correct", "average")
    base, base_v = col(runs(pipeline, "domains", "baseline"), "correct", "average")
    dummy, dummy_v = col(runs(pipeline, "domains", "sme-dummy"), "dummy", "average")
    ok = sme >= base and sme >= dummy
    record(5, ok, f"SME {sme:.3f} {fmt(sme_v)} >= baseline {base:.3f} {fmt(base_v)} and >= SME-dummy "
                  f"{dummy:.3f} {fmt(dummy_v)}")
    assert ok


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_annotation_styles(pipeline):
    sme, sme_v = col(runs(pipeline, "styles", "sme"), "correct", "accurate")
    base, base_v = col(runs(pipeline, "styles", "baseline"), "correct", "accurate")
    third, third_v = col(runs(pipeline, "styles", "baseline-1/3"), "correct", "accurate")
    ok = sme - base > 0 and sme - third > 0
    record(6, ok, f"SME(accurate) {sme:.3f} {fmt(sme_v)} vs baseline {base:.3f} {fmt(base_v)} "
                  f"(delta {sme - base:+.4f} > 0) and baseline-1/3 {third:.3f} {fmt(third_v)} "
                  f"(delta {sme - third:+.4f} > 0)")
    assert ok


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_continuous_conditioning(pipeline):
    sme_runs = runs(pipeline, "continuous", "sme")
    ratios = []
    for r in sme_runs:
        values, pixels = r["sweep"]["values"], r["sweep"]["mean_pixels"]
        p02, p08 = pixels[values.index(0.2)], pixels[values.index(0.8)]
        ratios.append((p08 - p02) / p02 if p02 > 0 else float("inf"))
    sme, sme_v = col(sme_runs, "correct", "average")
    base, base_v = col(runs(pipeline, "continuous", "baseline"), "correct", "average")
    others = {v: col(runs(pipeline, "continuous", v), "correct", "average")[0] for v in ("me", "film")}
    ok = min(ratios) >= 0.2 and sme >= base
    record(7, ok, f"SME pixels(0.8) vs pixels(0.2) relative gain per seed {fmt(ratios)} (>= 0.20); "
                  f"SME F1 {sme:.3f} {fmt(sme_v)} >= baseline {base:.3f} {fmt(base_v)} "
                  f"(ME {others['me']:.3f}, FiLM {others['film']:.3f})")
    assert ok


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_determinism_and_persistence(pipeline, tmp_path):
    # re-train one pipeline cell from scratch and compare bytes with the stored run
    files = ("checkpoint.ckpt", "history.csv", "eval-correct.csv", "eval-dummy.csv")
    run_one("continuous", "sme", SEEDS[0], tmp_path, RunSettings())
    stored = run_dir(pipeline, "continuous", "sme", SEEDS[0])
    fresh = run_dir(tmp_path, "continuous", "sme", SEEDS[0])
    same = {f: (stored / f).read_bytes() == (fresh / f).read_bytes() for f in files}

    ckpt_path = fresh / "checkpoint.ckpt"
    model = load_checkpoint(ckpt_path)
    resaved = save_checkpoint(read_checkpoint(ckpt_path), tmp_path / "again.ckpt")
    again = load_checkpoint(resaved)
    r = np.random.default_rng(0)
    probe, meta = r.uniform(size=(4, 1, 32, 32)).astype(np.float32), r.uniform(size=(4, 1))
    with ad.no_grad():
        a, b = model(probe, meta).data, again(probe, meta).data
    logits_equal = a.tobytes() == b.tobytes()
    bytes_equal = ckpt_path.read_bytes() == resaved.read_bytes()
    ok = all(same.values()) and logits_equal and bytes_equal
    record(8, ok, f"rerun continuous/sme seed {SEEDS[0]} byte-identical: "
                  f"{', '.join(f'{k}={v}' for k, v in same.items())}; checkpoint round trip logits "
                  f"bit-identical={logits_equal}, re-saved bytes identical={bytes_equal}")
    assert ok


# ---------------------------------------------------------------- criterion 9


def lpt_makespan(durations, workers):
    """Longest-processing-time-first schedule length on ``workers`` machines."""
    loads = [0.0] * workers
    heapq.heapify(loads)
    for d in sorted(durations, reverse=True):
        heapq.heappush(loads, heapq.heappop(loads) + d)
    return max(loads)


def test_lpt_makespan():
    assert lpt_makespan([3, 3, 2, 2, 2], 2) == 7
    assert lpt_makespan([5], 4) == 5
    assert lpt_makespan([1] * 8, 4) == 2


def test_criterion_9_runtime(pipeline):
    walls = [json.loads((run_dir(pipeline, p, v.name, s) / "timing.json").read_text())["wall_seconds"]
             for p, pre in PRESETS.items() for v in pre.variants for s in SEEDS]
    serial = sum(walls)
    makespan = lpt_makespan(walls, WORKERS)
    t0 = time.perf_counter()
    unit = subprocess.run([sys.executable, "-m", "pytest", "-q", "-m", "not acceptance", "-p", "no:cacheprovider",
                           str(ROOT / "tests")], capture_output=True, text=True, cwd=ROOT)
    unit_s = time.perf_counter() - t0
    ok = makespan <= PIPELINE_BUDGET_S and unit.returncode == 0 and unit_s <= UNIT_BUDGET_S
    record(9, ok, f"{len(walls)} runs, {serial / 60:.1f} min serial on this 1-core host; estimated "
                  f"{WORKERS}-worker makespan {makespan / 60:.1f} min (<= 45, LPT over measured run times, "
                  f"not a measured 4-core run); unit/property tests {unit_s:.0f}s (<= 300s, "
                  f"exit {unit.returncode})")
    assert ok
