"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Criteria 1-5 need the Speech Commands v2 corpus. Point ``SPEECH_COMMANDS_ROOT``
at the extracted archive. Trained checkpoints are kept in
``LCANETPP_ACCEPTANCE_DIR`` (default: ``lcanetpp-acceptance`` under the temp
directory) so reruns reuse them. Without the corpus these criteria fail
rather than skip.
"""

import os
import subprocess
import sys
import tempfile
import time
from functools import lru_cache
from pathlib import Path

import pytest

from conftest import ACCEPTANCE_LINES
from lcanetpp import attacks, harness
from lcanetpp.models import ModelSpec, TrainConfig

DATA_ROOT = os.environ.get("SPEECH_COMMANDS_ROOT")
WORK_DIR = Path(os.environ.get("LCANETPP_ACCEPTANCE_DIR")
                or Path(tempfile.gettempdir()) / "lcanetpp-acceptance")
CLASSES = ("yes", "no", "stop")
VARIANTS = ("cnn", "lcanet", "lcanet_pp")
REFERENCE_CLEAN = {"cnn": 0.866, "lcanet": 0.939, "lcanet_pp": 0.950}
TESTS_DIR = Path(__file__).parent


def verdict(n, title, ok, detail):
    line = f"criterion {n} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def need_corpus(n, title):
    if not DATA_ROOT or not Path(DATA_ROOT, "yes").is_dir():
        verdict(n, title, False, "Speech Commands corpus unavailable; set SPEECH_COMMANDS_ROOT")


@lru_cache(maxsize=None)
def experiment(variant, seed=0):
    path = WORK_DIR / f"{variant}-seed{seed}.ckpt"
    cache = WORK_DIR / "features"
    if path.exists():
        return harness.load_experiment(path, DATA_ROOT, cache_dir=cache)
    return harness.train_model(DATA_ROOT, ModelSpec(variant), CLASSES,
                               TrainConfig(epochs=20, lr=1e-4, seed=seed), path, cache_dir=cache)


@lru_cache(maxsize=None)
def sweep(variant, kind, eps, seed=0):
    exp = experiment(variant, seed)
    cfg = attacks.AttackConfig(kind, max(eps), seed=seed)
    return {r.sweep_value: r.accuracy
            for r in harness.run_attack_sweep(exp, cfg, eps, seed) if r.experiment == kind}


def clean(variant, seed=0):
    return harness.run_clean_eval(experiment(variant, seed), seed).accuracy


@pytest.mark.dataset
def test_criterion_1_clean_accuracy_band():
    title = "clean accuracy band"
    need_corpus(1, title)
    acc = {v: clean(v) for v in VARIANTS}
    in_band = all(abs(acc[v] - REFERENCE_CLEAN[v]) <= 0.07 for v in VARIANTS)
    ordered = acc["lcanet_pp"] >= acc["lcanet"] >= acc["cnn"]
    verdict(1, title, in_band and ordered,
            ", ".join(f"{v}={acc[v]:.3f} (ref {REFERENCE_CLEAN[v]})" for v in VARIANTS))


@pytest.mark.dataset
def test_criterion_2_background_noise_ordering():
    title = "background-noise ordering"
    need_corpus(2, title)
    acc = {}
    for v in VARIANTS:
        rows = harness.run_background_noise_sweep(experiment(v), harness.SNR_GRID)
        acc[v] = {r.sweep_value: r.accuracy for r in rows}
    ordered = all(acc["lcanet_pp"][s] >= acc["lcanet"][s] >= acc["cnn"][s] - 0.02
                  for s in (15.0, 20.0, 24.0, 25.0))
    drop = acc["cnn"][float("inf")] - acc["cnn"][15.0]
    verdict(2, title, ordered and drop >= 0.15,
            f"cnn drop inf->15 dB = {drop:.3f}; " +
            "; ".join(f"{v}: " + " ".join(f"{acc[v][s]:.3f}" for s in harness.SNR_GRID)
                      for v in VARIANTS))


@pytest.mark.dataset
def test_criterion_3_fgsm_gap():
    title = "FGSM robustness gap"
    need_corpus(3, title)
    grid = (0.01, 0.016, 0.02, 0.03)
    holds = []
    for seed in (0, 1, 2):
        acc = {v: sweep(v, "fgsm", grid, seed) for v in VARIANTS}
        gap = acc["lcanet_pp"][0.016] >= 2 * max(acc["cnn"][0.016], acc["lcanet"][0.016])
        below = all(acc["lcanet"][e] < acc["cnn"][e] for e in grid)
        holds.append(gap and below)
    verdict(3, title, sum(holds) >= 2, f"ordering held on {sum(holds)} of 3 seeds")


@pytest.mark.dataset
def test_criterion_4_pgd_collapse():
    title = "PGD collapse of LCANet"
    need_corpus(4, title)
    lca1 = sweep("lcanet", "pgd", (0.01,))[0.01]
    lcapp = sweep("lcanet_pp", "pgd", (0.01,))[0.01]
    verdict(4, title, lca1 < 0.20 and lcapp > 0.40, f"lcanet={lca1:.3f}, lcanet++={lcapp:.3f}")


@pytest.mark.dataset
def test_criterion_5_evasion_mildness():
    title = "evasion mildness"
    need_corpus(5, title)
    acc = {v: sweep(v, "evasion", (0.05,))[0.05] for v in VARIANTS}
    retained = {v: acc[v] / clean(v) for v in VARIANTS}
    ok = all(r >= 0.85 for r in retained.values()) and acc["lcanet_pp"] == max(acc.values())
    verdict(5, title, ok, ", ".join(f"{v}={acc[v]:.3f} ({retained[v]:.0%} of clean)"
                                    for v in VARIANTS))


def test_criterion_6_property_suite():
    title = "property suite"
    modules = sorted(str(p) for p in TESTS_DIR.glob("test_*.py") if p.name != Path(__file__).name)
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *modules],
                          capture_output=True, text=True, cwd=TESTS_DIR.parent)
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(6, title, proc.returncode == 0 and elapsed < 300, f"{summary}; {elapsed:.0f} s")
