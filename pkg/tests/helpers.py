"""Shared test infrastructure: deterministic dataset/run/oracle caching.

Training is a pure function of (config, dataset, seed), so finished artifacts
are reusable across pytest sessions. Point CYCLELAB_TEST_CACHE at a directory
to keep them; otherwise everything lands in the session tmp dir and the
acceptance suite trains from scratch.
"""

from __future__ import annotations

import shutil
from pathlib import Path

from cyclelab import scenes, training
from cyclelab.metrics import get_oracle
from cyclelab.scenes import load_manifest

DATASET_SEED = 7
DATASET_SIZE = 32
N_TRAIN, N_TEST = 200, 50
ACCEPT_ITERS = 20000
ACCEPT_SEEDS = (0, 1, 2)


def ensure_dataset(cache_root: Path, mode: str) -> Path:
    out = cache_root / f"data-{mode}"
    if not (out / "manifest.json").exists():
        scenes.generate_dataset(mode, N_TRAIN, N_TEST, DATASET_SIZE,
                                DATASET_SEED, out)
    return out


def run_config(defense: str, seed: int, iters: int = ACCEPT_ITERS,
               **overrides) -> training.TrainConfig:
    return training.TrainConfig(defense=defense, seed=seed, total_iters=iters,
                                **overrides)


def ensure_run(cache_root: Path, dataset_dir: Path,
               cfg: training.TrainConfig) -> Path:
    mode = load_manifest(dataset_dir, check_files=False).mode
    name = f"run-{mode}-{cfg.defense.replace('+', '_')}-s{cfg.seed}-i{cfg.total_iters}"
    out = cache_root / name
    if not (out / "final.cycd").exists():
        shutil.rmtree(out, ignore_errors=True)  # clear partial runs
        training.train(cfg, dataset_dir, out)
    return out


def ensure_oracle(cache_root: Path, dataset_dir: Path, seed: int = 0):
    manifest = load_manifest(dataset_dir, check_files=False)
    path = cache_root / f"oracle-{manifest.mode}-s{seed}.cycd"
    return get_oracle(manifest, seed=seed, cache_path=path), path
