#!/usr/bin/env python3
"""Smoke test for the dimple_py extension module.

Builds nothing itself: run `cargo build --release -p dimple-py` first, then
`python3 python/smoke_test.py`. The script copies the cdylib next to a temp
directory under the import name `dimple_py` and exercises the exposed
operations end to end (HSIC statistics, dataset generation, a micro training
run, and the gradient check).
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def locate_cdylib() -> Path:
    candidates = [
        ROOT / "target" / "release" / "libdimple_py.so",
        ROOT / "target" / "debug" / "libdimple_py.so",
    ]
    for c in candidates:
        if c.exists():
            return c
    sys.exit(
        "libdimple_py.so not found; build it with `cargo build --release -p dimple-py`"
    )


def import_module():
    lib = locate_cdylib()
    staging = Path(tempfile.mkdtemp(prefix="dimple_py_"))
    shutil.copy2(lib, staging / "dimple_py.so")
    sys.path.insert(0, str(staging))
    import dimple_py  # noqa: E402

    return dimple_py


def approx(a, b, tol):
    return abs(a - b) <= tol


def main() -> None:
    dp = import_module()
    checks = 0

    # harmonic mean identities
    assert approx(dp.harmonic_mean(76.09, 73.35), 74.70, 0.01)
    assert approx(dp.harmonic_mean(62.72, 65.60), 64.13, 0.01)
    assert dp.harmonic_mean(0.0, 0.0) == 0.0
    checks += 3

    # HSIC basics: constant input -> 0, self-dependence positive, symmetric
    import random

    rng = random.Random(7)
    x = [[rng.uniform(-1, 1) for _ in range(3)] for _ in range(12)]
    y = [[rng.uniform(-1, 1) for _ in range(3)] for _ in range(12)]
    const = [[0.5, -0.25] for _ in range(12)]
    assert abs(dp.hsic(x, const)) <= 1e-12
    assert dp.hsic(x, x) > 1e-4
    assert approx(dp.hsic(x, y), dp.hsic(y, x), 1e-12)
    assert dp.hsic(x, y, kernel="linear") >= 0.0
    checks += 4

    # conditional HSIC reduces to plain HSIC for a single class
    labels = [0] * 12
    assert approx(dp.conditional_hsic(x, y, labels), dp.hsic(x, y), 1e-12)
    checks += 1

    # dataset generation: determinism and shape
    overrides = {
        "task.num_classes": "4",
        "task.samples_per_class": "20",
        "task.test_samples_per_class": "12",
        "task.d_v": "16",
        "task.num_patch_tokens": "8",
        "task.seed": "5",
    }
    d1 = dp.generate_dataset(overrides)
    d2 = dp.generate_dataset(overrides)
    assert d1["train"]["images"] == d2["train"]["images"]
    assert d1["classes_base"] == [0, 1] and d1["classes_novel"] == [2, 3]
    n_train = len(d1["train"]["labels"])
    assert n_train == 2 * 20  # base classes only
    assert len(d1["train"]["images"]) == n_train * 8 * 16
    assert all(l in (0, 1) for l in d1["train"]["labels"])
    checks += 5

    # micro training run end to end
    result = dp.train_and_eval(
        {
            "task.num_classes": "4",
            "task.samples_per_class": "24",
            "task.test_samples_per_class": "16",
            "task.d_v": "8",
            "task.num_patch_tokens": "4",
            "task.noise_std": "0.2",
            "task.semantic_rank": "3",
            "task.seed": "3",
            "encoder.num_layers": "2",
            "encoder.prompt_depth": "2",
            "encoder.prompt_len": "1",
            "encoder.d_l": "8",
            "encoder.d_v": "8",
            "encoder.d_vl": "8",
            "encoder.num_heads": "2",
            "encoder.vocab_size": "24",
            "encoder.num_patch_tokens": "4",
            "train.epochs": "2",
            "train.seed": "3",
        }
    )
    for key in ("base_acc", "novel_acc", "hm", "avg_group_acc", "worst_group_acc"):
        assert 0.0 <= result[key] <= 100.0, key
    assert math.isclose(
        result["hm"], dp.harmonic_mean(result["base_acc"], result["novel_acc"]), rel_tol=1e-12
    )
    assert result["worst_group_acc"] <= result["avg_group_acc"] + 1e-9
    assert '"base_acc"' in result["run_json"]
    checks += 4

    # whole-model gradient check
    worst = dp.gradcheck_worst_rel_err(seed=0)
    assert worst < 1e-4, f"gradcheck worst rel err {worst}"
    checks += 1

    print(f"smoke test passed ({checks} checks)")


if __name__ == "__main__":
    main()
