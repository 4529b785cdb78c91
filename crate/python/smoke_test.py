#!/usr/bin/env python3
"""Smoke test for the wavesr_py extension module.

Builds (or reuses) the cdylib, imports it, and checks a handful of exact
golden values against independent NumPy computations. Run from the
repository root:

    python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent


def build_and_import():
    lib = REPO / "target" / "debug" / "libwavesr_py.so"
    if not lib.exists():
        subprocess.run(
            ["cargo", "build", "-p", "wavesr-py"], cwd=REPO, check=True
        )
    stage = Path(tempfile.mkdtemp(prefix="wavesr_py_"))
    shutil.copy2(lib, stage / "wavesr_py.so")
    sys.path.insert(0, str(stage))
    import wavesr_py

    return wavesr_py


def main():
    w = build_and_import()
    failures = 0

    def check(name, ok, detail=""):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failures += 0 if ok else 1

    # --- analysis transform golden: one 2x2 block [[1,2],[3,4]] ---
    img = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
    packet = w.dwt2(img, scaled=False)
    got = packet[:, 0, 0]
    check(
        "dwt2 golden block",
        np.allclose(got, [5.0, 2.0, 1.0, 0.0], atol=1e-6),
        f"got {got.tolist()}",
    )
    half = w.dwt2(img, scaled=True)[:, 0, 0]
    check(
        "scaled halves coefficients",
        np.allclose(half, [2.5, 1.0, 0.5, 0.0], atol=1e-6),
        f"got {half.tolist()}",
    )

    # --- round-trip on random data ---
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.0, 1.0, size=(3, 16, 16)).astype(np.float32)
    rec = w.idwt2(w.dwt2(x))
    err = float(np.abs(rec - x).max())
    check("dwt/idwt round-trip", err < 1e-5, f"max err {err:.2e}")

    # --- schedule: two-step telescoping endpoint ---
    s = w.Schedule(2, 0.1, 20.0)
    ab2 = s.alpha_bar(2)
    expect_ab2 = math.exp(-(0.1 + 20.0) / 2.0)
    check(
        "alpha_bar(T) telescopes",
        abs(ab2 - expect_ab2) < 1e-12,
        f"{ab2} vs {expect_ab2}",
    )
    c0, ct, var = s.posterior(1)
    check("posterior t=1 is the fixed point", (c0, ct, var) == (1.0, 0.0, 0.0))

    # --- metrics goldens ---
    a = np.zeros((3, 16, 16), dtype=np.float32)
    b = np.full((3, 16, 16), 0.5, dtype=np.float32)
    p = w.psnr(a, b)
    check("psnr golden", abs(p - 6.020599913279624) < 1e-9, f"{p}")
    g = rng.uniform(0.0, 1.0, size=(3, 32, 32)).astype(np.float32)
    ss = w.ssim(g, g)
    check("ssim identity", ss == 1.0, f"{ss}")

    # --- bicubic against NumPy separable reference (same-size identity) ---
    y = rng.uniform(0.0, 1.0, size=(3, 12, 12)).astype(np.float32)
    same = w.bicubic(y, 12, 12)
    check("bicubic same-size identity", np.array_equal(same, y))
    const = w.bicubic(np.full((1, 8, 8), 0.25, dtype=np.float32), 4, 4)
    check(
        "bicubic preserves constants",
        np.allclose(const, 0.25, atol=1e-7),
        f"range [{const.min()}, {const.max()}]",
    )

    print(f"\n{'OK' if failures == 0 else 'FAILED'}: {9 - failures}/9 checks passed")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
