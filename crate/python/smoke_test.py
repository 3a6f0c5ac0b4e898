#!/usr/bin/env python3
"""Smoke test for the vflnet extension module.

Builds nothing itself: expects the cdylib at target/{debug,release}/libvflnet.so
(cargo build -p vflnet-python). The module is copied next to a temp dir entry
as vflnet.so so a plain `import vflnet` resolves it.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    for profile in ("debug", "release"):
        so = ROOT / "target" / profile / "libvflnet.so"
        if so.exists():
            stage = Path(tempfile.mkdtemp(prefix="vflnet-py"))
            shutil.copy(so, stage / "vflnet.so")
            sys.path.insert(0, str(stage))
            import vflnet

            return vflnet
    sys.exit("libvflnet.so not found; run: cargo build -p vflnet-python")


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    v = load_module()

    # softened logits form a distribution and flatten as tau grows
    p = v.soften([2.0, 1.0, 0.0], 1.0)
    approx(sum(p), 1.0, 1e-12)
    sharp = v.soften([2.0, 1.0, 0.0], 0.5)
    flat = v.soften([2.0, 1.0, 0.0], 8.0)
    assert max(sharp) > max(p) > max(flat)

    # kd loss is zero exactly at equal logits, positive elsewhere
    approx(v.kd_loss([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 4.0), 0.0, 1e-12)
    assert v.kd_loss([1.0, 2.0, 3.0], [3.0, 2.0, 1.0], 4.0) > 0.0
    assert v.kl_divergence(p, flat) > 0.0

    # blend endpoints are exact
    kd, ce, total = v.total_loss([1.0, 0.0], [0.5, 0.5], 1, 0.0, 2.0)
    approx(total, ce, 0.0)
    kd, ce, total = v.total_loss([1.0, 0.0], [0.5, 0.5], 1, 1.0, 2.0)
    approx(total, kd, 0.0)
    approx(ce, -math.log(0.5), 1e-12)

    # schedule anchors: warmup start and end at batch 8
    approx(v.lr_at(0, 8, 100, 1000), 1.5625e-5, 1e-18)
    approx(v.lr_at(100, 8, 100, 1000), 1.5625e-3, 1e-18)
    assert v.lr_at(1000, 8, 100, 1000) < 1e-12

    # published sizes: teacher ~157M, student ~22M params; student ~27 GMACs
    assert set(v.presets()) >= {"teacher", "student"}
    t, s = v.param_count("teacher"), v.param_count("student")
    assert 0.85 * 157e6 <= t <= 1.15 * 157e6, t
    assert 0.85 * 22e6 <= s <= 1.15 * 22e6, s
    macs, flops = v.cost("student", 8, 224, 224)
    assert 0.75 * 27e9 <= macs <= 1.25 * 27e9, macs
    assert flops > macs

    # a generated clip carries its class label and feeds the forward pass
    names = v.motion_classes()
    assert len(names) == 8
    data, shape, label = v.generate_clip(names[3], seed=11, t=4, canvas=32)
    assert label == 0  # single-class spec labels from zero
    assert shape == (4, 32, 32, 3) and len(data) == 4 * 32 * 32 * 3

    model = v.Model("desk-student", seed=9)
    logits = model.forward(data, shape)
    assert len(logits) == model.num_classes == 8
    again = model.forward(data, shape)
    assert logits == again, "forward is deterministic"
    assert model.param_count() > 0

    bad = False
    try:
        model.forward(data[:-1], shape)
    except IndexError:
        bad = True
    assert bad, "shape mismatch raises"

    print("smoke test: all checks passed")


if __name__ == "__main__":
    main()
