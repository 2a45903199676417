"""Regenerate crop_boxes.json with a standalone reference sampler.

The sampler draws, per attempt, an area fraction ``U(lo, hi)`` and a log-uniform
aspect ratio from ``[3/4, 4/3]``, in that order, from a numpy Generator seeded
with ``[seed, 77]``; it accepts the first box that fits and then draws top and
left offsets with ``integers``. After ten misses it returns the largest centred
box with an in-range aspect ratio.

Run from the repository root: ``python3 tests/fixtures/make_crop_boxes.py``.
"""
import json
import math
from pathlib import Path

import numpy as np

CASES = [(24, 24, (0.2, 1.0)), (16, 32, (0.08, 1.0)), (40, 12, (0.5, 0.9)), (5, 5, (1.0, 1.0))]


def reference_box(h, w, scale, rng):
    for _ in range(10):
        area = h * w * rng.uniform(*scale)
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw, ch = int(round(math.sqrt(area * ratio))), int(round(math.sqrt(area / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            return [int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw]
    r = w / h
    if r < 3 / 4:
        cw, ch = w, int(round(w / (3 / 4)))
    elif r > 4 / 3:
        ch, cw = h, int(round(h * (4 / 3)))
    else:
        cw, ch = w, h
    return [(h - ch) // 2, (w - cw) // 2, ch, cw]


def main():
    rows = []
    for h, w, scale in CASES:
        for seed in range(25):
            rng = np.random.default_rng([seed, 77])
            rows.append({"height": h, "width": w, "scale": list(scale), "seed": seed,
                         "box": reference_box(h, w, scale, rng)})
    out = Path(__file__).with_name("crop_boxes.json")
    out.write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
