"""Time the image kernels on the numba path and the numpy path.

    python benchmarks/bench_kernels.py [--size 224] [--repeat 5]

Both paths run in one process; WSMOCO_NUMBA is flipped between them.  The
first numba call compiles, so it is made once before timing.  Outputs are
compared as well, so a speedup never hides a disagreement.
"""

from __future__ import annotations

import argparse
import os
import timeit

import numpy as np

from wsmoco import _kernels as k
from wsmoco.preprocessing import crop_transform
from wsmoco.synthetic import PatientLook, render_face


def cases(size: int):
    rng = np.random.default_rng(0)
    img = rng.random((size, size, 3), dtype=np.float32)
    _, lm = render_face(PatientLook.draw(rng), 0.3, size, roll=0.1)
    inv = crop_transform(lm, size)

    def ellipse():
        canvas = np.zeros((size, size, 3), np.float32)
        for i in range(20):
            k.paint_ellipse(canvas, size * 0.5, size * 0.5, size * 0.04 * (i + 1), size * 0.03 * (i + 1), 0.3, (0.8, 0.6, 0.5))
        return canvas

    return {
        "paint_ellipse x20": ellipse,
        "shift_hue": lambda: k.shift_hue(img, 0.07),
        "warp_bilinear": lambda: k.warp_bilinear(img, inv, size, size),
        "render_face": lambda: render_face(PatientLook.draw(np.random.default_rng(1)), 0.3, size)[0],
    }


def run(size: int, repeat: int) -> list[dict]:
    rows = []
    for name, fn in cases(size).items():
        times, outs = {}, {}
        for flag in ("1", "0"):
            os.environ["WSMOCO_NUMBA"] = flag
            outs[flag] = fn()  # warm-up (compiles on the numba path)
            times[flag] = min(timeit.repeat(fn, number=1, repeat=repeat))
        diff = float(np.abs(np.asarray(outs["1"], np.float64) - np.asarray(outs["0"], np.float64)).max())
        rows.append(dict(kernel=name, numba_ms=1e3 * times["1"], numpy_ms=1e3 * times["0"],
                         speedup=times["0"] / times["1"], max_abs_diff=diff))
    os.environ.pop("WSMOCO_NUMBA", None)
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--size", type=int, default=224)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"image {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max diff':>11}")
    for r in run(args.size, args.repeat):
        print(f"{r['kernel']:<20}{r['numba_ms']:>10.2f}{r['numpy_ms']:>10.2f}{r['speedup']:>8.1f}x{r['max_abs_diff']:>11.1e}")


if __name__ == "__main__":
    main()
