"""Compare the compiled and pure-Python payload checksum kernels.

    python benchmarks/bench_checksum.py --sizes 4096 65536 1048576
"""

from __future__ import annotations

import argparse
import json
import logging
import time

import numpy as np

from tabprobe import checksum

logger = logging.getLogger("bench_checksum")


def _time(fn, data, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(data)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[4096, 65536, 1 << 20])
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--json", action="store_true", help="print results as JSON")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    if checksum.BACKEND != "cython":
        logger.warning("compiled kernel unavailable; only the fallback is timed")
    rng = np.random.default_rng(0)
    rows = []
    for n in args.sizes:
        data = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        py = _time(lambda b: checksum.fnv1a_64(b, "python"), data, args.repeats)
        row = {"bytes": n, "python_s": py}
        if checksum.BACKEND == "cython":
            cy = _time(lambda b: checksum.fnv1a_64(b, "cython"), data, args.repeats)
            assert checksum.fnv1a_64(data, "cython") == checksum.fnv1a_64(data, "python")
            row |= {"cython_s": cy, "speedup": py / cy}
        rows.append(row)

    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'bytes':>10} {'python MB/s':>12} {'cython MB/s':>12} {'speedup':>9}")
        for r in rows:
            mb = r["bytes"] / 1e6
            cy = f"{mb / r['cython_s']:12.1f}" if "cython_s" in r else f"{'n/a':>12}"
            sp = f"{r['speedup']:9.0f}x" if "speedup" in r else ""
            print(f"{r['bytes']:>10} {mb / r['python_s']:12.2f} {cy} {sp}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
