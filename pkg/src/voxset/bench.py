"""Wall-clock scaling of the VSA encoder and decoder forward pass."""
from __future__ import annotations

import statistics
import time

import numpy as np

from .diffcore import DiffArray
from .scatter import build_segments
from .vsa import init_vsa_params, vsa_decode, vsa_encode

__all__ = ["make_bench_input", "time_vsa_forward", "scaling_table"]

POINTS_PER_VOXEL = 8


def make_bench_input(n: int, d: int, rng, dtype=np.float64):
    """``n`` random points at a fixed mean density, so occupied voxels grow with ``n``."""
    side = max(1, int(np.ceil(np.sqrt(n / POINTS_PER_VOXEL))))
    cells = np.column_stack([rng.integers(0, side, n), rng.integers(0, side, n), np.zeros(n, dtype=np.int64)])
    seg = build_segments(cells)
    x = DiffArray(rng.normal(size=(n, d)).astype(dtype))
    return x, seg


def time_vsa_forward(n: int, k: int = 8, d: int = 16, repeats: int = 5, rng=None, dtype=np.float64) -> list:
    """Seconds per repeat of ``vsa_encode`` followed by ``vsa_decode`` (no tape)."""
    rng = np.random.default_rng(rng)
    x, seg = make_bench_input(n, d, rng, dtype)
    params = init_vsa_params(d, d, k, 8, rng, dtype)
    vsa_decode(x, vsa_encode(x, params, seg), params, seg)   # warm-up
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        vsa_decode(x, vsa_encode(x, params, seg), params, seg)
        out.append(time.perf_counter() - t0)
    return out


def scaling_table(n_list, k: int = 8, d: int = 16, repeats: int = 5, seed: int = 0, dtype=np.float64) -> list:
    """Rows ``(n, median_ms, ratio_to_prev)``; the first ratio is NaN."""
    rows = []
    prev = None
    for i, n in enumerate(n_list):
        med = statistics.median(time_vsa_forward(n, k, d, repeats, np.random.SeedSequence([seed, i]), dtype)) * 1e3
        rows.append((n, med, med / prev if prev else float("nan")))
        prev = med
    return rows
