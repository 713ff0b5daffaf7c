"""Built-in verification suites behind ``voxset selftest``.

Each suite yields ``Case`` records; a case carries enough of its inputs
(seed and shapes) to be replayed by hand when it fails.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffArray, grad_check
from .scatter import (build_segments, scatter_max, scatter_mean, scatter_softmax, scatter_sum,
                      segment_outer_sum, segment_readout)
from .vsa import init_vsa_params, naive_vsa_oracle, vsa_attention, vsa_block

__all__ = ["Case", "SUITES", "run_suites"]


@dataclass
class Case:
    suite: str
    name: str
    ok: bool
    value: float
    limit: float
    inputs: str


def _layout(rng, n, m, grid=8):
    cells = rng.choice(grid * grid * 2, size=m, replace=False)
    cells = np.stack(np.unravel_index(cells, (grid, grid, 2)), axis=1)
    pick = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    rng.shuffle(pick)
    return build_segments(cells[pick])


def _primitive_checks(rng):
    a = lambda *s: DiffArray(rng.normal(size=s))  # noqa: E731
    w43 = a(4, 3)
    v = a(3, 5)
    k332 = a(3, 3, 2, 2)
    seg = _layout(rng, 12, 4)
    w12 = a(12, 3)
    w423 = a(4, 2, 3)
    return {
        "matmul": (lambda x: dc.sum_all(dc.softmax_lastdim(dc.matmul(x, w43)) * dc.matmul(x, w43)), a(3, 4)),
        "softmax": (lambda x: dc.sum_all(dc.softmax_lastdim(x) * v), a(3, 5)),
        "relu": (lambda x: dc.sum_all(dc.relu(x) * x), DiffArray(rng.normal(size=(4, 4)) + 0.05)),
        "mul": (lambda x: dc.sum_all(x * x * v), a(3, 5)),
        "batchnorm": (lambda x: dc.sum_all(dc.batchnorm1d(x, DiffArray(np.ones(5)), DiffArray(np.zeros(5)),
                                                           dc.BatchNormState(5), train=True) * v), a(3, 5)),
        "einsum": (lambda x: dc.sum_all(dc.einsum("nk,nd->nkd", x, x) * dc.einsum("nk,nd->nkd", x, x)), a(3, 4)),
        "conv2d": (lambda x: dc.sum_all(dc.conv2d(x, k332, None, 2) * dc.conv2d(x, k332, None, 2)), a(4, 5, 2)),
        "segment_outer_sum": (lambda x, y: dc.sum_all(segment_outer_sum(x, y, seg) * w423), [a(12, 2), a(12, 3)]),
        "segment_readout": (lambda kk, vv, q: dc.sum_all(segment_readout(kk, vv, q, seg) * w12),
                            [a(4, 3, 2), a(4, 3, 3), a(12, 2)]),
    }


def suite_gradcheck(seed: int = 0):
    rng = np.random.default_rng(seed)
    for name, (f, x) in _primitive_checks(rng).items():
        err = grad_check(f, x)
        shapes = [t.shape for t in x] if isinstance(x, list) else x.shape
        yield Case("gradcheck", name, err < 1e-5, err, 1e-5, f"seed={seed} shape={shapes}")
    seg = _layout(rng, 30, 6)
    p = init_vsa_params(3, 4, 2, 4, rng)
    local = rng.uniform(0, 1, (30, 3))
    w = DiffArray(rng.normal(size=(30, 4)))
    names = sorted(p.arrays())

    def block(x, *arrays):
        q = p.with_arrays(**dict(zip(names, arrays)))
        return dc.sum_all(vsa_block(x, local, seg, q, train=True) * w)

    err = grad_check(block, [DiffArray(rng.normal(size=(30, 3)))] + [p.arrays()[k] for k in names])
    yield Case("gradcheck", "vsa_block", err < 1e-4, err, 1e-4, f"seed={seed} n=30 m=6 k=2 d=4")


def suite_scatter(seed: int = 0):
    rng = np.random.default_rng(seed)
    for trial in range(5):
        n, m, c = 2000, 150, 8
        seg = _layout(rng, n, m, grid=12)
        x = rng.normal(size=(n, c))
        ref_sum = np.zeros((seg.m, c))
        ref_max = np.full((seg.m, c), -np.inf)
        for i in range(n):
            j = seg.seg_of_point[i]
            ref_sum[j] += x[i]
            ref_max[j] = np.maximum(ref_max[j], x[i])
        ref_mean = ref_sum / seg.counts[:, None]
        inputs = f"seed={seed} trial={trial} n={n} m={seg.m} c={c}"
        for name, op, ref in (("sum", scatter_sum, ref_sum), ("max", scatter_max, ref_max),
                              ("mean", scatter_mean, ref_mean)):
            err = float(np.abs(op(DiffArray(x), seg).data - ref).max())
            yield Case("scatter", f"{name}[{trial}]", err < 1e-12, err, 1e-12, inputs)
        sm = scatter_softmax(DiffArray(x), seg).data
        ref = np.zeros_like(x)
        for j in range(seg.m):
            rows = np.flatnonzero(seg.seg_of_point == j)
            e = np.exp(x[rows] - x[rows].max(axis=0))
            ref[rows] = e / e.sum(axis=0)
        err = float(np.abs(sm - ref).max())
        yield Case("scatter", f"softmax[{trial}]", err < 1e-12, err, 1e-12, inputs)
    small = _layout(rng, 25, 7)
    wn = DiffArray(rng.normal(size=(25, 3)))
    err = grad_check(lambda a: dc.sum_all(scatter_softmax(a, small) * wn), DiffArray(rng.normal(size=(25, 3))))
    yield Case("scatter", "softmax_vjp", err < 1e-6, err, 1e-6, f"seed={seed} n=25 m={small.m}")


def suite_vsa(seed: int = 0, instances: int = 8):
    rng = np.random.default_rng(seed)
    ks, ds = (1, 4, 8, 16), (4, 16)
    for t in range(instances):
        k, d = ks[t % 4], ds[(t // 4) % 2]
        n = int(rng.integers(50, 400))
        m = int(rng.integers(5, min(n, 60)))
        seg = _layout(rng, n, m)
        x = DiffArray(rng.normal(size=(n, 6)))
        local = rng.uniform(0, 1, (n, 3))
        p = init_vsa_params(6, d, k, 8, rng)
        err = float(np.abs(vsa_attention(x, local, seg, p).data - naive_vsa_oracle(x, local, seg, p)).max())
        yield Case("vsa", f"oracle[{t}]", err < 1e-12, err, 1e-12, f"seed={seed} t={t} n={n} m={seg.m} k={k} d={d}")


def suite_softmax(seed: int = 0, layouts: int = 200):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(layouts):
        n = int(rng.integers(1, 300))
        seg = _layout(rng, n, int(rng.integers(1, min(n, 60) + 1)))
        y = scatter_softmax(DiffArray(rng.normal(size=(n, 4)) * 30), seg)
        worst = max(worst, float(np.abs(scatter_sum(y, seg).data - 1).max()))
    yield Case("softmax", "segment_sums", worst < 1e-12, worst, 1e-12, f"seed={seed} layouts={layouts}")
    rows = dc.softmax_lastdim(DiffArray(rng.normal(size=(500, 7)) * 200)).data
    err = float(np.abs(rows.sum(axis=1) - 1).max())
    yield Case("softmax", "lastdim_rows", err < 1e-12, err, 1e-12, f"seed={seed} shape=(500, 7)")


SUITES = {
    "gradcheck": suite_gradcheck,
    "scatter": suite_scatter,
    "vsa": suite_vsa,
    "softmax": suite_softmax,
}


def run_suites(names=None, seed: int = 0, sabotage: bool = False) -> list:
    """Run the named suites (all by default) and return every Case."""
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    cases = []
    for name in names:
        if sabotage:
            with dc.sabotage_vjp():
                cases.extend(SUITES[name](seed))
        else:
            cases.extend(SUITES[name](seed))
    return cases
