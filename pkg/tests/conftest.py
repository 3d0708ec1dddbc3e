"""Shared fixtures and graph builders for the test suite."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cgnas.graph import ComputationGraph, GraphBuilder, OpKind, PrimitiveOp
from cgnas.spaces import Dialect, build_network, random_cell

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def chain(kinds, shape=(8, 8, 16)) -> ComputationGraph:
    """Input -> kinds... -> Output, all nodes shape preserving."""
    b = GraphBuilder()
    cur = b.add(PrimitiveOp.make(OpKind.INPUT), shape, shape)
    for kind in kinds:
        kind = OpKind(kind)
        if kind == OpKind.CONV2D:
            op = PrimitiveOp.make(kind, kernel_h=3, kernel_w=3, stride=1, groups=1, dilation=1,
                                  has_bias=0)
            ws = (3, 3, shape[2], shape[2])
        elif kind == OpKind.BATCHNORM:
            op, ws = PrimitiveOp.make(kind), (1, 1, 1, shape[2])
        else:
            op, ws = PrimitiveOp.make(kind), None
        cur = b.add(op, shape, shape, ws, inputs=[cur])
    b.add(PrimitiveOp.make(OpKind.OUTPUT), shape, shape, inputs=[cur])
    return b.build()


def random_graphs(n: int, seed: int = 0, dialects=tuple(Dialect)) -> list[ComputationGraph]:
    rng = np.random.default_rng(seed)
    return [build_network(random_cell(dialects[i % len(dialects)], rng)) for i in range(n)]


@pytest.fixture(scope="session")
def lowered_graphs() -> list[ComputationGraph]:
    """A few hundred networks across all three dialects."""
    return random_graphs(300, seed=11)


@pytest.fixture(scope="session")
def oracle7():
    from cgnas.oracle import OracleConfig
    return OracleConfig.from_seed(7)


def central_difference(loss_fn, array: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Finite-difference gradient of ``loss_fn()`` w.r.t. ``array`` (perturbed in place).

    ``coords`` limits the probe to a subset of flat indices; other entries stay 0.
    """
    grad = np.zeros(array.size)
    flat = array.reshape(-1)
    for i in (range(array.size) if coords is None else coords):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_fn()
        flat[i] = keep - h
        down = loss_fn()
        flat[i] = keep
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(array.shape)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-7))


def store_gradcheck(loss_fn, store, names=None, per_tensor: int = 6, seed: int = 0,
                    joint: bool = False) -> float:
    """Relative error between backward() and central differences over a store.

    ``loss_fn`` rebuilds the tape from ``store`` and returns a scalar Tensor.
    At most ``per_tensor`` coordinates of each parameter are probed.  By default
    the worst tensor is reported; ``joint`` compares the concatenated vectors.
    """
    from cgnas import autodiff as ad
    rng = np.random.default_rng(seed)
    names = list(store) if names is None else names
    store.zero_grad()
    ad.backward(loss_fn())
    worst = 0.0
    all_ana, all_num = [], []
    for name in names:
        p = store[name]
        coords = rng.choice(p.data.size, size=min(per_tensor, p.data.size), replace=False)
        num = central_difference(lambda: loss_fn().item(), p.data, coords=coords).reshape(-1)[coords]
        ana = p.grad.reshape(-1)[coords]
        all_ana.append(ana)
        all_num.append(num)
        worst = max(worst, rel_err(ana, num))
    return rel_err(np.concatenate(all_ana), np.concatenate(all_num)) if joint else worst


# ------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[str, str] = {}


class Criterion:
    """Collects named checks for one acceptance criterion and records a one-line verdict.

    Use as a context manager; an exception inside the block records a FAIL.
    """

    def __init__(self, cid: str, title: str, budget_s: float, spent_s: float = 0.0):
        self.cid, self.title, self.budget = cid, title, budget_s
        self.spent = spent_s          # time already consumed by shared fixtures
        self.checks: list[tuple[str, bool]] = []

    def check(self, label: str, ok) -> bool:
        self.checks.append((label, bool(ok)))
        return bool(ok)

    def __enter__(self):
        import time
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time
        self.elapsed = self.spent + time.perf_counter() - self._t0
        self.check(f"runtime {self.elapsed:.1f}s < {self.budget:g}s", self.elapsed < self.budget)
        if exc is not None:
            self.checks.append((f"raised {exc_type.__name__}: {exc}", False))
        ok = all(flag for _, flag in self.checks)
        failed = [label for label, flag in self.checks if not flag]
        shown = failed if failed else [label for label, _ in self.checks]
        ACCEPTANCE[self.cid] = f"{'PASS' if ok else 'FAIL'}  {self.cid:<3} {self.title}: " + "; ".join(shown)
        return False

    def assert_ok(self):
        failed = [label for label, flag in self.checks if not flag]
        assert not failed, f"criterion {self.cid} failed: {failed}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: (not c[0].isdigit(), c.zfill(3))):
        terminalreporter.write_line(ACCEPTANCE[cid])
