"""Predictor-guided evolutionary search with unique-query accounting."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .oracle import ArchRecord, OracleConfig, QueryLedger, query
from .spaces import (DEFAULT_MACRO, NB101_MAX_EDGES, NB101_MAX_VERTICES, VOCABULARY, CellSpec,
                     DegenerateCellError, Dialect, MacroConfig, NB101Cell, NB201Cell, NB301Cell,
                     is_valid, prune_nb101, random_cell)

log = logging.getLogger(__name__)

Estimator = Callable[[Sequence[ArchRecord]], np.ndarray]
MAX_ATTEMPTS = 20

# (k, B, P_init, T) per dialect and preset
PRESETS = {
    (Dialect.NB101, "random"): (20, 100, 100, 6),
    (Dialect.NB101, "cl"): (20, 100, 50, 6),
    (Dialect.NB201, "random"): (10, 20, 10, 4),
    (Dialect.NB201, "cl"): (10, 10, 10, 5),
    (Dialect.NB301, "random"): (20, 100, 100, 7),
    (Dialect.NB301, "cl"): (20, 100, 50, 7),
}


class MutationExhausted(RuntimeError):
    """No valid cell was produced within the attempt limit."""


@dataclass(frozen=True)
class EAConfig:
    k: int
    budget: int          # B: oracle queries per iteration
    p_init: int
    iterations: int      # T
    estimator: str = "random"
    offspring_factor: int = 10

    def __post_init__(self):
        if min(self.k, self.budget, self.p_init) < 1 or self.iterations < 0:
            raise ValueError("k, budget and p_init must be positive and iterations non-negative")
        if self.estimator not in ("random", "cl_predictor", "oracle_direct"):
            raise ValueError(f"unknown estimator {self.estimator!r}")

    @classmethod
    def preset(cls, dialect: Dialect | str, preset: str = "random",
               estimator: Optional[str] = None) -> "EAConfig":
        dialect = Dialect(dialect)
        if (dialect, preset) not in PRESETS:
            raise ValueError(f"unknown preset {preset!r} (expected 'random' or 'cl')")
        k, b, p, t = PRESETS[(dialect, preset)]
        default = "cl_predictor" if preset == "cl" else "random"
        return cls(k, b, p, t, estimator or default)

    def query_limit(self, finetune_charge: int = 0) -> int:
        return self.p_init + self.iterations * self.budget + finetune_charge


# ------------------------------------------------------------------ variation

def _vocab(dialect: Dialect, labels: Optional[Sequence[str]]) -> list[str]:
    return list(labels) if labels is not None else list(VOCABULARY[dialect])


def _other_label(current: str, vocab: Sequence[str], rng: np.random.Generator) -> str:
    choices = [v for v in vocab if v != current]
    if not choices:
        raise MutationExhausted("mutation exhausted: vocabulary has a single label")
    return choices[rng.integers(len(choices))]


def _nb101_edit(spec: NB101Cell, vocab: Sequence[str], rng: np.random.Generator) -> NB101Cell:
    m = np.array(spec.matrix, dtype=int)
    ops = list(spec.ops)
    n = len(ops)
    edges = int(m.sum())
    non_edges = [(i, j) for i in range(n) for j in range(i + 1, n) if not m[i, j]]
    kinds = []
    if n > 2 and len(vocab) > 1:
        kinds.append("swap")
    if n < NB101_MAX_VERTICES and edges + 2 <= NB101_MAX_EDGES:
        kinds.append("add_op")
    if n > 2:
        kinds.append("remove_op")
    if non_edges and edges < NB101_MAX_EDGES:
        kinds.append("add_edge")
    if edges > 1:
        kinds.append("remove_edge")
    kind = kinds[rng.integers(len(kinds))]
    if kind == "swap":
        v = 1 + int(rng.integers(n - 2))
        ops[v] = _other_label(ops[v], vocab, rng)
    elif kind == "add_op":
        # new vertex at position v, fed by an earlier vertex and feeding a later one
        v = 1 + int(rng.integers(n - 1))
        m = np.insert(np.insert(m, v, 0, axis=0), v, 0, axis=1)
        ops.insert(v, vocab[rng.integers(len(vocab))])
        m[int(rng.integers(v)), v] = 1
        m[v, v + 1 + int(rng.integers(n - v))] = 1
    elif kind == "remove_op":
        v = 1 + int(rng.integers(n - 2))
        preds, succs = np.flatnonzero(m[:, v]), np.flatnonzero(m[v, :])
        for p in preds:
            m[p, succs] = 1
        m = np.delete(np.delete(m, v, axis=0), v, axis=1)
        del ops[v]
    elif kind == "add_edge":
        i, j = non_edges[rng.integers(len(non_edges))]
        m[i, j] = 1
    else:
        ones = np.argwhere(m)
        i, j = ones[rng.integers(len(ones))]
        m[i, j] = 0
    return prune_nb101(m, ops)


def _nb301_edit(spec: NB301Cell, vocab: Sequence[str], rng: np.random.Generator) -> NB301Cell:
    nodes = [list(n) for n in spec.nodes]
    if rng.random() < 0.5:
        pos = int(rng.integers(2 * len(nodes)))
        return spec.with_operator(pos, _other_label(spec.operators()[pos], vocab, rng))
    j = int(rng.integers(len(nodes)))
    slot = int(rng.integers(2))
    a, b = nodes[j][0], nodes[j][1]
    choices = [x for x in range(j + 2) if x not in (a, b)]
    if not choices:      # first node can only read the two cell inputs: swap the op instead
        pos = 2 * j + slot
        return spec.with_operator(pos, _other_label(spec.operators()[pos], vocab, rng))
    nodes[j][slot] = choices[rng.integers(len(choices))]
    return NB301Cell(tuple(tuple(n) for n in nodes))


def _one_edit(spec: CellSpec, vocab: Sequence[str], rng: np.random.Generator) -> CellSpec:
    if isinstance(spec, NB201Cell):
        pos = int(rng.integers(6))
        return spec.with_operator(pos, _other_label(spec.edges[pos], vocab, rng))
    if isinstance(spec, NB301Cell):
        return _nb301_edit(spec, vocab, rng)
    return _nb101_edit(spec, vocab, rng)


def mutate(spec: CellSpec, edits: int, rng: np.random.Generator,
           labels: Optional[Sequence[str]] = None) -> CellSpec:
    """Apply ``edits`` successive single edits, resampling any edit that breaks the dialect."""
    if edits < 1:
        raise ValueError("edits must be at least 1")
    vocab = _vocab(spec.dialect, labels)
    for _ in range(edits):
        for _attempt in range(MAX_ATTEMPTS):
            try:
                child = _one_edit(spec, vocab, rng)
            except DegenerateCellError:
                continue
            if is_valid(child):
                spec = child
                break
        else:
            raise MutationExhausted(f"mutation exhausted after {MAX_ATTEMPTS} attempts")
    return spec


def crossover(p1: CellSpec, p2: CellSpec, rng: np.random.Generator,
              labels: Optional[Sequence[str]] = None) -> CellSpec:
    """Copy one randomly chosen operator of ``p2`` over a different operator of ``p1``."""
    if p1.dialect != p2.dialect:
        raise ValueError("crossover needs parents of the same dialect")
    ops1, ops2 = p1.operators(), p2.operators()
    positions = [i for i, o in enumerate(ops1) if any(x != o for x in ops2)]
    if ops1 == ops2 or not positions:
        log.warning("crossover parents are operator-identical; mutating instead")
        return mutate(p1, 1, rng, labels)
    for _ in range(MAX_ATTEMPTS):
        i = positions[rng.integers(len(positions))]
        donors = [x for x in ops2 if x != ops1[i]]
        child = p1.with_operator(i, donors[rng.integers(len(donors))])
        if is_valid(child):
            return child
    log.warning("crossover produced no valid child; mutating instead")
    return mutate(p1, 1, rng, labels)


# ------------------------------------------------------------------ search

@dataclass
class LogRow:
    iteration: int
    digest: str
    estimate: Optional[float]
    accuracy: float
    queries: int


@dataclass
class SearchState:
    population: list[ArchRecord] = field(default_factory=list)
    ledger: QueryLedger = field(default_factory=QueryLedger)
    history: list[float] = field(default_factory=list)
    log: list[LogRow] = field(default_factory=list)

    @property
    def best(self) -> ArchRecord:
        return top_k(self.population, 1)[0]


def top_k(records: Sequence[ArchRecord], k: int) -> list[ArchRecord]:
    """Highest true accuracy first; equal accuracies ordered by digest."""
    return sorted(records, key=lambda r: (-r.accuracy, r.digest))[:k]


def rank(candidates: Sequence[ArchRecord], estimator: Estimator) -> list[tuple[ArchRecord, float]]:
    """Candidates by descending estimate, ties broken by digest."""
    scores = np.asarray(estimator(candidates), dtype=float)
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i].digest))
    return [(candidates[i], float(scores[i])) for i in order]


def _offspring(parents: Sequence[ArchRecord], want: int, state: SearchState,
               rng: np.random.Generator, labels, macro: MacroConfig) -> list[ArchRecord]:
    found: dict[int, ArchRecord] = {}
    for _ in range(20 * want):
        if len(found) >= want:
            break
        if len(parents) >= 2:
            a, b = rng.choice(len(parents), size=2, replace=False)
            child = crossover(parents[a].spec, parents[b].spec, rng, labels)
        else:
            child = mutate(parents[0].spec, 1, rng, labels)
        child = mutate(child, 1 + int(rng.random() < 0.5), rng, labels)
        rec = ArchRecord.from_spec(child, macro)
        if rec.digest not in state.ledger and rec.digest not in found:
            found[rec.digest] = rec
    return list(found.values())


def ea_search(config: EAConfig, dialect: Dialect | str, estimator: Estimator,
              oracle: OracleConfig, rng: np.random.Generator,
              labels: Optional[Sequence[str]] = None,
              finetune: Sequence[ArchRecord] = (),
              macro: MacroConfig = DEFAULT_MACRO) -> SearchState:
    """Evolutionary search; ``finetune`` records are charged to the ledger up front."""
    dialect = Dialect(dialect)
    state = SearchState()
    state.ledger.charge(finetune)
    misses = 0
    while len(state.population) < config.p_init:
        rec = ArchRecord.from_spec(random_cell(dialect, rng, labels), macro)
        if rec.digest in state.ledger:
            misses += 1
            if misses > 5000:
                raise RuntimeError("space exhausted while sampling the initial population")
            continue
        state.population.append(query(rec, state, oracle))
        state.log.append(LogRow(0, rec.hexdigest, None, state.population[-1].accuracy,
                                state.ledger.count))
    state.history.append(state.best.accuracy)
    for t in range(1, config.iterations + 1):
        parents = top_k(state.population, config.k)
        pool = _offspring(parents, config.offspring_factor * config.budget, state, rng, labels, macro)
        chosen = rank(pool, estimator)[:config.budget] if pool else []
        if len(chosen) < config.budget:
            log.warning("iteration %d: only %d unqueried candidates for a budget of %d",
                        t, len(chosen), config.budget)
        for rec, est in chosen:
            labeled = query(rec, state, oracle)
            state.population.append(labeled)
            state.log.append(LogRow(t, rec.hexdigest, est, labeled.accuracy, state.ledger.count))
        state.history.append(state.best.accuracy)
        log.info("iteration %d: best %.5f, queries %d", t, state.history[-1], state.ledger.count)
    return state


def write_search_log(path: str | Path, state: SearchState, config_digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={config_digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "digest", "estimate", "accuracy", "queries"])
        for row in state.log:
            est = "" if row.estimate is None else f"{row.estimate:.10g}"
            w.writerow([row.iteration, row.digest, est, f"{row.accuracy:.10g}", row.queries])
