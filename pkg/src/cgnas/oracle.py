"""Deterministic synthetic benchmark standing in for tabular NAS ground truth.

The score of a graph is a logistic function of a fixed random projection of
isomorphism-invariant graph statistics (op histogram, size, density and the
spectral signature), squeezed into ``[lo, hi]`` and shifted per family.
Statistics are centred on a per-family reference mean and scaled by the
pooled within-family spread, so every family gets a comparable label spread.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph import OP_KINDS, ComputationGraph, ensure_valid, wl_hash
from .spaces import (DEFAULT_MACRO, CellSpec, Dialect, MacroConfig, build_network, parse_cell,
                     random_cell)
from .spectral import SpectralSignature, signature

log = logging.getLogger(__name__)

FEATURE_NAMES = ([f"frac_{k.value}" for k in OP_KINDS]
                 + ["log_nodes", "log_edges", "mean_degree"]
                 + [f"eig_{i}" for i in range(11)])
MAX_OFFSET = 0.02
_REFERENCE_SEED = 20240101
_REFERENCE_PER_DIALECT = 64


class SpaceExhaustedError(RuntimeError):
    """The dialect ran out of unique architectures before ``n`` were found."""


def graph_statistics(g: ComputationGraph, sig: Optional[SpectralSignature] = None) -> np.ndarray:
    n = len(g.nodes)
    hist = np.zeros(len(OP_KINDS))
    index = {k: i for i, k in enumerate(OP_KINDS)}
    for node in g.nodes:
        hist[index[node.kind]] += 1
    sig = sig if sig is not None else signature(g)
    skeleton = len(g.undirected_edges())
    return np.concatenate([hist / n, [np.log1p(n), np.log1p(g.num_edges), 2.0 * skeleton / n],
                           sig.values])


@lru_cache(maxsize=4)
def _reference_stats(macro: MacroConfig) -> tuple[dict, np.ndarray]:
    """Per-family feature means and the pooled within-family spread."""
    rng = np.random.default_rng(_REFERENCE_SEED)
    centers, resid = {}, []
    for d in Dialect:
        x = np.stack([graph_statistics(build_network(random_cell(d, rng), macro))
                      for _ in range(_REFERENCE_PER_DIALECT)])
        centers[d.value] = x.mean(axis=0)
        resid.append(x - centers[d.value])
    scale = np.concatenate(resid).std(axis=0)
    scale[scale < 1e-9] = 1.0
    return centers, scale


@dataclass(frozen=True)
class OracleConfig:
    seed: int = 7
    lo: float = 0.85
    hi: float = 0.95
    noise: float = 0.0
    weights: tuple = field(default=(), repr=False)
    offsets: tuple = ()
    centers: tuple = field(default=(), repr=False)
    scale: tuple = field(default=(), repr=False)

    @classmethod
    def from_seed(cls, seed: int = 7, lo: float = 0.85, hi: float = 0.95, noise: float = 0.0,
                  macro: MacroConfig = DEFAULT_MACRO) -> "OracleConfig":
        if not hi - lo > 4 * MAX_OFFSET:
            raise ValueError("score range too narrow for the family offsets")
        rng = np.random.default_rng(seed)
        weights = rng.normal(size=len(FEATURE_NAMES))
        offsets = rng.uniform(-MAX_OFFSET, MAX_OFFSET, size=len(Dialect))
        centers, scale = _reference_stats(macro)
        return cls(seed, lo, hi, noise, tuple(weights.tolist()),
                   tuple((d.value, float(o)) for d, o in zip(Dialect, offsets)),
                   tuple((k, tuple(v.tolist())) for k, v in centers.items()),
                   tuple(scale.tolist()))

    def offset(self, family: Optional[str]) -> float:
        return dict(self.offsets).get(family, 0.0)

    def center(self, family: Optional[str]) -> np.ndarray:
        centers = dict(self.centers)
        if family in centers:
            return np.asarray(centers[family])
        return np.mean([np.asarray(v) for v in centers.values()], axis=0)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "lo": self.lo, "hi": self.hi, "noise": self.noise,
                           "weights": self.weights, "offsets": self.offsets,
                           "centers": self.centers, "scale": self.scale}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OracleConfig":
        d = json.loads(text)
        return cls(d["seed"], d["lo"], d["hi"], d["noise"], tuple(d["weights"]),
                   tuple(tuple(x) for x in d["offsets"]),
                   tuple((k, tuple(v)) for k, v in d["centers"]), tuple(d["scale"]))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def oracle_accuracy(g: ComputationGraph, config: OracleConfig,
                    sig: Optional[SpectralSignature] = None) -> float:
    """Synthetic test accuracy in ``[config.lo, config.hi]``."""
    ensure_valid(g)
    phi = (graph_statistics(g, sig) - config.center(g.family)) / np.asarray(config.scale)
    w = np.asarray(config.weights)
    logit = float(w @ phi) / np.sqrt(len(w))
    if config.noise > 0:
        noise_rng = np.random.default_rng([config.seed, wl_hash(g)])
        logit += config.noise * noise_rng.normal()
    span = config.hi - config.lo - 2 * MAX_OFFSET
    score = config.lo + MAX_OFFSET + span / (1.0 + np.exp(-logit)) + config.offset(g.family)
    return float(min(max(score, config.lo), config.hi))


# ------------------------------------------------------------------ records

@dataclass
class ArchRecord:
    spec: CellSpec
    cg: ComputationGraph
    family: str
    accuracy: Optional[float] = None
    _digest: Optional[int] = field(default=None, repr=False, compare=False)
    _signature: Optional[SpectralSignature] = field(default=None, repr=False, compare=False)
    _features: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_spec(cls, spec: CellSpec, macro: MacroConfig = DEFAULT_MACRO) -> "ArchRecord":
        return cls(spec, build_network(spec, macro), spec.dialect.value)

    @property
    def digest(self) -> int:
        if self._digest is None:
            self._digest = wl_hash(self.cg)
        return self._digest

    @property
    def hexdigest(self) -> str:
        return f"{self.digest:016x}"

    @property
    def signature(self) -> SpectralSignature:
        if self._signature is None:
            self._signature = signature(self.cg)
        return self._signature

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            from .encoder import featurize
            self._features = featurize(self.cg)
        return self._features

    def labeled(self, accuracy: float) -> "ArchRecord":
        return ArchRecord(self.spec, self.cg, self.family, accuracy,
                          self._digest, self._signature, self._features)


def label(record: ArchRecord, config: OracleConfig) -> ArchRecord:
    return record.labeled(oracle_accuracy(record.cg, config, record.signature))


def generate_dataset(dialect: Dialect | str, n: int, seed: int,
                     config: Optional[OracleConfig] = None,
                     labels: Optional[Sequence[str]] = None,
                     macro: MacroConfig = DEFAULT_MACRO,
                     max_misses: int = 5000) -> list[ArchRecord]:
    """``n`` labelled records with distinct WL digests, reproducible per seed."""
    dialect = Dialect(dialect)
    config = config if config is not None else OracleConfig.from_seed()
    rng = np.random.default_rng([seed, list(Dialect).index(dialect)])
    seen: set[int] = set()
    out: list[ArchRecord] = []
    misses = 0
    while len(out) < n:
        rec = ArchRecord.from_spec(random_cell(dialect, rng, labels), macro)
        if rec.digest in seen:
            misses += 1
            if misses > max_misses:
                raise SpaceExhaustedError(
                    f"space exhausted: only {len(out)} unique {dialect.value} architectures found")
            continue
        misses = 0
        seen.add(rec.digest)
        out.append(label(rec, config))
    return out


def dataset_digest(records: Sequence[ArchRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.family}:{r.hexdigest}:{r.accuracy!r};".encode())
    return h.hexdigest()[:16]


def manifest(records: Sequence[ArchRecord], config: OracleConfig) -> dict:
    return {
        "oracle_seed": config.seed,
        "oracle_digest": config.digest(),
        "records": [{"dialect": r.spec.dialect.value, "spec": r.spec.to_text(),
                     "digest": r.hexdigest, "accuracy": r.accuracy} for r in records],
    }


def write_manifest(path: str | Path, records: Sequence[ArchRecord], config: OracleConfig) -> None:
    Path(path).write_text(json.dumps(manifest(records, config), indent=1, sort_keys=True) + "\n")


def read_manifest(path: str | Path, macro: MacroConfig = DEFAULT_MACRO) -> list[ArchRecord]:
    doc = json.loads(Path(path).read_text())
    out = []
    for i, r in enumerate(doc["records"]):
        rec = ArchRecord.from_spec(parse_cell(r["dialect"], r["spec"]), macro)
        if rec.hexdigest != r["digest"]:
            raise ValueError(f"record {i}: digest mismatch ({rec.hexdigest} != {r['digest']})")
        out.append(rec.labeled(r["accuracy"]) if r.get("accuracy") is not None else rec)
    return out


# ------------------------------------------------------------------ queries

@dataclass
class QueryLedger:
    """Unique-architecture query accounting."""
    digests: set = field(default_factory=set)

    @property
    def count(self) -> int:
        return len(self.digests)

    def __contains__(self, digest: int) -> bool:
        return digest in self.digests

    def record(self, digest: int) -> bool:
        if digest in self.digests:
            return False
        self.digests.add(digest)
        return True

    def charge(self, records: Sequence[ArchRecord]) -> None:
        """Count externally labelled architectures (e.g. fine-tuning data) against the budget."""
        for r in records:
            self.record(r.digest)


def query(record: ArchRecord, state, config: OracleConfig) -> ArchRecord:
    """Label ``record``; the ledger on ``state`` grows only for unseen digests."""
    state.ledger.record(record.digest)
    return label(record, config)
