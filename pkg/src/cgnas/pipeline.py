"""Reusable experiment drivers behind ``cgnas repro``, the acceptance suite and the demos."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .autodiff import ParamStore
from .evolution import EAConfig, Estimator, SearchState, ea_search
from .oracle import ArchRecord, OracleConfig, generate_dataset
from .spaces import Dialect
from .training import (PretrainResult, TrainConfig, adapt_normalization, baseline_estimator,
                       cl_estimator, embed_records, evaluate, fine_tune, fine_tune_baseline,
                       pretrain, random_estimator, train_baseline, train_regressor)

log = logging.getLogger(__name__)


def generate_all(sizes: Mapping[Dialect, int], seed: int, oracle: OracleConfig,
                 labels: Callable[[Dialect], Optional[Sequence[str]]] = lambda d: None
                 ) -> dict[Dialect, list[ArchRecord]]:
    return {d: generate_dataset(d, n, seed, oracle, labels(d)) for d, n in sizes.items()}


@dataclass
class TransferResult:
    pretrained: PretrainResult
    regressor: ParamStore        # head fitted on the source families
    tuned: ParamStore            # regressor after few-shot target fine-tuning
    baseline: ParamStore         # GNN baseline after the same fine-tuning
    finetune: list[ArchRecord]
    held_out: list[ArchRecord]
    reference: np.ndarray        # unlabelled target embeddings used for input scaling
    srcc: dict[str, float]
    rows: list[dict] = field(default_factory=list)


def transfer_experiment(data: Mapping[Dialect, Sequence[ArchRecord]], target: Dialect | str,
                        config: TrainConfig, eval_size: int,
                        pretrained: Optional[PretrainResult] = None) -> TransferResult:
    """Pretrain on every graph, regress on the sources, fine-tune and evaluate on the target.

    The first ``config.finetune_size`` target records are the labelled few-shot
    set; the next ``eval_size`` are held out.  Labels of target records other
    than the few-shot set are never read before evaluation.
    """
    target = Dialect(target)
    rows: list[dict] = []
    if pretrained is None:
        pretrained = pretrain([r for recs in data.values() for r in recs], config,
                              on_epoch=lambda e, loss: rows.append(
                                  {"stage": "pretrain", "epoch": e, "loss": loss}))
    store = pretrained.store
    source = [r for d, recs in data.items() if d != target for r in recs]
    tgt = list(data[target])
    if len(tgt) < config.finetune_size + 2:
        raise ValueError(f"target family needs more than {config.finetune_size + 1} graphs")
    ft, held = tgt[:config.finetune_size], tgt[config.finetune_size:][:eval_size]
    reference = embed_records(tgt, store)
    reg = train_regressor(source, store, config)
    tuned = fine_tune(ft, reg, config, reference=reference)
    base = fine_tune_baseline(ft, train_baseline(source, config), config)
    scores = {
        "random": evaluate(random_estimator(config.seed), held),
        "gnn-fine-tune": evaluate(baseline_estimator(base), held),
        "cl-zero-shot": evaluate(cl_estimator(adapt_normalization(reg.copy(), reference)), held),
        "cl-fine-tune": evaluate(cl_estimator(tuned), held),
    }
    for name, rho in scores.items():
        rows.append({"stage": f"srcc:{name}", "epoch": "", "srcc": rho})
        log.info("%s SRCC on %s: %.4f", name, target.value, rho)
    return TransferResult(pretrained, reg, tuned, base, ft, held, reference, scores, rows)


@dataclass
class SearchRun:
    preset: str
    seed: int
    state: SearchState

    @property
    def best(self) -> float:
        return self.state.best.accuracy

    @property
    def queries(self) -> int:
        return self.state.ledger.count


def paired_searches(dialect: Dialect | str, oracle: OracleConfig, predictor: Estimator,
                    finetune: Sequence[ArchRecord], seeds: Sequence[int],
                    labels: Optional[Sequence[str]] = None) -> list[SearchRun]:
    """Random preset vs CL preset on the same seeds; the CL ledger is charged for ``finetune``."""
    runs = []
    for s in seeds:
        for preset, est, charged in (("random", random_estimator(s), ()),
                                     ("cl", predictor, finetune)):
            ea = EAConfig.preset(dialect, preset)
            state = ea_search(ea, dialect, est, oracle, np.random.default_rng(s), labels, charged)
            runs.append(SearchRun(preset, s, state))
    return runs
