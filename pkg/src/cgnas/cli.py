"""Command-line entry points: ``cgnas <command> [flags]``.

Commands: gen, lower, spectral, pretrain, train, finetune, eval-srcc, search, repro.
Every command writes ``manifest.json`` into ``--out`` with the config digest and seed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import ParamStore
from .contrastive import srcc
from .evolution import EAConfig, ea_search, write_search_log
from .graph import CGFormatError, CGValidationError, deserialize, ensure_valid, serialize
from .oracle import (ArchRecord, OracleConfig, SpaceExhaustedError, generate_dataset,
                     read_manifest, write_manifest)
from .spaces import NB201_REDUCED, CellSpecError, DegenerateCellError, Dialect, lower, parse_cell
from .spectral import distance_matrix, signature, signature_matrix
from .pipeline import generate_all, paired_searches, transfer_experiment
from .training import (TrainConfig, cl_estimator, embed_records, fine_tune,
                       oracle_estimator, pretrain, random_estimator, train_regressor, write_metrics)

log = logging.getLogger("cgnas")


class CLIError(Exception):
    pass


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    oracle_seed: int = 7
    nb201_labels: str = "full"          # "full" or "reduced"
    n_nb101: int = 2000
    n_nb201: int = 2000
    n_nb301: int = 1000
    target: str = "nb301"
    eval_size: int = 500
    finetune_size: int = 50
    batch_size: int = 256
    epochs: int = 10
    lr: float = 1e-3
    pool_size: int = 5
    regressor_epochs: int = 30
    finetune_epochs: int = 100
    finetune_lr: float = 3e-4
    baseline_epochs: int = 60
    search: bool = True
    search_seeds: int = 1

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CLIError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise CLIError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, types[key], lineno)
        return cls(**values)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    def labels(self, dialect: Dialect):
        return NB201_REDUCED if dialect == Dialect.NB201 and self.nb201_labels == "reduced" else None

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                           seed=self.seed, pool_size=self.pool_size,
                           finetune_size=self.finetune_size,
                           regressor_epochs=self.regressor_epochs,
                           finetune_epochs=self.finetune_epochs, finetune_lr=self.finetune_lr,
                           baseline_epochs=self.baseline_epochs)


def _coerce(key: str, value: str, typ: str, lineno: int):
    try:
        if typ == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise CLIError(f"config line {lineno}: {key} expects {typ}, got {value!r}") from None
    return value


def load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CLIError(f"config file {path} not found")
        cfg = RunConfig.from_text(path.read_text())
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# ------------------------------------------------------------------ artifacts

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard(out: Path, digest: str, force: bool) -> None:
    """Refuse to overwrite outputs produced under a different config."""
    path = out / "manifest.json"
    if path.exists() and not force:
        try:
            found = json.loads(path.read_text()).get("config_digest")
        except json.JSONDecodeError:
            found = None
        if found != digest:
            raise CLIError(f"{out} holds outputs for config {found}, not {digest}; "
                           "use --force to overwrite")


def _write_manifest(out: Path, command: str, cfg: RunConfig, artifacts: Sequence[str], **extra):
    doc = {"command": command, "config_digest": cfg.digest(), "seed": cfg.seed,
           "config": asdict(cfg), "artifacts": sorted(artifacts), **extra}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    line = "-+-".join("-" * w for w in widths)
    out = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    return "\n".join(out[:1] + [line] + out[1:])


def _cell(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _read_records(paths: Sequence[str]) -> list[ArchRecord]:
    records = []
    for p in paths:
        if not Path(p).exists():
            raise CLIError(f"dataset manifest {p} not found")
        records += read_manifest(p)
    return records


def _oracle(cfg: RunConfig) -> OracleConfig:
    return OracleConfig.from_seed(cfg.oracle_seed)


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    _guard(out, cfg.digest(), args.force)
    oracle = _oracle(cfg)
    dialects = [Dialect(args.dialect)] if args.dialect else list(Dialect)
    written, rows = [], []
    for d in dialects:
        n = args.n if args.n is not None else getattr(cfg, f"n_{d.value}")
        records = generate_dataset(d, n, cfg.seed, oracle, cfg.labels(d))
        name = f"dataset-{d.value}.json"
        write_manifest(out / name, records, oracle)
        written.append(name)
        acc = np.array([r.accuracy for r in records])
        rows.append([d.value, len(records), float(acc.mean()), float(acc.std())])
    _write_manifest(out, "gen", cfg, written)
    print(_table(["dialect", "n", "mean acc", "std acc"], rows))
    return 0


def cmd_lower(args) -> int:
    cfg = load_config(args)
    if not args.dialect or args.spec is None:
        raise CLIError("lower needs --dialect and --spec")
    out = _out_dir(args)
    _guard(out, cfg.digest(), args.force)
    g = lower(parse_cell(args.dialect, args.spec))
    ensure_valid(g)
    (out / "cg.json").write_text(serialize(g))
    _write_manifest(out, "lower", cfg, ["cg.json"])
    print(f"{len(g.nodes)} nodes, {g.num_edges} edges -> {out / 'cg.json'}")
    return 0


def cmd_spectral(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    _guard(out, cfg.digest(), args.force)
    graphs, names = [], []
    for p in args.inputs:
        path = Path(p)
        if not path.exists():
            raise CLIError(f"{p} not found")
        if path.name.startswith("dataset-") or '"records"' in path.read_text()[:4096]:
            recs = read_manifest(path)
            graphs += [r.cg for r in recs]
            names += [f"{path.name}:{r.hexdigest}" for r in recs]
        else:
            graphs.append(deserialize(path.read_text()))
            names.append(path.name)
    sigs = [signature(g) for g in graphs]
    with open(out / "signatures.csv", "w", newline="") as fh:
        fh.write(f"# config_digest={cfg.digest()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["graph", "nodes"] + [f"lambda_{i}" for i in range(len(sigs[0].values))] if sigs else [])
        for name, s in zip(names, sigs):
            w.writerow([name, s.node_count] + [f"{v:.12g}" for v in s.values])
    artifacts = ["signatures.csv"]
    if len(sigs) > 1:
        d = distance_matrix(signature_matrix(sigs))
        np.savetxt(out / "distances.csv", d, delimiter=",", fmt="%.12g",
                   header=f"config_digest={cfg.digest()}")
        artifacts.append("distances.csv")
        if len(sigs) == 2:
            print(f"spectral distance: {d[0, 1]:.12g}")
    _write_manifest(out, "spectral", cfg, artifacts)
    for name, s in zip(names[:20], sigs[:20]):
        print(name, " ".join(f"{v:.4f}" for v in s.values))
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    _guard(out, cfg.digest(), args.force)
    records = _read_records(args.data)
    rows = []
    res = pretrain(records, cfg.train_config(), cache_dir=out / "cache",
                   on_epoch=lambda e, loss: rows.append({"stage": "pretrain", "epoch": e, "loss": loss}))
    res.store.save(out / "encoder.npz", cfg.digest())
    write_metrics(out / "pretrain.csv", rows, cfg.digest())
    _write_manifest(out, "pretrain", cfg, ["encoder.npz", "pretrain.csv"],
                    excluded_families=res.excluded, skipped_anchors=res.stats.skipped_anchors)
    print(_table(["epoch", "loss"], [[r["epoch"], r["loss"]] for r in rows]))
    return 0


def _load_store(path: str) -> ParamStore:
    if not Path(path).exists():
        raise CLIError(f"checkpoint {path} not found")
    return ParamStore.load(path)


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    _guard(out, cfg.digest(), args.force)
    store = train_regressor(_read_records(args.data), _load_store(args.encoder), cfg.train_config())
    store.save(out / "predictor.npz", cfg.digest())
    _write_manifest(out, "train", cfg, ["predictor.npz"])
    print(f"predictor head trained -> {out / 'predictor.npz'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    _guard(out, cfg.digest(), args.force)
    records = _read_records(args.data)[:cfg.finetune_size]
    store = _load_store(args.predictor)
    reference = embed_records(_read_records(args.reference), store) if args.reference else None
    store = fine_tune(records, store, cfg.train_config(), reference=reference)
    store.save(out / "finetuned.npz", cfg.digest())
    _write_manifest(out, "finetune", cfg, ["finetuned.npz"], finetune_records=len(records))
    print(f"fine-tuned on {len(records)} records -> {out / 'finetuned.npz'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    _guard(out, cfg.digest(), args.force)
    if args.file:
        path = Path(args.file)
        if not path.exists():
            raise CLIError(f"{path} not found")
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
        try:
            pred = [float(r["prediction"]) for r in rows]
            truth = [float(r["truth"]) for r in rows]
        except (KeyError, ValueError) as exc:
            raise CLIError(f"{path}: expected numeric 'prediction' and 'truth' columns ({exc})") from None
    elif args.predictor and args.data:
        records = _read_records(args.data)
        pred = list(cl_estimator(_load_store(args.predictor))(records))
        truth = [r.accuracy for r in records]
    else:
        raise CLIError("eval-srcc needs --file, or --predictor with --data")
    rho = srcc(pred, truth)
    write_metrics(out / "srcc.csv", [{"stage": "eval", "epoch": "", "srcc": rho}], cfg.digest())
    _write_manifest(out, "eval-srcc", cfg, ["srcc.csv"])
    print(round(rho, 6))
    return 0


def _search_estimator(kind: str, cfg: RunConfig, oracle: OracleConfig, predictor: Optional[str],
                      seed: int):
    if kind == "oracle_direct":
        return oracle_estimator(oracle)
    if kind == "cl_predictor":
        if not predictor:
            raise CLIError("the cl_predictor estimator needs --predictor")
        return cl_estimator(_load_store(predictor))
    return random_estimator(seed)


def cmd_search(args) -> int:
    cfg = load_config(args)
    if not args.dialect:
        raise CLIError("search needs --dialect")
    out = _out_dir(args)
    _guard(out, cfg.digest(), args.force)
    dialect = Dialect(args.dialect)
    ea = EAConfig.preset(dialect, args.preset, args.estimator)
    oracle = _oracle(cfg)
    finetune = _read_records(args.finetune) if args.finetune else []
    estimator = _search_estimator(ea.estimator, cfg, oracle, args.predictor, cfg.seed)
    state = ea_search(ea, dialect, estimator, oracle, np.random.default_rng(cfg.seed),
                      cfg.labels(dialect), finetune)
    write_search_log(out / "search.csv", state, cfg.digest())
    best = state.best
    report = _table(["method", "dialect", "best acc", "#Q"],
                    [[ea.estimator, dialect.value, best.accuracy, state.ledger.count]])
    report += f"\nbest cell: {best.spec.to_text()}\n"
    (out / "report.txt").write_text(f"config_digest={cfg.digest()}\n{report}")
    _write_manifest(out, "search", cfg, ["search.csv", "report.txt"], queries=state.ledger.count)
    print(report, end="")
    return 0


def run_pipeline(cfg: RunConfig, out: Path) -> tuple[list[dict], str]:
    """Generate -> pretrain -> regress -> fine-tune -> evaluate (-> search); returns metric rows."""
    oracle = _oracle(cfg)
    target = Dialect(cfg.target)
    data = generate_all({d: getattr(cfg, f"n_{d.value}") for d in Dialect}, cfg.seed, oracle,
                        cfg.labels)
    for d, recs in data.items():
        write_manifest(out / f"dataset-{d.value}.json", recs, oracle)
    res = transfer_experiment(data, target, cfg.train_config(), cfg.eval_size)
    rows = res.rows
    summary = _table(["method", f"SRCC ({target.value})"], list(res.srcc.items()))
    if cfg.search:
        runs = paired_searches(target, oracle, cl_estimator(res.tuned), res.finetune,
                               [cfg.seed + s for s in range(cfg.search_seeds)], cfg.labels(target))
        for run in runs:
            rows.append({"stage": f"search:{run.preset}:{run.seed - cfg.seed}",
                         "epoch": run.queries, "srcc": "", "loss": run.best})
        summary += "\n\n" + _table(["method", "seed", "best acc", "#Q"],
                                    [[run.preset, run.seed, run.best, run.queries] for run in runs])
    return rows, summary


def cmd_repro(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    _guard(out, cfg.digest(), args.force)
    rows, summary = run_pipeline(cfg, out)
    write_metrics(out / "metrics.csv", rows, cfg.digest())
    (out / "summary.txt").write_text(f"config_digest={cfg.digest()}\n{summary}\n")
    artifacts = ["metrics.csv", "summary.txt"] + [f"dataset-{d.value}.json" for d in Dialect]
    _write_manifest(out, "repro", cfg, artifacts)
    print(summary)
    return 0


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--dialect", choices=[d.value for d in Dialect])
    common.add_argument("--preset", choices=["random", "cl"], default="random")
    common.add_argument("--force", action="store_true",
                        help="overwrite outputs written under a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cgnas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen", parents=[common], help="generate labelled datasets")
    p.add_argument("--n", type=int, help="records per dialect (default from config)")
    p.set_defaults(fn=cmd_gen)
    p = sub.add_parser("lower", parents=[common], help="lower a cell spec to a CG file")
    p.add_argument("--spec", help="cell text in the dialect's format")
    p.set_defaults(fn=cmd_lower)
    p = sub.add_parser("spectral", parents=[common], help="dump signatures and distances")
    p.add_argument("inputs", nargs="+", help="CG files or dataset manifests")
    p.set_defaults(fn=cmd_spectral)
    p = sub.add_parser("pretrain", parents=[common], help="contrastive encoder pretraining")
    p.add_argument("--data", nargs="+", required=True, help="dataset manifests")
    p.set_defaults(fn=cmd_pretrain)
    p = sub.add_parser("train", parents=[common], help="fit the predictor head")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.set_defaults(fn=cmd_train)
    p = sub.add_parser("finetune", parents=[common], help="fine-tune the predictor head")
    p.add_argument("--predictor", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--reference", nargs="+", help="unlabelled target manifests for input scaling")
    p.set_defaults(fn=cmd_finetune)
    p = sub.add_parser("eval-srcc", parents=[common], help="rank correlation of predictions")
    p.add_argument("--file", help="CSV with prediction,truth columns")
    p.add_argument("--predictor")
    p.add_argument("--data", nargs="+")
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("search", parents=[common], help="run an evolutionary search preset")
    p.add_argument("--estimator", choices=["random", "cl_predictor", "oracle_direct"])
    p.add_argument("--predictor")
    p.add_argument("--finetune", nargs="+", help="manifests charged to the query ledger")
    p.set_defaults(fn=cmd_search)
    p = sub.add_parser("repro", parents=[common], help="full pipeline from one config and seed")
    p.set_defaults(fn=cmd_repro)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CLIError, CGFormatError, CGValidationError, CellSpecError, DegenerateCellError,
            SpaceExhaustedError, ValueError, OSError) as exc:
        print(f"cgnas {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
