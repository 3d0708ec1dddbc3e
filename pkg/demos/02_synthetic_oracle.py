"""The synthetic accuracy oracle and the datasets drawn from it.

Scores a couple of hand-picked cells, draws a small labelled dataset per
space, writes one manifest to a temp directory and reads it back.
"""
import tempfile
from pathlib import Path

import numpy as np

from cgnas.oracle import (FEATURE_NAMES, OracleConfig, generate_dataset, oracle_accuracy,
                          read_manifest, write_manifest)
from cgnas.spaces import build_network, parse_cell

oracle = OracleConfig.from_seed(7)
print(f"oracle seed 7, digest {oracle.digest()}, {len(FEATURE_NAMES)} features")

for op in ("skip", "avgpool3x3", "conv1x1", "conv3x3"):
    text = f"|{op}~0|+|{op}~0|{op}~1|+|{op}~0|{op}~1|{op}~2|"
    acc = oracle_accuracy(build_network(parse_cell("nb201", text)), oracle)
    print(f"  nb201 all-{op:<11s} {acc:.6f}")

print("\nlabelled samples (seed 0)")
data = {d: generate_dataset(d, 200, 0, oracle) for d in ("nb101", "nb201", "nb301")}
for d, recs in data.items():
    acc = np.array([r.accuracy for r in recs])
    print(f"  {d}: n={len(recs)} mean {acc.mean():.4f} std {acc.std():.4f} "
          f"range [{acc.min():.4f}, {acc.max():.4f}]")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "dataset-nb201.json"
    write_manifest(path, data["nb201"], oracle)
    back = read_manifest(path)
    same = all(a.digest == b.digest and a.accuracy == b.accuracy for a, b in zip(back, data["nb201"]))
    print(f"\nmanifest round trip of {len(back)} records intact: {same}")
