"""A shrunken version of the cross-space transfer experiment.

Pretrains the contrastive encoder on a few hundred unlabelled graphs from all
three spaces, fits the accuracy head on nb101 + nb201 labels, fine-tunes on a
handful of nb301 labels and reports held-out rank correlations.  The full-size
run lives in the acceptance suite; this one finishes in a couple of minutes.
"""
import logging

from cgnas.oracle import OracleConfig
from cgnas.pipeline import generate_all, transfer_experiment
from cgnas.spaces import Dialect
from cgnas.training import TrainConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")
logging.getLogger("cgnas.evolution").setLevel(logging.WARNING)

oracle = OracleConfig.from_seed(7)
sizes = {Dialect.NB101: 300, Dialect.NB201: 300, Dialect.NB301: 250}
data = generate_all(sizes, seed=0, oracle=oracle)

cfg = TrainConfig(epochs=4, regressor_epochs=6, finetune_size=50, baseline_epochs=20)
res = transfer_experiment(data, Dialect.NB301, cfg, eval_size=200)

print(f"\npretrain losses: {[round(x, 3) for x in res.pretrained.losses]}")
print(f"fine-tuned on {len(res.finetune)} nb301 graphs, evaluated on {len(res.held_out)}")
for name, rho in res.srcc.items():
    print(f"  {name:14s} SRCC {rho:+.3f}")
