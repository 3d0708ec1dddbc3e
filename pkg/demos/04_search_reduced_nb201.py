"""Evolutionary search on the 4096-cell reduced nb201 space.

Because the space is small enough to enumerate, the true optimum is known and
each search can be judged against it.  The oracle-guided ranker and a random
ranker get the same query budget on the same five seeds.
"""
import numpy as np

from cgnas.evolution import EAConfig, ea_search
from cgnas.oracle import ArchRecord, OracleConfig, oracle_accuracy
from cgnas.spaces import NB201_REDUCED, enumerate_nb201
from cgnas.training import oracle_estimator, random_estimator

oracle = OracleConfig.from_seed(7)
records = [ArchRecord.from_spec(c) for c in enumerate_nb201(NB201_REDUCED)]
scores = [oracle_accuracy(r.cg, oracle, r.signature) for r in records]
best = max(scores)
print(f"{len(records)} cells, {len({r.digest for r in records})} distinct graphs, optimum {best:.5f}")
print("optimal cell:", records[int(np.argmax(scores))].spec)

ea = EAConfig.preset("nb201", "random", "oracle_direct")
print(f"\nbudget: {ea.p_init} initial + {ea.iterations} x {ea.budget} = {ea.query_limit()} queries")
for name, make in (("oracle_direct", lambda s: oracle_estimator(oracle)),
                   ("random", random_estimator)):
    found = []
    for seed in range(5):
        st = ea_search(ea, "nb201", make(seed), oracle, np.random.default_rng(seed), NB201_REDUCED)
        found.append(st.best.accuracy)
    hits = sum(f == best for f in found)
    print(f"  {name:13s} mean best {np.mean(found):.5f}, optimum hit on {hits}/5 seeds")
