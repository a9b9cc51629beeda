"""Tiny 3-SAT as conditional generation.

An instance with n=4 variables and m=40 clauses is fed as conditioned clause
tokens; the four assignment tokens are generated.  For n=4 each instance's
chain has only 16 states, so the ideal denoiser can be enumerated per
instance and sets the ceiling the trained network is measured against.

    python3 demos/04_tiny_sat.py [--checkpoint .igd_cache/sat.ckpt]
"""

import argparse
from pathlib import Path

import numpy as np

from igd.cli import build_table, build_task, load_config
from igd.nn import NetworkDenoiser, load_model
from igd.oracle import DiscreteTable, EnumerationDenoiser, enumerate_chain
from igd.reverse import generate
from igd.schedule import make_table
from igd.state import ElementLayout
from igd.tasks import brute_force_solutions, check_sat, sat_batch, sat_solved_fraction

parser = argparse.ArgumentParser()
parser.add_argument("--checkpoint", default=".igd_cache/sat.ckpt")
parser.add_argument("--count", type=int, default=100)
args = parser.parse_args()

cfg = load_config("configs/sat.json")
task = build_task(cfg)
table = build_table(cfg, task.layout)
insts = task.test_instances()[: args.count]
inst = insts[0]
print(inst.to_dimacs().splitlines()[0], "...", inst.to_dimacs().splitlines()[-1])

# Ideal denoiser per instance: the target is uniform over that instance's solutions.
lay = ElementLayout(task.n, (), 2)
small = make_table(lay, cfg["schedule"]["rounds"], cfg["schedule"]["phi_probs"])
solved = 0
for k, inst in enumerate(insts):
    p = np.zeros(2**task.n)
    for s in brute_force_solutions(task.n, inst.clauses):
        p[np.ravel_multi_index(tuple(s.astype(int)), (2,) * task.n)] = 1
    chain = enumerate_chain(DiscreteTable(lay, p / p.sum()), small)
    out = generate(EnumerationDenoiser(chain, "binary"), small, n=1, rng=k)
    solved += check_sat(inst, out.tokens[0].astype(bool))[0]
print(f"ideal denoiser solves {solved / len(insts):.2f}")

majority = np.mean([check_sat(i, [(i.clauses == v + 1).sum() >= (i.clauses == -(v + 1)).sum() for v in range(task.n)])[0]
                    for i in insts])
print(f"literal-majority heuristic solves {majority:.2f}")

if Path(args.checkpoint).exists():
    model, _ = load_model(args.checkpoint, table)
    out = generate(NetworkDenoiser(model), table, condition=sat_batch(insts, with_assignment=False), rng=0)
    print(f"trained network solves {sat_solved_fraction(insts, out):.2f}")
else:
    print(f"no checkpoint at {args.checkpoint}; train with: igd train --config configs/sat.json --checkpoint {args.checkpoint}")
