"""Train the network on the ring task and compare it with the ideal denoiser.

Each sample is a label c in 0..3 and a 2D point near angle c * 90 degrees.
The constraint is that the point falls in its own label's sector.  The full
recipe is configs/ring.json (about four CPU minutes); --steps shortens it.

    python3 demos/03_ring_train.py [--steps 4000] [--n 2000]
"""

import argparse
import time

import numpy as np
import torch

from igd.cli import build_table, build_task, load_config, model_config, trainer_config
from igd.nn import NetworkDenoiser, train
from igd.oracle import MixtureDenoiser
from igd.reverse import SamplerConfig, generate, redenoise
from igd.tasks import metric_w1_proxy

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=4000)
parser.add_argument("--n", type=int, default=2000)
args = parser.parse_args()
torch.set_num_threads(1)

cfg = load_config("configs/ring.json")
cfg["trainer"]["steps"] = args.steps
task = build_task(cfg)
table = build_table(cfg, task.layout)
print(f"ideal own-sector probability (quadrature): {task.ideal_accuracy():.6f}")

t0 = time.process_time()
res = train(task.sample, table, model_config(cfg), trainer_config(cfg), seed=0)
print(f"trained {args.steps} steps in {time.process_time() - t0:.0f} s CPU; last loss {res.log[-1]['loss']:.3f}")

ref = task.sample(args.n, np.random.default_rng(100)).vectors[0]
for name, den in (("ideal", MixtureDenoiser(task.target(), table, "binary")), ("network", NetworkDenoiser(res.ema))):
    out = generate(den, table, n=args.n, rng=1)
    print(f"{name:8s} accuracy {task.constraint_accuracy(out):.4f}  W1 proxy {metric_w1_proxy(out.vectors[0], ref):.4f}")

# ReDeNoise: push the finished samples back through the lowest-noise round and denoise again.
scfg = SamplerConfig(redenoise_rounds=1)
redenoise(out, NetworkDenoiser(res.ema), table, scfg, 2, iterations=6,
          callback=lambda it, b: print(f"ReDeNoise {it + 1}: W1 proxy {metric_w1_proxy(b.vectors[0], ref):.4f}"))
