"""A label and a scalar generated together.

The target is label 0 with x ~ N(-1, 0.5^2) or label 1 with x ~ N(+1, 0.5^2).
The ideal denoiser knows the mixture in closed form, so the only error left is
the sampler's time discretisation.

    python3 demos/02_mixed_toy.py [--n 20000]
"""

import argparse

import numpy as np

from igd.oracle import MixtureDenoiser, labeled_gmm
from igd.reverse import SamplerConfig, generate
from igd.schedule import BetaSchedule, make_table
from igd.tasks import metric_w1

parser = argparse.ArgumentParser()
parser.add_argument("--n", type=int, default=20_000)
args = parser.parse_args()

target = labeled_gmm([0.5, 0.5], [[-1.0], [1.0]], [0.5, 0.5])
table = make_table(target.layout, 4, [0.5] * 4, [200] * 4, BetaSchedule("cosine", 1e-4, 0.03))
print(f"T = {table.T} sequence steps, {table.continuous.betas.size} continuous steps, "
      f"final signal level {table.continuous.signal[-1]:.2e}")

ref = target.sample(args.n, np.random.default_rng(1)).vectors[0][:, 0]
for update in ("score", "plain"):
    out = generate(MixtureDenoiser(target, table), table, SamplerConfig(continuous_update=update), n=args.n, rng=0)
    lab, x = out.tokens[:, 0], out.vectors[0][:, 0]
    print(f"\n{update} update: P(label=1) = {lab.mean():.3f}, "
          f"mean x | 0 = {x[lab == 0].mean():+.3f}, mean x | 1 = {x[lab == 1].mean():+.3f}, "
          f"W1 = {metric_w1(x, ref):.4f}")
    hist, edges = np.histogram(x, bins=24, range=(-3, 3))
    for h, e in zip(hist, edges):
        print(f"{e:+5.2f} {'#' * int(60 * h / hist.max())}")
