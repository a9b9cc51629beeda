"""Command-line entry point: ``igd {verify,train,sample,eval,redenoise}``.

A run is described by one JSON config file.  Missing sections take the
defaults below; the effective config is echoed into every report and its
hash is written into every output.  Exit codes: 0 ok, 1 assertion failure,
2 validation error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from .forward import forward_walk, sample_state_at
from .oracle import (
    DiscreteTable,
    EnumerationDenoiser,
    GaussianMixture,
    Report,
    continuous_gap_factor,
    enumerate_chain,
    fd_score,
    gmm_ideal_eps,
    labeled_gmm,
    quad_ideal_eps,
    tv,
    verify_lemma1,
    wasserstein_contraction_check,
)
from .reverse import SamplerConfig, SamplerError, binary_to_conditional, generate, redenoise
from .rng import KeyedRNG
from .schedule import BetaSchedule, ScheduleError, make_table
from .state import ElementLayout, SequenceBatch

EXIT_OK, EXIT_ASSERT, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3

TASKS = ("sat", "ring", "tabular", "toy-discrete", "toy-mixed")

DEFAULTS = {
    "task": "toy-discrete",
    "seed": 0,
    "task_params": {},
    "schedule": {
        "noise_order": "round_robin",
        "rounds": 4,
        "phi_probs": [0.5, 0.5, 0.5, 0.5],
        "steps_per_round": [200, 200, 200, 200],
        "beta": {"kind": "cosine", "a": 1e-4, "b": 0.03},
    },
    "model": {},
    "trainer": {},
    "sampler": {},
    "paths": {},
}

SECTIONS = set(DEFAULTS)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    raw = {} if path is None else json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    validate_config(cfg)
    return cfg


def config_hash(cfg: dict, sections=None) -> str:
    part = cfg if sections is None else {k: cfg[k] for k in sections}
    return hashlib.sha256(json.dumps(part, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def training_hash(cfg: dict) -> str:
    """Hash of everything a checkpoint depends on (sampler settings and paths excluded)."""
    return config_hash(cfg, ("task", "task_params", "schedule", "model", "trainer"))


def validate_config(cfg: dict) -> None:
    if cfg["task"] not in TASKS:
        raise ConfigError(f"unknown task {cfg['task']!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    sch = cfg["schedule"]
    beta = sch.get("beta", {})
    if beta.get("kind", "cosine") != "table":
        a, b = beta.get("a", 1e-4), beta.get("b", 0.03)
        if not (0 < a <= b < 1):
            raise ConfigError(f"beta schedule needs 0 < a <= b < 1, got a={a}, b={b}")
    if len(sch["phi_probs"]) != sch["rounds"]:
        raise ConfigError("phi_probs needs one entry per round")
    if any(not 0 <= p <= 1 for p in sch["phi_probs"]):
        raise ConfigError("phi probabilities must lie in [0, 1]")
    build_table(cfg)
    model_config(cfg)
    trainer_config(cfg)
    sampler_config(cfg)


def build_task(cfg: dict):
    from . import tasks

    name, p = cfg["task"], cfg["task_params"]
    if name == "ring":
        return tasks.RingTask(p.get("C", 4), p.get("sigma", 0.15), p.get("radius", 1.0))
    if name == "sat":
        return SatSetup(p.get("n", 4), p.get("m"), p.get("n_test", 300), p.get("test_fraction", 0.5), p.get("test_seed", 1234))
    if name == "tabular":
        if "csv" not in p or "manifest" not in p:
            raise ConfigError("tabular task needs task_params.csv and task_params.manifest")
        return tasks.TabularDataset.from_csv(p["csv"], p["manifest"], p.get("test_fraction", 0.2), cfg["seed"])
    if name == "toy-discrete":
        return toy_discrete_target(p)
    return toy_mixed_target(p)


def task_layout(cfg: dict, task=None) -> ElementLayout:
    task = task if task is not None else build_task(cfg)
    return task.layout


def build_table(cfg: dict, layout: ElementLayout | None = None):
    sch = cfg["schedule"]
    if layout is None:
        layout = task_layout(cfg)
    b = sch.get("beta", {})
    try:
        beta = BetaSchedule(b.get("kind", "cosine"), b.get("a", 1e-4), b.get("b", 0.03), b.get("table"))
        return make_table(layout, sch["rounds"], sch["phi_probs"], sch.get("steps_per_round"), beta, sch.get("noise_order", "round_robin"))
    except (ScheduleError, TypeError) as e:
        raise ConfigError(str(e)) from e


def model_config(cfg):
    from .nn import DiscoDitConfig

    try:
        return DiscoDitConfig(**cfg["model"])
    except TypeError as e:
        raise ConfigError(str(e)) from e


def trainer_config(cfg):
    from .nn import TrainerConfig

    try:
        return TrainerConfig(**cfg["trainer"])
    except TypeError as e:
        raise ConfigError(str(e)) from e


def sampler_config(cfg) -> SamplerConfig:
    try:
        return SamplerConfig(**cfg["sampler"])
    except TypeError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# tasks as seen by the command line


def toy_discrete_target(p: dict | None = None) -> DiscreteTable:
    """Three binary tokens with a full-support, non-uniform law (``probs`` overrides)."""
    p = p or {}
    lay = ElementLayout(3, (), 2)
    probs = np.asarray(p.get("probs", [0.22, 0.03, 0.05, 0.15, 0.10, 0.20, 0.17, 0.08]), dtype=np.float64)
    return DiscreteTable(lay, probs / probs.sum())


def toy_mixed_target(p: dict | None = None):
    """A binary label and a scalar: ``N(-1, 0.5^2)`` for label 0, ``N(+1, 0.5^2)`` for label 1."""
    p = p or {}
    mu = p.get("mu", 1.0)
    return labeled_gmm(p.get("label_probs", [0.5, 0.5]), [[-mu], [mu]], [p.get("sigma", 0.5)] * 2)


class SatSetup:
    """Tiny SAT with a held-out set fixed by its own seed; training draws avoid the held-out hash region."""

    def __init__(self, n, m, n_test, test_fraction, test_seed):
        from . import tasks

        self.n = n
        self.m = tasks.clause_count(n) if m is None else m
        self.n_test = n_test
        self.test_fraction = test_fraction
        self.test_seed = test_seed
        self.layout = tasks.sat_layout(n, self.m)

    def test_instances(self):
        from . import tasks

        gen = np.random.default_rng(self.test_seed)
        out = []
        while len(out) < self.n_test:
            for inst in tasks.sample_sat(self.n, 256, gen, self.m):
                if tasks.split_by_hash([inst], self.test_fraction)[1] and len(out) < self.n_test:
                    out.append(inst)
        return out

    def sample(self, k, gen):
        from . import tasks

        return tasks.sat_batch(tasks.sample_sat(self.n, k, gen, self.m, exclude_test=self.test_fraction))


def data_fn(cfg, task):
    if cfg["task"] == "tabular":
        train = task.train
        return lambda k, gen: train.select(gen.integers(len(train), size=k))
    return lambda k, gen: task.sample(k, gen)


# ---------------------------------------------------------------------------
# sample files


def _fmt(x: float) -> str:
    return repr(float(x))


def write_samples(path, batch: SequenceBatch | None, header: dict) -> None:
    lines = [f"# {k}: {v}" for k, v in header.items()]
    if batch is not None:
        for r in range(len(batch)):
            toks = " ".join(str(int(t)) for t in batch.tokens[r])
            vecs = " ; ".join(" ".join(_fmt(x) for x in v[r]) for v in batch.vectors)
            lines.append(toks + (" | " + vecs if batch.vectors else ""))
    text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def read_samples(path, layout: ElementLayout) -> tuple[dict, SequenceBatch | None]:
    header, toks, vecs = {}, [], [[] for _ in layout.dims]
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            header[k.strip()] = v.strip()
            continue
        if not line.strip():
            continue
        left, _, right = line.partition("|")
        toks.append([int(x) for x in left.split()])
        if layout.dims:
            for j, part in enumerate(right.split(";")):
                vecs[j].append([float(x) for x in part.split()])
    if not toks:
        return header, None
    tokens = np.array(toks, dtype=np.int64).reshape(len(toks), layout.n_discrete)
    return header, SequenceBatch(layout, tokens, [np.array(v, dtype=np.float64) for v in vecs])


# ---------------------------------------------------------------------------
# verification suite


def run_verify(cfg: dict) -> Report:
    """Oracle checks on the toy targets under the config's schedule settings."""
    rep = Report()
    sch = cfg["schedule"]
    seed = cfg["seed"]
    keyed = KeyedRNG(seed)
    disc_t = toy_discrete_target(cfg["task_params"] if cfg["task"] == "toy-discrete" else None)
    dtab = make_table(disc_t.layout, sch["rounds"], sch["phi_probs"])
    chain = enumerate_chain(disc_t, dtab)
    rep.extend(verify_lemma1(chain))

    # exact reversal
    for ctx in ("loo", "full"):
        err = np.abs(chain.composite_reverse(ctx) @ chain.flat(dtab.T) - chain.flat(0)).max()
        rep.add(f"reversal.matrix.{ctx}", err, 1e-10, "<")
    n_mc = 200_000
    init = chain.sample_at(dtab.T, n_mc, keyed.generator("verify", "init"))
    out = generate(EnumerationDenoiser(chain), dtab, SamplerConfig(), initial=init, rng=keyed.child("verify", "gen"))
    emp = np.bincount(np.ravel_multi_index(tuple(out.tokens.T), chain.shape), minlength=chain.n_states) / n_mc
    rep.add("reversal.mc_tv", tv(emp, chain.flat(0)), 0.015, "<")

    # binary reduction identity
    worst, skipped = 0.0, 0
    for t in range(dtab.T):
        if dtab.phi(t) in (0.0, 1.0):
            skipped += 1
            continue
        Y = chain.binary_probs(t)
        Q = np.moveaxis(chain.loo_conditional(t), dtab.position(t), -1)
        worst = max(worst, np.abs(binary_to_conditional(Y, dtab.discrete, dtab.round_of(t)) - Q).max())
    rep.add("binary_reduction.max_abs", worst, 1e-12, "<")
    rep.notes["binary_reduction.skipped_steps"] = skipped

    # direct vs step-by-step forward sampling
    s0 = disc_t.sample(n_mc, keyed.generator("verify", "s0"))
    worst_tv = 0.0
    for t in range(dtab.T + 1):
        direct, _ = sample_state_at(s0, dtab, t, rng=keyed.generator("verify", "direct", t))
        walked = forward_walk(s0, dtab, 0, t, keyed.child("verify", "walk", t))
        h = lambda b: np.bincount(np.ravel_multi_index(tuple(b.tokens.T), chain.shape), minlength=chain.n_states) / n_mc
        worst_tv = max(worst_tv, tv(h(direct), h(walked)), tv(h(direct), chain.flat(t)))
    rep.add("forward.direct_vs_step_tv", worst_tv, 0.01, "<")

    # score identity on a 1D mixture
    gmm = GaussianMixture.isotropic_1d([0.5, 0.5], [-2.0, 2.0], [0.5, 0.5])
    xs = np.linspace(-4, 4, 33)
    for a in (0.9, 0.5, 0.1):
        cf = gmm_ideal_eps(gmm, a, xs[:, None])[:, 0]
        q = np.array([quad_ideal_eps(gmm, a, x) for x in xs])
        fd = np.array([fd_score(gmm, a, x) for x in xs])
        rep.add(f"score.quadrature.a{a}", np.abs(cf - q).max(), 1e-8, "<")
        rep.add(f"score.finite_difference.a{a}", np.abs(-cf / math.sqrt(1 - a) - fd).max(), 1e-4, "<")

    # contraction
    mixed = toy_mixed_target(cfg["task_params"] if cfg["task"] == "toy-mixed" else None)
    mtab = make_table(mixed.layout, sch["rounds"], sch["phi_probs"], sch["steps_per_round"], build_table(cfg, mixed.layout).continuous.beta)
    rep.extend(wasserstein_contraction_check(mixed, mtab, 10_000, keyed.child("verify", "contraction")))
    clay = ElementLayout(0, (1,), 2)
    ctab = make_table(clay, sch["rounds"], sch["phi_probs"], sch["steps_per_round"], mtab.continuous.beta)
    g = keyed.generator("verify", "gap")
    x0, y0 = g.standard_normal((100, 1)), g.standard_normal((100, 1))
    ratio, pred = continuous_gap_factor(ctab, 0, x0, y0, keyed.child("verify", "gap"))
    rep.add("contraction.continuous_factor_relerr", np.abs(ratio / pred - 1).max(), 1e-12, "<")
    return rep


# ---------------------------------------------------------------------------
# commands


def _echo(cfg):
    return json.dumps(cfg, sort_keys=True)


def cmd_verify(args, cfg) -> int:
    rep = run_verify(cfg)
    lines = [f"# config_hash: {config_hash(cfg)}", f"# config: {_echo(cfg)}"] + rep.lines()
    lines.append(f"# checks: {len(rep.checks)}  failed: {sum(not c.passed for c in rep.checks)}  warnings: {len(rep.warnings)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if rep.passed else EXIT_ASSERT


def _checkpoint_path(args, cfg):
    path = args.checkpoint or cfg["paths"].get("checkpoint")
    if not path:
        raise ConfigError("no checkpoint path (use --checkpoint or paths.checkpoint)")
    return path


def cmd_train(args, cfg) -> int:
    from .nn import train

    task = build_task(cfg)
    table = build_table(cfg, task.layout)
    path = _checkpoint_path(args, cfg)
    header = {
        "config_hash": training_hash(cfg),
        "schedule_fingerprint": table.fingerprint(),
        "model": model_config(cfg).to_dict(),
        "created": _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "config": cfg,
    }
    log_path = args.out or str(Path(path).with_suffix(".log.jsonl"))
    res = train(data_fn(cfg, task), table, model_config(cfg), trainer_config(cfg), seed=cfg["seed"],
                log_path=log_path, checkpoint_path=path, header=header)
    last = res.log[-1] if res.log else {}
    print(json.dumps({"checkpoint": path, "seconds": round(res.seconds, 1), "final": last}, sort_keys=True))
    return EXIT_OK


def _load(args, cfg, table):
    from .nn import NetworkDenoiser, load_model

    path = _checkpoint_path(args, cfg)
    model, header = load_model(path, table)
    if header.get("config_hash") != training_hash(cfg) and not args.force:
        raise ConfigError(f"checkpoint was trained with config {header.get('config_hash')}, "
                          f"current config is {training_hash(cfg)} (use --force to override)")
    if header.get("schedule_fingerprint") != table.fingerprint() and not args.force:
        raise ConfigError("checkpoint schedule fingerprint does not match the config")
    flavor = "binary" if trainer_config(cfg).discrete_loss == "bce" else "full"
    return NetworkDenoiser(model, flavor), header


def _sample_header(cfg, seed, ckpt_header):
    return {"config_hash": config_hash(cfg), "seed": seed, "timestamp": ckpt_header.get("created", "")}


def cmd_sample(args, cfg) -> int:
    task = build_task(cfg)
    table = build_table(cfg, task.layout)
    den, ckh = _load(args, cfg, table)
    seed = cfg["seed"]
    scfg = sampler_config(cfg)
    header = _sample_header(cfg, seed, ckh)
    n = args.n if args.n is not None else 1000
    if n == 0:
        write_samples(args.out, None, header)
        return EXIT_OK
    condition = None
    if cfg["task"] == "sat":
        from .tasks import sat_batch

        insts = task.test_instances()[:n]
        condition = sat_batch(insts, with_assignment=False)
    out = generate(den, table, scfg, n=n, condition=condition, rng=KeyedRNG(seed).child("sample"))
    write_samples(args.out, out, header)
    return EXIT_OK


def cmd_redenoise(args, cfg) -> int:
    task = build_task(cfg)
    table = build_table(cfg, task.layout)
    den, ckh = _load(args, cfg, table)
    if not args.samples:
        raise ConfigError("redenoise needs --samples")
    _, batch = read_samples(args.samples, table.layout)
    scfg = sampler_config(cfg)
    if scfg.redenoise_rounds < 1:
        raise ConfigError("sampler.redenoise_rounds must be >= 1")
    if batch is not None:
        if cfg["task"] == "sat":
            batch.cond_tokens[:, : 3 * task.m] = True
        batch = redenoise(batch, den, table, scfg, KeyedRNG(cfg["seed"]).child("redenoise"),
                          iterations=max(scfg.redenoise_iterations, 1))
    write_samples(args.out, batch, _sample_header(cfg, cfg["seed"], ckh))
    return EXIT_OK


def evaluate(cfg, task, batch, reference=None) -> dict:
    from . import tasks as T

    out = {"n": 0 if batch is None else len(batch)}
    if batch is None:
        return out
    if cfg["task"] == "sat":
        insts = task.test_instances()[: len(batch)]
        out["constraint_accuracy"] = T.sat_solved_fraction(insts, batch)
        return out
    if reference is None:
        if cfg["task"] == "tabular":
            reference = task.test
        else:
            reference = task.sample(len(batch), KeyedRNG(cfg["seed"]).generator("eval", "reference"))
    if batch.vectors:
        out["w1_proxy"] = T.metric_w1_proxy(T.batch_vectors(batch), T.batch_vectors(reference))
    if batch.tokens.shape[1]:
        out["tv_tokens"] = T.metric_tv_hist(batch.tokens, reference.tokens)
    if cfg["task"] == "ring":
        out["constraint_accuracy"] = task.constraint_accuracy(batch)
        out["ideal_constraint_accuracy"] = task.ideal_accuracy()
    return out


def cmd_eval(args, cfg) -> int:
    task = build_task(cfg)
    table = build_table(cfg, task.layout)
    if not args.samples:
        raise ConfigError("eval needs --samples")
    _, batch = read_samples(args.samples, table.layout)
    ref = read_samples(args.reference, table.layout)[1] if args.reference else None
    metrics = evaluate(cfg, task, batch, ref)
    lines = [f"# config_hash: {config_hash(cfg)}", f"# config: {_echo(cfg)}"]
    lines += [f"{k}  {v}" for k, v in metrics.items()]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "redenoise": cmd_redenoise}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="igd", description="Interleaved discrete-continuous diffusion sampler")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="cap on compute threads")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--out", help="output path")
    p.add_argument("--force", action="store_true", help="ignore config/checkpoint mismatch")
    p.add_argument("--samples", help="samples file (eval, redenoise)")
    p.add_argument("--reference", help="reference samples file (eval)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg["seed"] = args.seed
        if args.n is not None and args.n < 0:
            raise ConfigError("--n must be non-negative")
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            import torch

            torch.set_num_threads(args.threads)
    except (ConfigError, ValueError, json.JSONDecodeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except AssertionError as e:
        print(f"assertion failed: {e}", file=sys.stderr)
        return EXIT_ASSERT
    except (SamplerError, RuntimeError, FloatingPointError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
