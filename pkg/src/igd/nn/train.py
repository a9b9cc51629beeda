"""Training loop, learning-rate schedule, EMA, and the sampler-facing network denoiser."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..forward import make_training_batch, sample_times
from ..rng import as_keyed
from .checkpoint import read_checkpoint, save_checkpoint
from .losses import batch_loss
from .model import DiscoDit, DiscoDitConfig, NonFiniteError, build_model, cond_flags


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 10000
    batch_size: int = 256
    lr: float = 1e-3
    warmup: int = 8000
    min_lr: float = 1e-6
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    discrete_loss: str = "bce"
    time_sampling: str = "uniform"
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.discrete_loss not in ("bce", "xary_ce"):
            raise ValueError(f"unknown discrete loss {self.discrete_loss!r}")
        if self.time_sampling not in ("uniform", "balanced"):
            raise ValueError(f"unknown time sampling {self.time_sampling!r}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("bad trainer settings")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, cfg: TrainerConfig) -> float:
    """Linear warmup to ``cfg.lr`` over ``cfg.warmup`` steps, then cosine decay to ``cfg.min_lr``."""
    if cfg.lr == 0.0:
        return 0.0
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min((step - cfg.warmup) / span, 1.0)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * frac))


@torch.no_grad()
def ema_update(ema: torch.nn.Module, model: torch.nn.Module, decay: float) -> None:
    for pe, p in zip(ema.parameters(), model.parameters()):
        pe.lerp_(p, 1 - decay)


def backward(loss: torch.Tensor, params) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``params`` (zeros for unused ones)."""
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class TrainResult:
    model: DiscoDit
    ema: DiscoDit
    log: list = field(default_factory=list)
    seconds: float = 0.0


def trainable_positions(s0) -> list[int]:
    lay = s0.layout
    return [i for i in range(lay.length) if not s0.position_conditioned(i).all()]


def train(data_fn, table, model_cfg: DiscoDitConfig, cfg: TrainerConfig, seed: int = 0, log_path=None,
          checkpoint_path=None, header: dict | None = None, model: DiscoDit | None = None, time_limit: float | None = None) -> TrainResult:
    """Fit a network to the reverse chain of ``table``.

    ``data_fn(n, generator)`` returns a :class:`SequenceBatch` of clean
    examples.  Every step draws its batch, times and forward noise from the
    stream keyed by ``("train", step)``.  ``time_limit`` (seconds) stops the
    loop early; the stop step is recorded in the log.
    """
    keyed = as_keyed(seed)
    if model is None:
        model = build_model(table.layout, model_cfg, table, seed=seed)
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=lr_at(0, cfg), betas=cfg.betas, eps=cfg.eps,
                            weight_decay=cfg.weight_decay)
    log = []
    logf = open(log_path, "w") if log_path else None
    start = time.time()
    running = []
    done = 0
    try:
        for step in range(cfg.steps):
            gen = keyed.generator("train", step)
            s0 = data_fn(cfg.batch_size, gen)
            t = sample_times(table, cfg.batch_size, gen, cfg.time_sampling, trainable_positions(s0))
            tb = make_training_batch(s0, table, t, gen)
            lr = lr_at(step, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            try:
                loss, parts = batch_loss(model, tb, cfg.discrete_loss)
            except NonFiniteError as e:
                raise TrainingDiverged(f"{e} at step {step}") from e
            value = float(loss.detach())
            if not math.isfinite(value) or value > 1e6:
                raise TrainingDiverged(f"loss {value} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            ema_update(ema, model, cfg.ema_decay)
            done = step + 1
            running.append(value)
            if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
                rec = {"step": step + 1, "loss": float(np.mean(running)), "lr": lr, **{f"loss_{k}": v for k, v in parts.items()}}
                running = []
                log.append(rec)
                if logf:
                    logf.write(json.dumps(rec, sort_keys=True) + "\n")
                    logf.flush()
            if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, ema, dict(header or {}, step=step + 1, seed=seed))
            if time_limit is not None and time.time() - start > time_limit:
                log.append({"step": step + 1, "event": "time_limit"})
                break
    finally:
        if logf:
            logf.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, ema, dict(header or {}, step=done, seed=seed))
    return TrainResult(model, ema, log, time.time() - start)


def load_model(path, table, use_ema: bool = True) -> tuple[DiscoDit, dict]:
    header, mstate, estate = read_checkpoint(path)
    cfg = DiscoDitConfig(**header["model"])
    model = build_model(table.layout, cfg, table)
    model.load_state_dict(estate if use_ema else mstate)
    return model, header


class NetworkDenoiser:
    """Adapter giving a trained network the sampler's denoiser interface.

    ``flavor`` follows the discrete loss the network was trained with:
    ``"binary"`` for the fresh-draw classifier, ``"full"`` for the
    cross-entropy head.
    """

    def __init__(self, model: DiscoDit, flavor: str = "binary", chunk: int = 8192):
        self.model = model.eval()
        self.flavor = flavor
        self.chunk = chunk

    @torch.no_grad()
    def _run(self, batch, tokens, i, t, k):
        n = len(batch)
        cond = cond_flags(batch)
        outs_l, outs_e = [], []
        for s in range(0, n, self.chunk):
            sl = slice(s, s + self.chunk)
            m = min(n, s + self.chunk) - s
            logits, eps = self.model(tokens[sl], [v[sl] for v in batch.vectors], cond[sl],
                                     np.full(m, i), np.full(m, t), np.full(m, k))
            outs_l.append(logits)
            outs_e.append(eps)
        return outs_l, outs_e

    def discrete_query(self, batch, i, t):
        tokens = batch.tokens.copy()
        if self.flavor == "binary":
            tokens[:, i] = batch.layout.mask_token_id
        logits, _ = self._run(batch, tokens, i, t, 0)
        lg = torch.cat([l[:, i] for l in logits]).double()
        out = torch.sigmoid(lg) if self.flavor == "binary" else torch.softmax(lg, dim=1)
        return out.numpy()

    def continuous_query(self, batch, i, t, k):
        j = i - batch.layout.n_discrete
        _, eps = self._run(batch, batch.tokens, i, t, k)
        return torch.cat([e[j] for e in eps]).double().numpy()
