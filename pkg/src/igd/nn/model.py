"""A small Dis-Co DiT: a transformer over the ``L`` slots of a sequence.

Each slot carries either a token embedding (discrete positions, including
the mask symbol) or a linear projection of its vector (continuous
positions), plus a learned position embedding, a conditioning-flag embedding
and a query-slot embedding marking the element being denoised.  Blocks are
adaLN-Zero transformer blocks; discrete and continuous slots get separate
modulation projections of the time embedding.  The output holds logits for
every discrete slot and a noise prediction for every continuous slot.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ..state import ElementLayout


class NonFiniteError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiscoDitConfig:
    n_blocks: int = 2
    n_heads: int = 4
    model_dim: int = 128
    mlp_dim: int = 512
    time_embed_in: int = 256
    time_embed_out: int = 128
    frequency: float = 10000.0
    # continuous-time frequency multiplier; None means "use the largest per-round K"
    t_c: float | None = None

    def __post_init__(self):
        for name in ("n_blocks", "n_heads", "model_dim", "mlp_dim", "time_embed_in", "time_embed_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.time_embed_in < 2:
            raise ValueError("time_embed_in must be >= 2")

    def to_dict(self):
        return asdict(self)


def time_features(t, k, d_in: int, f: float, t_c: float) -> np.ndarray:
    """Sinusoidal features of (sequence time, element time), shape ``(..., 4 * d_in)``.

    ``d[i] = k * f^(-i/(d_in-1))`` and ``c[i] = t * (t_c * f)^(-i/(d_in-1))``;
    the result is ``[sin d, cos d, sin c, cos c]``.
    """
    t = np.asarray(t, dtype=np.float64)[..., None]
    k = np.asarray(k, dtype=np.float64)[..., None]
    e = np.arange(d_in, dtype=np.float64) / (d_in - 1)
    d = k * f ** (-e)
    c = t * (t_c * f) ** (-e)
    return np.concatenate([np.sin(d), np.cos(d), np.sin(c), np.cos(c)], axis=-1)


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class Block(nn.Module):
    def __init__(self, cfg: DiscoDitConfig):
        super().__init__()
        D = cfg.model_dim
        self.n_heads = cfg.n_heads
        self.norm1 = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.norm2 = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(D, 3 * D)
        self.proj = nn.Linear(D, D)
        self.mlp = nn.Sequential(nn.Linear(D, cfg.mlp_dim), nn.GELU(approximate="tanh"), nn.Linear(cfg.mlp_dim, D))
        self.mod_discrete = nn.Linear(cfg.time_embed_out, 6 * D)
        self.mod_continuous = nn.Linear(cfg.time_embed_out, 6 * D)
        for m in (self.mod_discrete, self.mod_continuous):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def attention(self, x):
        N, L, D = x.shape
        H = self.n_heads
        q, k, v = self.qkv(x).reshape(N, L, 3, H, D // H).permute(2, 0, 3, 1, 4)
        out = nn.functional.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(N, L, D))

    def forward(self, x, c, is_disc):
        act = nn.functional.silu(c)
        if bool(is_disc.all()):
            mod = self.mod_discrete(act)[:, None]
        elif not bool(is_disc.any()):
            mod = self.mod_continuous(act)[:, None]
        else:
            mod = torch.where(is_disc[None, :, None], self.mod_discrete(act)[:, None], self.mod_continuous(act)[:, None])
        sh1, sc1, g1, sh2, sc2, g2 = mod.chunk(6, dim=-1)
        x = x + g1 * self.attention(_modulate(self.norm1(x), sh1, sc1))
        x = x + g2 * self.mlp(_modulate(self.norm2(x), sh2, sc2))
        return x


class DiscoDit(nn.Module):
    def __init__(self, layout: ElementLayout, cfg: DiscoDitConfig = DiscoDitConfig(), t_c: float = 1.0):
        super().__init__()
        self.layout, self.cfg = layout, cfg
        self.t_c = float(cfg.t_c if cfg.t_c is not None else t_c)
        D, L = cfg.model_dim, layout.length
        self.token_embed = nn.Embedding(layout.vocab_size + 1, D)  # last row is the mask symbol
        self.vector_in = nn.ModuleList([nn.Linear(d, D) for d in layout.dims])
        self.pos_embed = nn.Parameter(torch.randn(L, D) * 0.02)
        self.cond_embed = nn.Embedding(2, D)
        self.query_embed = nn.Parameter(torch.randn(D) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(4 * cfg.time_embed_in, cfg.time_embed_out), nn.SiLU(),
                                      nn.Linear(cfg.time_embed_out, cfg.time_embed_out))
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_blocks)])
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.final_mod = nn.Linear(cfg.time_embed_out, 2 * D)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        self.discrete_head = nn.Linear(D, layout.vocab_size)
        self.vector_out = nn.ModuleList([nn.Linear(D, d) for d in layout.dims])
        self.register_buffer("is_disc", torch.arange(L) < layout.n_discrete, persistent=False)

    @property
    def dtype(self):
        return self.pos_embed.dtype

    def embed_time(self, t, k):
        feats = time_features(t, k, self.cfg.time_embed_in, self.cfg.frequency, self.t_c)
        return self.time_mlp(torch.as_tensor(feats, dtype=self.dtype))

    def embed(self, tokens, vectors, cond, query):
        lay = self.layout
        tok = torch.as_tensor(np.where(tokens == lay.mask_token_id, lay.vocab_size, tokens), dtype=torch.long)
        slots = [self.token_embed(tok)] if lay.n_discrete else []
        for j, proj in enumerate(self.vector_in):
            slots.append(proj(torch.as_tensor(vectors[j], dtype=self.dtype))[:, None])
        h = torch.cat(slots, dim=1)
        cond = torch.as_tensor(cond, dtype=torch.long)
        q = torch.as_tensor(np.arange(lay.length)[None] == np.asarray(query)[:, None], dtype=self.dtype)
        return h + self.pos_embed[None] + self.cond_embed(cond) + q[..., None] * self.query_embed

    def forward(self, tokens, vectors, cond, query, t, k, check_finite: bool = True):
        """Returns ``(logits (N, L1, V), [eps_j (N, d_j)])``.

        ``tokens`` may contain the mask id; ``cond`` is an ``(N, L)`` flag
        array; ``query``, ``t`` and ``k`` are per-row arrays.
        """
        h = self.embed(tokens, vectors, cond, query)
        c = self.embed_time(t, k)
        for b, block in enumerate(self.blocks):
            h = block(h, c, self.is_disc)
            if check_finite and not torch.isfinite(h).all():
                raise NonFiniteError(f"non-finite activation after block {b}")
        shift, scale = self.final_mod(nn.functional.silu(c))[:, None].chunk(2, dim=-1)
        h = _modulate(self.final_norm(h), shift, scale)
        L1 = self.layout.n_discrete
        logits = self.discrete_head(h[:, :L1])
        eps = [head(h[:, L1 + j]) for j, head in enumerate(self.vector_out)]
        if check_finite and not (torch.isfinite(logits).all() and all(torch.isfinite(e).all() for e in eps)):
            raise NonFiniteError("non-finite network output")
        return logits, eps


def cond_flags(batch) -> np.ndarray:
    """``(N, L)`` flags: element fully held fixed by conditioning."""
    parts = [batch.cond_tokens] + [m.all(axis=1, keepdims=True) for m in batch.cond_vectors]
    return np.concatenate(parts, axis=1)


def default_t_c(table) -> float:
    return float(table.max_inner_steps())


def build_model(layout, cfg: DiscoDitConfig, table=None, seed: int = 0, dtype=torch.float32) -> DiscoDit:
    torch.manual_seed(seed)
    model = DiscoDit(layout, cfg, t_c=default_t_c(table) if table is not None else 1.0)
    return model.to(dtype)
