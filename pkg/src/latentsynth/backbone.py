"""Transformer backbone producing contextual vectors, plus training utilities.

The backbone consumes already-embedded token sequences (input projections and
lookup tables live in the task models), supports causal and bidirectional
attention, and offers an incremental key/value cache for stepwise decoding.
`grad_check` verifies any scalar loss against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .validation import ConfigurationError, TrainingFault, as_generator


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 64
    d_ff: int = 256
    n_layers: int = 4
    n_heads: int = 4
    dropout: float = 0.1
    max_len: int = 2048

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def param_count(self) -> int:
        """Closed-form backbone parameter count.

        Per layer: two LayerNorms (4d), four attention projections with bias
        (4d^2 + 4d), and the two feed-forward maps (2*d*d_ff + d_ff + d).
        A final LayerNorm adds 2d.
        """
        d, f = self.d_model, self.d_ff
        per_layer = 4 * d + 4 * d * d + 4 * d + 2 * d * f + f + d
        return self.n_layers * per_layer + 2 * d


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    """Classic sin/cos position table, shape (length, dim), float64."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10_000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.from_numpy(table)


class KVCache:
    """Per-layer key/value tensors accumulated during incremental decoding."""

    def __init__(self, n_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * n_layers
        self.values: list[torch.Tensor | None] = [None] * n_layers

    @property
    def length(self) -> int:
        return 0 if self.keys[0] is None else int(self.keys[0].shape[2])

    def append(self, layer: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = torch.cat([self.keys[layer], k], dim=2)
            self.values[layer] = torch.cat([self.values[layer], v], dim=2)
        return self.keys[layer], self.values[layer]


class _Attention(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.q_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.k_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.v_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.o_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, *, causal: bool, key_padding_mask=None,
                cache: KVCache | None = None, layer: int = 0):
        b, n, _ = x.shape
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))
        past = 0
        if cache is not None:
            past = cache.length
            k, v = cache.append(layer, k, v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        total = past + n
        if causal:
            q_pos = torch.arange(past, total).unsqueeze(1)
            k_pos = torch.arange(total).unsqueeze(0)
            scores = scores.masked_fill(k_pos > q_pos, float("-inf"))
        if key_padding_mask is not None:
            keep = key_padding_mask[:, None, None, :]
            scores = scores.masked_fill(~keep, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.drop(attn)
        out = (attn @ v).transpose(1, 2).reshape(b, n, -1)
        return self.o_proj(out)


class _Block(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = _Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model), nn.Dropout(cfg.dropout))

    def forward(self, x, **kw):
        x = x + self.attn(self.ln1(x), **kw)
        return x + self.ff(self.ln2(x))


class Transformer(nn.Module):
    """Pre-norm transformer over embedded inputs; returns contextual vectors."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        pe = sinusoidal_positions(cfg.max_len, cfg.d_model)
        self.register_buffer("pos_table", pe, persistent=False)

    def new_cache(self) -> KVCache:
        return KVCache(self.cfg.n_layers)

    def forward(self, x: torch.Tensor, *, causal: bool,
                key_padding_mask: torch.Tensor | None = None,
                pos_offset=0, cache: KVCache | None = None) -> torch.Tensor:
        b, n, _ = x.shape
        start = cache.length if cache is not None else 0
        if cache is not None and key_padding_mask is not None:
            raise ConfigurationError("padding masks are not supported with a KV cache")
        positions = torch.arange(start, start + n)
        if torch.is_tensor(pos_offset):
            positions = positions.unsqueeze(0) + pos_offset.long().unsqueeze(1)
        else:
            positions = (positions + int(pos_offset)).unsqueeze(0)
        if int(positions.max()) >= self.cfg.max_len:
            raise ConfigurationError(
                f"sequence reaches position {int(positions.max())} >= max_len={self.cfg.max_len}")
        x = x + self.pos_table.to(x.dtype)[positions]
        for i, block in enumerate(self.blocks):
            x = block(x, causal=causal, key_padding_mask=key_padding_mask,
                      cache=cache, layer=i)
        return self.final_norm(x)


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class OptimizerConfig:
    lr_max: float = 3e-4
    lr_min: float = 3e-5
    warmup_steps: int = 100
    total_steps: int = 1000
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.95)


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup from lr_min to lr_max, then cosine decay back to lr_min."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def build_optimizer(parameters, cfg: OptimizerConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(parameters, lr=cfg.lr_min, betas=cfg.betas,
                             weight_decay=cfg.weight_decay)


def optimize_step(optimizer: torch.optim.Optimizer, named_params, cfg: OptimizerConfig,
                  step: int) -> float:
    """Clip, schedule, and apply one decoupled-weight-decay update; returns the pre-clip norm."""
    params = list(named_params.items()) if isinstance(named_params, dict) else list(named_params)
    for name, p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingFault(f"non-finite gradient in parameter {name!r} at step {step}")
    norm = torch.nn.utils.clip_grad_norm_([p for _, p in params], cfg.clip_norm)
    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return float(norm)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: float = 0.0
    worst_param: str = ""
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tolerance:.1e}) at {self.worst_param or '-'}")


def grad_check(loss_fn, params: dict, tolerance: float = 1e-4, eps: float = 1e-5,
               max_coords_per_param: int | None = None, rng=None) -> GradCheckReport:
    """Compare autograd gradients of `loss_fn()` against central finite differences.

    `params` maps names to leaf tensors the loss closure reads. Use float64
    tensors; `eps` is the half-step. Large tensors can be spot-checked by
    capping coordinates per parameter (sampled with `rng`).
    """
    rng = as_generator(rng)
    for p in params.values():
        p.requires_grad_(True)
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    report = GradCheckReport(tolerance=tolerance)
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.detach().view(-1)
        gflat = g.detach().view(-1)
        idx = np.arange(flat.numel())
        if max_coords_per_param is not None and flat.numel() > max_coords_per_param:
            idx = rng.choice(flat.numel(), size=max_coords_per_param, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                hi = float(loss_fn())
                flat[i] = orig - eps
                lo = float(loss_fn())
                flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            ad = float(gflat[i])
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-6)
            worst = max(worst, rel)
        report.per_param[name] = worst
        if worst >= report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    return report
