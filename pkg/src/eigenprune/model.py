"""Toy pre-norm decoder-only transformer with named, tappable affine layers.

Every weight matrix sits in an :class:`Affine` layer computing ``z = A x`` per
token followed by ``y = z + b``. A forward pass can be given ``hooks`` keyed by
matrix name; each hook sees the layer input ``x`` and the pre-bias output ``z``
(both ``batch x seq x dim``) and returns the ``z`` to continue with. Taps,
finite-difference probes, activation patching and the token-indexed bias of a
pruned model are all built on that one mechanism.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ROLES = ("query", "key", "value", "output", "ff_in", "ff_out")
DTYPE = torch.float64

Hook = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class ConfigError(ValueError):
    pass


class SelectionError(ValueError):
    pass


class TokenError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 366
    seq_len: int = 4
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "seed" and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{k} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class Affine(nn.Module):
    def __init__(self, name: str, d_in: int, d_out: int):
        super().__init__()
        self.name = name
        self.weight = nn.Parameter(torch.zeros(d_out, d_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def forward(self, x: torch.Tensor, hooks: Mapping[str, Hook] | None) -> torch.Tensor:
        z = x @ self.weight.T
        if hooks and self.name in hooks:
            z = hooks[self.name](x, z)
        return z + self.bias


class Block(nn.Module):
    def __init__(self, index: int, cfg: ModelConfig):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.query = Affine(f"blocks.{index}.query", d, d)
        self.key = Affine(f"blocks.{index}.key", d, d)
        self.value = Affine(f"blocks.{index}.value", d, d)
        self.output = Affine(f"blocks.{index}.output", d, d)
        self.ff_in = Affine(f"blocks.{index}.ff_in", d, f)
        self.ff_out = Affine(f"blocks.{index}.ff_out", f, d)

    def forward(self, h: torch.Tensor, hooks) -> torch.Tensor:
        b, t, d = h.shape
        x = self.ln1(h)
        split = lambda z: z.view(b, t, self.n_heads, -1).transpose(1, 2)
        q = split(self.query(x, hooks))
        k = split(self.key(x, hooks))
        v = split(self.value(x, hooks))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        mask = torch.ones(t, t, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        h = h + self.output(att.transpose(1, 2).reshape(b, t, d), hooks)
        x = self.ln2(h)
        return h + self.ff_out(F.gelu(self.ff_in(x, hooks)), hooks)


class TransformerModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Parameter(torch.zeros(config.vocab_size, config.d_model, dtype=DTYPE))
        self.pos_embed = nn.Parameter(torch.zeros(config.seq_len, config.d_model, dtype=DTYPE))
        self.blocks = nn.ModuleList(Block(i, config) for i in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model, dtype=DTYPE)
        self.unembed = nn.Parameter(torch.zeros(config.d_model, config.vocab_size, dtype=DTYPE))

    def affines(self) -> dict[str, Affine]:
        return {m.name: m for m in self.modules() if isinstance(m, Affine)}

    def matrix(self, name: str) -> Affine:
        try:
            return self.affines()[name]
        except KeyError:
            raise SelectionError(f"no matrix named {name!r}") from None

    def forward(self, tokens, hooks: Mapping[str, Hook] | None = None) -> torch.Tensor:
        tokens = as_tokens(tokens, self.config)
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
        h = self.embed[tokens] + self.pos_embed[: tokens.shape[1]]
        for block in self.blocks:
            h = block(h, hooks)
        logits = self.ln_f(h) @ self.unembed
        return logits[0] if squeeze else logits


def as_tokens(tokens, config: ModelConfig) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if t.dim() not in (1, 2) or t.shape[-1] != config.seq_len:
        raise TokenError(f"expected sequences of length {config.seq_len}, got shape {tuple(t.shape)}")
    if t.numel() and (t.min() < 0 or t.max() >= config.vocab_size):
        raise TokenError(f"token id out of range [0, {config.vocab_size})")
    return t


def init_model(config: ModelConfig) -> TransformerModel:
    """Seeded init: N(0, 0.02) embeddings and projections, zero biases, unit norms."""
    model = TransformerModel(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("weight") and ".ln" not in name and not name.startswith("ln"):
                p.normal_(0.0, 0.02, generator=gen)
            elif name in ("embed", "pos_embed", "unembed"):
                p.normal_(0.0, 0.02, generator=gen)
    return model


def forward(model: TransformerModel, tokens, hooks=None) -> torch.Tensor:
    return model(tokens, hooks)


def loss(logits: torch.Tensor, target, answer_pos: int = -1) -> torch.Tensor:
    """Cross-entropy of the next-token distribution at ``answer_pos``.

    Works on one sequence (``seq x vocab``) or a batch; batched losses are summed
    so each example's gradient is its own.
    """
    target = torch.as_tensor(target, dtype=torch.long)
    if logits.dim() == 2:
        return F.cross_entropy(logits[answer_pos][None], target.reshape(1), reduction="sum")
    return F.cross_entropy(logits[:, answer_pos], target.reshape(-1), reduction="sum")


@dataclass(frozen=True)
class MatrixSelector:
    role: str = "key"
    blocks: frozenset[int] | None = None

    def __post_init__(self):
        if self.role not in ROLES + ("all",):
            raise SelectionError(f"unknown role {self.role!r}")

    @classmethod
    def parse(cls, text: str) -> "MatrixSelector":
        """``key`` or ``key:0,2`` (role, then optional block indices)."""
        role, _, rest = text.partition(":")
        blocks = frozenset(int(b) for b in rest.split(",")) if rest else None
        return cls(role=role, blocks=blocks)

    def __str__(self) -> str:
        if self.blocks is None:
            return self.role
        return f"{self.role}:{','.join(str(b) for b in sorted(self.blocks))}"

    def select(self, model: TransformerModel) -> list[str]:
        names = []
        for name in model.affines():
            _, idx, role = name.split(".")
            if self.role not in ("all", role):
                continue
            if self.blocks is not None and int(idx) not in self.blocks:
                continue
            names.append(name)
        if not names:
            raise SelectionError(f"selector {self} matches no matrix")
        return names


@dataclass
class TapRecord:
    """Activations entering a matrix and the loss gradient at its pre-bias output.

    ``x`` is ``seq x d_in`` and ``g`` is ``seq x d_out`` for one example, or with a
    leading example axis when captured over a dataset.
    """

    name: str
    x: np.ndarray
    g: np.ndarray


def backward_with_taps(
    model: TransformerModel, tokens, target, selector: MatrixSelector | Sequence[str]
) -> tuple[float, dict[str, TapRecord]]:
    """One forward/backward pass returning the loss and a tap per selected matrix.

    Batched ``tokens`` give batched taps; the loss is summed over the batch so
    each example's ``g`` is the gradient of that example's own loss.
    """
    names = selector.select(model) if isinstance(selector, MatrixSelector) else list(selector)
    if not names:
        raise SelectionError("empty selection")
    known = model.affines()
    for n in names:
        if n not in known:
            raise SelectionError(f"no matrix named {n!r}")
    seen: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}

    def tap(name):
        def hook(x, z):
            if not z.requires_grad:
                z = z.detach().requires_grad_(True)
            seen[name] = (x.detach(), z)
            return z
        return hook

    hooks = {n: tap(n) for n in names}
    with torch.enable_grad():
        logits = model(tokens, hooks)
        value = loss(logits, target)
        zs = [seen[n][1] for n in names]
        grads = torch.autograd.grad(value, zs, allow_unused=True)
    single = np.asarray(tokens).ndim == 1
    taps = {}
    for n, g in zip(names, grads):
        x, z = seen[n]
        g = torch.zeros_like(z) if g is None else g
        x, g = x.numpy().copy(), g.detach().numpy().copy()
        taps[n] = TapRecord(name=n, x=x[0] if single else x, g=g[0] if single else g)
    return float(value.detach()), taps


@dataclass
class PrunedModel:
    """A model whose modified matrices hold ``A'`` plus a token-indexed bias delta."""

    model: TransformerModel
    delta_bias: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def hooks(self) -> dict[str, Hook]:
        def add(delta):
            d = torch.as_tensor(delta, dtype=DTYPE)
            return lambda x, z: z + d[: z.shape[-2]]
        return {name: add(db) for name, db in self.delta_bias.items()}

    def __call__(self, tokens, hooks=None) -> torch.Tensor:
        return forward_pruned(self, tokens, hooks)


def forward_pruned(pruned: PrunedModel, tokens, hooks=None) -> torch.Tensor:
    """Forward pass where each modified layer computes ``A' x_t + b + db_t``."""
    all_hooks = pruned.hooks()
    for name, h in (hooks or {}).items():
        if name in all_hooks:
            first = all_hooks[name]
            all_hooks[name] = lambda x, z, f=first, g=h: g(x, f(x, z))
        else:
            all_hooks[name] = h
    return pruned.model(tokens, all_hooks or None)


def clone(model: TransformerModel) -> TransformerModel:
    return copy.deepcopy(model)
