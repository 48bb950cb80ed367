"""Small post-layernorm transformer encoder used as the frozen backbone."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .rng import Rng
from .tokens import CLS, PAD

INIT_STD = 0.02
_NEG = -1e9


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    hidden: int = 64
    n_heads: int = 4
    ffn_size: int = 128
    vocab_size: int = 300
    max_len: int = 32
    la_reduction: int = 2
    ta_reduction: int = 16
    positional: bool = True
    tie_mlm_head: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        for f in ("n_layers", "hidden", "n_heads", "ffn_size", "vocab_size", "max_len",
                  "la_reduction", "ta_reduction"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if self.hidden % self.n_heads:
            raise ConfigError("hidden must be divisible by n_heads")
        if self.hidden % self.la_reduction or self.hidden % self.ta_reduction:
            raise ConfigError("hidden must be divisible by both adapter reduction factors")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def bottleneck(self, role: str) -> int:
        return self.hidden // (self.la_reduction if role == "LA" else self.ta_reduction)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f, V = cfg.hidden, cfg.ffn_size, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed.tok": (V, h)}
    if cfg.positional:
        shapes["embed.pos"] = (cfg.max_len, h)
    shapes["embed.ln.g"] = (h,)
    shapes["embed.ln.b"] = (h,)
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{w}"] = (h, h)
            shapes[p + f"attn.b{w}"] = (h,)
        shapes[p + "ln1.g"] = (h,)
        shapes[p + "ln1.b"] = (h,)
        shapes[p + "ffn.w1"] = (h, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, h)
        shapes[p + "ffn.b2"] = (h,)
        shapes[p + "ln2.g"] = (h,)
        shapes[p + "ln2.b"] = (h,)
    if not cfg.tie_mlm_head:
        shapes["mlm.w"] = (h, V)
    shapes["mlm.bias"] = (V,)
    return shapes


class Encoder:
    """Token + position embeddings, ``n_layers`` transformer blocks, tied MLM head.

    Each block is attention -> add&norm -> FFN -> add&norm. An adapter stack,
    when given, rewrites the pre-norm sum of the second add&norm.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng | None = None,
                 state: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = ParamStore()
        rng = rng or Rng(0)
        for name, shape in param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if state is not None:
                arr = state[name]
            elif leaf == "g":
                arr = np.ones(shape, np.float32)
            elif leaf.startswith("b"):
                arr = np.zeros(shape, np.float32)
            else:
                arr = rng.normal_array(shape, INIT_STD)
            self.params.add(name, arr)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def freeze(self) -> None:
        self.params.freeze()

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    # ------------------------------------------------------------------ forward

    def _check_ids(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ad.DimensionError("tokens must be a [batch, time] id array")
        if ids.shape[1] > self.cfg.max_len:
            raise ContractError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ad.VocabError(f"token id out of range [0, {self.cfg.vocab_size})")
        return ids

    def encode(self, tokens, stack=None) -> list[Tensor]:
        """Hidden states after the embeddings and after every layer (L+1 tensors)."""
        cfg, P = self.cfg, self.params
        ids = self._check_ids(tokens)
        B, T = ids.shape
        H, dh = cfg.n_heads, cfg.head_dim
        x = ad.embedding(P["embed.tok"], ids)
        if cfg.positional:
            x = x + ad.getitem(P["embed.pos"], slice(0, T))
        x = ad.layernorm(x, P["embed.ln.g"], P["embed.ln.b"], cfg.ln_eps)
        hidden = [x]
        key_mask = Tensor(np.where(ids == PAD, _NEG, 0.0).astype(np.float32)[:, None, None, :])
        scale = 1.0 / math.sqrt(dh)
        for l in range(cfg.n_layers):
            p = f"layer{l}."

            def heads(w):
                y = x @ P[p + f"attn.w{w}"] + P[p + f"attn.b{w}"]
                return y.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

            q, k, v = heads("q"), heads("k"), heads("v")
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale + key_mask
            ctx = (ad.softmax(scores) @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.hidden)
            attn = ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]
            a = ad.layernorm(x + attn, P[p + "ln1.g"], P[p + "ln1.b"], cfg.ln_eps)
            f = ad.relu(a @ P[p + "ffn.w1"] + P[p + "ffn.b1"]) @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
            s = a + f
            if stack is not None:
                s = stack.forward(l, f, s)
            x = ad.layernorm(s, P[p + "ln2.g"], P[p + "ln2.b"], cfg.ln_eps)
            hidden.append(x)
        return hidden

    def mlm_head_weight(self) -> Tensor:
        if self.cfg.tie_mlm_head:
            return ad.transpose(self.params["embed.tok"], (1, 0))
        return self.params["mlm.w"]

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        """Project final-layer states onto the vocabulary: [B, T, V]."""
        return hidden @ self.mlm_head_weight() + self.params["mlm.bias"]

    def cls_pool(self, hidden, tokens=None) -> Tensor:
        """Final-layer state at position 0, which must hold [CLS]."""
        if isinstance(hidden, (list, tuple)):
            hidden = hidden[-1]
        if tokens is not None:
            ids = np.asarray(tokens)
            if ids.ndim == 1:
                ids = ids[None, :]
            if not (ids[:, 0] == CLS).all():
                raise ContractError("every sequence must start with [CLS]")
        return ad.getitem(hidden, (slice(None), 0))
