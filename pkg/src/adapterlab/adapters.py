"""Serial bottleneck adapters and the per-layer LA -> TA stack."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .encoder import ConfigError, ModelConfig
from .rng import Rng

ROLES = ("LA", "TA")
DOWN_STD = 0.02


@dataclass(eq=False)
class Adapter:
    """Bias-free bottleneck (down h x d, up d x h) at each covered encoder layer.

    ``layers`` lists the encoder layer indices carrying weights; with the
    last-layer drop the final encoder layer is absent.
    """

    role: str
    tag: str
    hidden: int
    d: int
    n_layers: int
    layers: tuple[int, ...]
    params: ParamStore = field(repr=False)

    @classmethod
    def new(cls, role: str, tag: str, cfg: ModelConfig, rng: Rng,
            drop_last_layer: bool = True) -> "Adapter":
        if role not in ROLES:
            raise ConfigError(f"unknown adapter role {role!r}")
        h, d = cfg.hidden, cfg.bottleneck(role)
        layers = tuple(range(cfg.n_layers - 1 if drop_last_layer else cfg.n_layers))
        store = ParamStore()
        for l in layers:
            store.add(f"{l}.down", rng.normal_array((h, d), DOWN_STD))
            store.add(f"{l}.up", np.zeros((d, h), np.float32))
        return cls(role, tag, h, d, cfg.n_layers, layers, store)

    @classmethod
    def from_state(cls, role: str, tag: str, n_layers: int,
                   state: dict[str, np.ndarray]) -> "Adapter":
        layers = tuple(sorted({int(k.split(".")[0]) for k in state}))
        hidden, d = state[f"{layers[0]}.down"].shape
        return cls(role, tag, hidden, d, n_layers, layers, ParamStore(state))

    def metadata(self) -> dict:
        return {"role": self.role, "tag": self.tag, "hidden": self.hidden, "d": self.d,
                "n_layers": self.n_layers, "layers": list(self.layers)}

    def num_params(self) -> int:
        return self.params.num_params()

    def down(self, l: int) -> Tensor:
        return self.params[f"{l}.down"]

    def up(self, l: int) -> Tensor:
        return self.params[f"{l}.up"]

    def freeze(self) -> None:
        self.params.freeze()

    def unfreeze(self) -> None:
        self.params.unfreeze()

    def copy(self) -> "Adapter":
        store = ParamStore(self.params.state_dict())
        return dataclasses.replace(self, params=store)


def adapter_forward(a: Adapter, l: int, h_l: Tensor, r_l: Tensor) -> Tensor:
    """U_l(ReLU(D_l(h_l))) + r_l."""
    if l not in a.layers:
        raise ConfigError(f"adapter {a.tag!r} has no weights for layer {l}")
    if h_l.shape[-1] != a.hidden or r_l.shape[-1] != a.hidden:
        raise ad.DimensionError(f"adapter expects last axis {a.hidden}, got {h_l.shape} / {r_l.shape}")
    return ad.relu(h_l @ a.down(l)) @ a.up(l) + r_l


@dataclass(frozen=True)
class AdapterStack:
    """LA below TA at every layer; either may be absent."""

    la: Adapter | None = None
    ta: Adapter | None = None
    drop_last_layer: bool = True

    def __post_init__(self):
        depths = {a.n_layers for a in (self.la, self.ta) if a is not None}
        if len(depths) > 1:
            raise ConfigError(f"LA and TA were built for different encoder depths {sorted(depths)}")
        if self.la is not None and self.ta is not None and self.la.hidden != self.ta.hidden:
            raise ConfigError("LA and TA hidden sizes differ")

    @property
    def n_layers(self) -> int | None:
        for a in (self.la, self.ta):
            if a is not None:
                return a.n_layers
        return None

    def forward(self, l: int, h_l: Tensor, r_l: Tensor) -> Tensor:
        return stack_forward(self, l, h_l, r_l)


def stack_forward(stack: AdapterStack, l: int, h_l: Tensor, r_l: Tensor) -> Tensor:
    """LA(h_l, r_l), whose output is both hidden input and residual of the TA."""
    if stack.drop_last_layer and stack.n_layers is not None and l == stack.n_layers - 1:
        return r_l
    if stack.la is not None:
        z = adapter_forward(stack.la, l, h_l, r_l)
        h_l = r_l = z
    if stack.ta is not None:
        return adapter_forward(stack.ta, l, h_l, r_l)
    return r_l


def swap_la(stack: AdapterStack, new_la: Adapter) -> AdapterStack:
    """Same stack with a different language adapter; the TA is shared, not copied."""
    if new_la.role != "LA":
        raise ConfigError(f"swap_la needs an LA, got role {new_la.role!r}")
    if stack.la is not None:
        if new_la.d != stack.la.d:
            raise ConfigError(f"bottleneck mismatch: {new_la.d} != {stack.la.d}")
        if new_la.layers != stack.la.layers or new_la.n_layers != stack.la.n_layers:
            raise ConfigError("layer-count mismatch between language adapters")
    if stack.ta is not None and new_la.n_layers != stack.ta.n_layers:
        raise ConfigError("layer-count mismatch between LA and TA")
    return dataclasses.replace(stack, la=new_la)
