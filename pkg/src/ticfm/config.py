"""Model hyperparameters and the named parameter container."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults follow the full-size architecture (input length 512, feature
    width 512, 12 in-context blocks with 4 heads, 32 latents, at most 10
    classes per forward pass). :meth:`small` returns the desk-scale variant.
    """

    series_length: int = 512
    n_patches: int = 32
    embed_dim: int = 512  # q, encoder output width
    stat_dim: int = 32  # d_s
    loc_dim: int = 240  # d_l, per-view conv feature width
    conv_layers: int = 2
    conv_kernel: int = 17
    vit_layers: int = 6
    vit_heads: int = 8
    vit_mlp_ratio: int = 4
    encoder_dropout: float = 0.1
    instance_norm: bool = True

    adapter_hidden: int = 1024
    adapter_dropout: float = 0.118

    model_dim: int = 512  # d, token width of the in-context classifier
    n_latents: int = 32
    write_layers: int = 2
    read_layers: int = 2
    icl_blocks: int = 12
    icl_heads: int = 4
    icl_ffn_ratio: int = 2
    decoder_hidden: int = 1024
    c_max: int = 10

    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.series_length % self.n_patches:
            raise ConfigurationError(
                f"n_patches={self.n_patches} does not divide series_length={self.series_length}"
            )
        if self.conv_kernel % 2 == 0:
            raise ConfigurationError("conv_kernel must be odd for same padding")
        if self.embed_dim % self.vit_heads or self.model_dim % self.icl_heads:
            raise ConfigurationError("head count must divide the model width")
        if self.c_max < 2:
            raise ConfigurationError("c_max must be at least 2")

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        base = dict(
            series_length=128,
            n_patches=16,
            embed_dim=64,
            stat_dim=8,
            loc_dim=28,
            vit_layers=2,
            vit_heads=4,
            adapter_hidden=128,
            model_dim=64,
            n_latents=16,
            icl_blocks=4,
            icl_heads=4,
            decoder_hidden=128,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def patch_width(self) -> int:
        return self.series_length // self.n_patches

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                continue
            typ = known[key].type
            if typ == "bool":
                kwargs[key] = raw if isinstance(raw, bool) else str(raw).lower() == "true"
            elif typ == "int":
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    def digest(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class ModelParams:
    """Named float64 weights for encoder, adapter and in-context classifier.

    Names are dotted and prefixed by component (``encoder.``, ``adapter.``,
    ``icl.``).
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def with_group(self, prefix: str, values: dict[str, np.ndarray]) -> "ModelParams":
        p = prefix + "."
        tensors = {k: v for k, v in self.tensors.items() if not k.startswith(p)}
        tensors.update({p + k: v for k, v in values.items()})
        return ModelParams(self.config, tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    from . import adapter, encoder, icl

    shapes = {}
    for prefix, mod in (("encoder", encoder), ("adapter", adapter), ("icl", icl)):
        shapes.update({f"{prefix}.{k}": v for k, v in mod.param_shapes(config).items()})
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Random initialization for every parameter of the model."""
    from . import adapter, encoder, icl

    rng = np.random.default_rng(seed)
    tensors = {}
    for prefix, mod in (("encoder", encoder), ("adapter", adapter), ("icl", icl)):
        tensors.update({f"{prefix}.{k}": v for k, v in mod.init_params(config, rng).items()})
    return ModelParams(config, tensors)


def init_array(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Initialization rule chosen from the parameter name suffix."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("bias", "beta") or leaf.startswith("b"):
        return np.zeros(shape)
    if leaf in ("g", "gain", "gamma"):
        return np.ones(shape)
    if leaf in ("pos", "cls", "latents"):
        return rng.normal(0.0, 0.02, size=shape)
    fan_in = int(np.prod(shape[:-1]))
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
