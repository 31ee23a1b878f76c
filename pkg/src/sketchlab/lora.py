"""Low-rank adaptation of the encoder's attention projections.

Adapters add (alpha/r) * B @ A to a projection weight. A is Gaussian-initialized
(std 0.02) and B starts at zero, so a freshly injected model computes exactly
what the base model computes. Targets are named "<tower>.<mode>.<idx>.<proj>_proj",
e.g. "text.self.0.q_proj" or "fusion.cross.0.v_proj".
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from sketchlab.encoder import EncoderModel
from sketchlab.errors import ConfigError, DimensionError, StateError, ValidationError
from sketchlab.layers import Linear
from sketchlab.params import Parameter

PROJECTIONS = ("q", "k", "v", "o")
TARGET_CHOICES = ("self_attention", "cross_attention", "both")


@dataclass(frozen=True)
class LoraConfig:
    targets: str = "both"  # "self_attention" | "cross_attention" | "both"
    rank: int = 4
    alpha: float = 8.0
    projections: tuple[str, ...] = PROJECTIONS

    def __post_init__(self):
        if self.targets not in TARGET_CHOICES:
            raise ConfigError(
                f"targets must be one of {TARGET_CHOICES}, got {self.targets!r}"
            )
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        projections = tuple(self.projections)
        object.__setattr__(self, "projections", projections)
        if not projections or any(p not in PROJECTIONS for p in projections):
            raise ConfigError(
                f"projections must be a non-empty subset of {PROJECTIONS}, "
                f"got {projections}"
            )
        if len(set(projections)) != len(projections):
            raise ConfigError(f"duplicate projections in {projections}")


class LoraAdapter:
    """One low-rank adapter pair (A, B) attached to a Linear projection."""

    def __init__(self, target_name: str, in_dim: int, out_dim: int, rank: int,
                 alpha: float, *, rng: np.random.Generator):
        if rank > min(in_dim, out_dim):
            raise ValidationError(
                f"rank {rank} exceeds min dim of {in_dim}x{out_dim} target {target_name!r}"
            )
        self.target_name = target_name
        self.rank = rank
        self.alpha = float(alpha)
        self.A = Parameter(rng.normal(0.0, 0.02, (rank, in_dim)), f"lora.{target_name}.A")
        self.B = Parameter(np.zeros((out_dim, rank)), f"lora.{target_name}.B")
        self.merged = False
        self._linear: Linear | None = None  # set by inject/unmerge

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """The materialized weight update (alpha/r) * B @ A."""
        return (np.float32(self.scaling) * (self.B.value @ self.A.value)).astype(np.float32)

    def param_count(self) -> int:
        return self.A.size + self.B.size

    def parameters(self) -> list[Parameter]:
        return [self.A, self.B]


@dataclass
class AdaptedModel:
    """An encoder with adapters attached; base weights are frozen."""

    model: EncoderModel
    config: LoraConfig
    adapters: list[LoraAdapter] = field(default_factory=list)

    def adapter_parameters(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for ad in self.adapters:
            ps.extend(ad.parameters())
        return ps

    def trainable_param_count(self) -> int:
        """Sum over adapters of rank * (in_dim + out_dim)."""
        return sum(ad.param_count() for ad in self.adapters)

    def __getattr__(self, name):
        # Delegate encoder API (encode_text, config lookups via .model, ...).
        return getattr(self.model, name)


def iter_attention_targets(model: EncoderModel) -> Iterator[tuple[str, str, Linear]]:
    """Yields (target_name, mode, linear) over every attention projection."""
    groups = (
        ("text.self", "self", model.text_tower),
        ("image.self", "self", model.image_tower),
        ("fusion.cross", "cross", model.fusion),
    )
    for prefix, mode, blocks in groups:
        for i, blk in enumerate(blocks):
            for proj, lin in blk.attn.projections().items():
                yield f"{prefix}.{i}.{proj}_proj", mode, lin


def _wants(mode: str, targets: str) -> bool:
    if targets == "both":
        return True
    return (targets == "self_attention") == (mode == "self")


def inject(model: EncoderModel, cfg: LoraConfig, *, seed: int = 0) -> AdaptedModel:
    """Attach fresh adapters and freeze every base parameter.

    Freshly injected adapters leave all model outputs unchanged (B is zero).
    Injecting onto a projection that already has an adapter raises StateError.
    """
    rng = np.random.default_rng(seed)
    adapters: list[LoraAdapter] = []
    for name, mode, lin in iter_attention_targets(model):
        if not _wants(mode, cfg.targets):
            continue
        proj_key = name.rsplit(".", 1)[1][0]  # "q_proj" -> "q"
        if proj_key not in cfg.projections:
            continue
        if lin.adapter is not None:
            raise StateError(f"target {name} already has an adapter attached")
        ad = LoraAdapter(name, lin.in_dim, lin.out_dim, cfg.rank, cfg.alpha, rng=rng)
        ad._linear = lin
        lin.adapter = ad
        adapters.append(ad)
    if not adapters:
        raise ConfigError(
            f"lora config {cfg} matched no attention projections on this model"
        )
    for p in model.base_parameters():
        p.frozen = True
    return AdaptedModel(model=model, config=cfg, adapters=adapters)


def merge(adapted: AdaptedModel) -> EncoderModel:
    """Fold every adapter delta into its base weight and detach the adapters.

    The returned model has no adapters and unfrozen base weights. The caller
    keeps adapted.adapters if it intends to unmerge later.
    """
    if not adapted.adapters:
        raise StateError("nothing to merge: adapted model has no adapters")
    for ad in adapted.adapters:
        if ad.merged:
            raise StateError(f"adapter {ad.target_name} is already merged")
        if ad._linear is None or ad._linear.adapter is not ad:
            raise StateError(f"adapter {ad.target_name} is not attached to its target")
    for ad in adapted.adapters:
        lin = ad._linear
        lin.weight.value += ad.delta()
        lin.adapter = None
        ad.merged = True
    for p in adapted.model.base_parameters():
        p.frozen = False
    return adapted.model


def unmerge(model: EncoderModel, adapters: list[LoraAdapter]) -> AdaptedModel:
    """Subtract previously merged deltas and re-attach the adapters.

    The LoraConfig of the returned AdaptedModel is inferred from the adapter
    records (rank/alpha from the tensors, targets/projections from the names).
    """
    if not adapters:
        raise StateError("nothing to unmerge: empty adapter list")
    for ad in adapters:
        if not ad.merged:
            raise StateError(f"adapter {ad.target_name} was not merged")
        lin = ad._linear
        if lin is None:
            raise StateError(f"adapter {ad.target_name} has no recorded target layer")
        if lin.adapter is not None:
            raise StateError(f"target {ad.target_name} already has an adapter attached")
        if (ad.B.shape[0], ad.A.shape[1]) != (lin.out_dim, lin.in_dim):
            raise DimensionError(
                f"adapter {ad.target_name} shape {(ad.B.shape[0], ad.A.shape[1])} "
                f"does not match layer {(lin.out_dim, lin.in_dim)}"
            )
    for ad in adapters:
        lin = ad._linear
        lin.weight.value -= ad.delta()
        lin.adapter = ad
        ad.merged = False
    for p in model.base_parameters():
        p.frozen = True
    return AdaptedModel(model=model, config=_infer_config(adapters), adapters=list(adapters))


def _infer_config(adapters: list[LoraAdapter]) -> LoraConfig:
    ranks = {ad.rank for ad in adapters}
    alphas = {ad.alpha for ad in adapters}
    if len(ranks) != 1 or len(alphas) != 1:
        raise ValidationError("adapters disagree on rank/alpha; cannot infer one config")
    modes = {ad.target_name.split(".")[1] for ad in adapters}
    if modes == {"self"}:
        targets = "self_attention"
    elif modes == {"cross"}:
        targets = "cross_attention"
    else:
        targets = "both"
    projections = tuple(
        p for p in PROJECTIONS
        if any(ad.target_name.endswith(f".{p}_proj") for ad in adapters)
    )
    return LoraConfig(targets=targets, rank=ranks.pop(), alpha=alphas.pop(),
                      projections=projections)


def strip_adapters(model: EncoderModel) -> None:
    """Detach any adapters in place and unfreeze the base (adapter state is lost)."""
    for _, _, lin in iter_attention_targets(model):
        lin.adapter = None
    for p in model.base_parameters():
        p.frozen = False


def config_for_targets(targets: str, base: LoraConfig | None = None) -> LoraConfig:
    """Convenience: the base config with a different target selection."""
    return replace(base or LoraConfig(), targets=targets)
