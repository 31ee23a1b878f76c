"""Dual-tower text/image encoder with a cross-attention fusion stage.

Architecture (desk scale, trained from scratch — no pretrained weights):

  text tower:   token embedding + positional embedding -> N_t self-attn blocks
  fusion:       N_f cross-attn blocks; text features are the queries, a learned
                constant context sequence (shaped like the image patch
                sequence) provides keys/values. This stage runs inside every
                text encode, so cross-attention adapters sit on a live gradient
                path while the text and image retrieval towers stay separate.
  image tower:  p x p patch embedding + positional embedding -> N_i blocks
  heads:        Linear d -> e per tower; EOS-position pooling for text,
                mean-over-patches pooling for images; outputs unit-normalized.
  logit_scale:  learnable scalar initialized to ln(1/0.07); the similarity
                multiplier exp(logit_scale) is clamped at 100.

Construction draws every weight from one seeded generator in a fixed order, so
a (config, seed) pair pins all base weights bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from sketchlab.errors import (
    ConfigError,
    DegenerateCombinationError,
    DimensionError,
    StateError,
    ValidationError,
)
from sketchlab.images import GrayImage
from sketchlab.layers import LayerNorm, Linear, TokenEmbedding, TransformerBlock
from sketchlab.params import Parameter
from sketchlab.tokenizer import EOS_ID, PAD_ID, Tokenizer

LOGIT_SCALE_INIT = math.log(1.0 / 0.07)
LOGIT_SCALE_MAX = 100.0


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 64
    embed_dim: int = 32
    num_heads: int = 4
    text_blocks: int = 2
    image_blocks: int = 2
    fusion_blocks: int = 1
    image_size: int = 64
    patch_size: int = 8
    max_text_len: int = 77
    vocab_cap: int = 2048
    cond_dim: int = 16

    def __post_init__(self):
        if min(self.model_dim, self.embed_dim, self.num_heads, self.text_blocks,
               self.image_blocks, self.image_size, self.patch_size,
               self.cond_dim) < 1 or self.fusion_blocks < 0:
            raise ConfigError(f"encoder config has non-positive fields: {self}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.max_text_len < 2:
            raise ConfigError("max_text_len must be >= 2 (bos + eos)")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class Embedding:
    """Unit-norm embedding vector tagged with where it came from."""

    values: np.ndarray
    modality: str  # "text" | "image" | "combined"

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float32))
        if self.values.ndim != 1:
            raise DimensionError(f"embedding must be 1-D, got shape {self.values.shape}")
        if self.modality not in ("text", "image", "combined"):
            raise ValidationError(f"unknown embedding modality {self.modality!r}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def _check_unit(e: Embedding, what: str, tol: float = 1e-3) -> None:
    norm = float(np.linalg.norm(e.values))
    if abs(norm - 1.0) > tol:
        raise ValidationError(f"{what} must be unit-norm (got norm {norm:.6f})")


class EncoderModel:
    """Toy-scale dual-tower encoder; see module docstring for the layout."""

    def __init__(self, config: EncoderConfig | None = None,
                 tokenizer: Tokenizer | None = None, *, seed: int = 0):
        self.config = config or EncoderConfig()
        self.tokenizer = tokenizer or Tokenizer()
        self.seed = seed
        cfg = self.config
        if self.tokenizer.vocab_size > cfg.vocab_cap:
            raise ConfigError(
                f"tokenizer vocab ({self.tokenizer.vocab_size}) exceeds the "
                f"embedding table cap ({cfg.vocab_cap})"
            )
        rng = np.random.default_rng(seed)
        d, heads = cfg.model_dim, cfg.num_heads

        # Construction order is load-bearing: it fixes the rng stream.
        self.tok_emb = TokenEmbedding(cfg.vocab_cap, d, rng=rng, name="text.tok_emb")
        self.text_pos = Parameter(rng.normal(0.0, 0.02, (cfg.max_text_len, d)), "text.pos_emb")
        self.text_tower = [
            TransformerBlock(d, heads, mode="self", rng=rng, name=f"text.self.{i}")
            for i in range(cfg.text_blocks)
        ]
        self.text_ln = LayerNorm(d, name="text.ln_final")
        self.text_head = Linear(d, cfg.embed_dim, rng=rng, name="text.head")

        self.patch_proj = Linear(cfg.patch_size ** 2, d, rng=rng, name="image.patch_proj")
        self.image_pos = Parameter(rng.normal(0.0, 0.02, (cfg.num_patches, d)), "image.pos_emb")
        self.image_tower = [
            TransformerBlock(d, heads, mode="self", rng=rng, name=f"image.self.{i}")
            for i in range(cfg.image_blocks)
        ]
        self.image_ln = LayerNorm(d, name="image.ln_final")
        self.image_head = Linear(d, cfg.embed_dim, rng=rng, name="image.head")

        self.fusion_context = Parameter(
            rng.normal(0.0, 0.02, (cfg.num_patches, d)), "fusion.context")
        self.fusion = [
            TransformerBlock(d, heads, mode="cross", rng=rng, name=f"fusion.cross.{i}")
            for i in range(cfg.fusion_blocks)
        ]

        self.cond_head = Linear(cfg.embed_dim, cfg.cond_dim, rng=rng, name="cond.head")
        self.logit_scale = Parameter(np.float32(LOGIT_SCALE_INIT), "logit_scale")

        self._text_cache: dict | None = None
        self._image_cache: dict | None = None

    # ---------------------------------------------------------------- params

    def base_parameters(self) -> list[Parameter]:
        """All base weights in canonical (construction) order; no adapters."""
        ps: list[Parameter] = []
        ps += self.tok_emb.parameters()
        ps.append(self.text_pos)
        for blk in self.text_tower:
            ps += blk.parameters()
        ps += self.text_ln.parameters() + self.text_head.parameters()
        ps += self.patch_proj.parameters()
        ps.append(self.image_pos)
        for blk in self.image_tower:
            ps += blk.parameters()
        ps += self.image_ln.parameters() + self.image_head.parameters()
        ps.append(self.fusion_context)
        for blk in self.fusion:
            ps += blk.parameters()
        ps += self.cond_head.parameters()
        ps.append(self.logit_scale)
        return ps

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [(p.name, p) for p in self.base_parameters()]

    def attached_adapters(self) -> list:
        """LoRA adapters currently attached to this model's projections."""
        seen: list = []
        for blocks in (self.text_tower, self.image_tower, self.fusion):
            for blk in blocks:
                for lin in blk.attn.projections().values():
                    if lin.adapter is not None:
                        seen.append(lin.adapter)
        return seen

    def logit_scale_value(self) -> float:
        """exp(logit_scale), clamped at LOGIT_SCALE_MAX."""
        return float(min(math.exp(float(self.logit_scale.value)), LOGIT_SCALE_MAX))

    # ------------------------------------------------------------- text path

    def _validate_tokens(self, seq: Sequence[int]) -> list[int]:
        ids = [int(t) for t in seq]
        if len(ids) < 2:
            raise ValidationError(f"token sequence too short: {ids}")
        if len(ids) > self.config.max_text_len:
            raise ValidationError(
                f"token sequence of length {len(ids)} exceeds max {self.config.max_text_len}"
            )
        for t in ids:
            if t < 0 or t >= self.tokenizer.vocab_size:
                raise ValidationError(
                    f"unknown token id {t} (vocab size {self.tokenizer.vocab_size})"
                )
        if EOS_ID not in ids:
            raise ValidationError("token sequence has no EOS token")
        return ids

    def forward_text_batch(self, token_seqs: Sequence[Sequence[int]]) -> np.ndarray:
        """Batched text encode -> unit-norm rows [N, embed_dim]; caches for backward.

        Sequences are padded to the batch max and masked out of attention, so
        per-item results match unbatched encoding.
        """
        if len(token_seqs) == 0:
            raise ValidationError("empty text batch")
        seqs = [self._validate_tokens(s) for s in token_seqs]
        n = len(seqs)
        lens = [len(s) for s in seqs]
        lmax = max(lens)
        ids = np.full((n, lmax), PAD_ID, dtype=np.int64)
        mask = np.zeros((n, lmax), dtype=bool)
        eos_pos = np.zeros(n, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : lens[i]] = s
            mask[i, : lens[i]] = True
            eos_pos[i] = s.index(EOS_ID)
        x = self.tok_emb.forward(ids) + self.text_pos.value[:lmax]
        for blk in self.text_tower:
            x = blk.forward(x, key_mask=mask)
        ctx = np.broadcast_to(self.fusion_context.value, (n,) + self.fusion_context.shape)
        for blk in self.fusion:
            x = blk.forward(x, kv=ctx)
        x = self.text_ln.forward(x)
        pooled = x[np.arange(n), eos_pos]
        proj = self.text_head.forward(pooled)
        emb, norms = _normalize_rows(proj)
        self._text_cache = {
            "n": n, "lmax": lmax, "eos_pos": eos_pos, "emb": emb, "norms": norms,
        }
        return emb

    def backward_text_batch(self, d_emb: np.ndarray) -> None:
        if self._text_cache is None:
            raise StateError("backward_text_batch called before forward_text_batch")
        c = self._text_cache
        d_proj = _normalize_rows_backward(d_emb, c["emb"], c["norms"])
        d_pooled = self.text_head.backward(d_proj)
        d_x = np.zeros((c["n"], c["lmax"], self.config.model_dim), dtype=np.float32)
        d_x[np.arange(c["n"]), c["eos_pos"]] = d_pooled
        d_x = self.text_ln.backward(d_x)
        for blk in reversed(self.fusion):
            d_x, d_ctx = blk.backward(d_x)
            self.fusion_context.accumulate(d_ctx.sum(axis=0))
        for blk in reversed(self.text_tower):
            d_x = blk.backward(d_x)
        self.tok_emb.backward(d_x)
        if not self.text_pos.frozen:
            self.text_pos.grad[: c["lmax"]] += d_x.sum(axis=0)
        self._text_cache = None

    # ------------------------------------------------------------ image path

    def _image_array(self, images) -> np.ndarray:
        if isinstance(images, GrayImage):
            images = [images]
        if isinstance(images, (list, tuple)):
            arrs = []
            for im in images:
                arrs.append(im.pixels if isinstance(im, GrayImage) else np.asarray(im))
            arr = np.stack(arrs)
        else:
            arr = np.asarray(images)
            if arr.ndim == 2:
                arr = arr[None]
        size = self.config.image_size
        if arr.ndim != 3 or arr.shape[1] != size or arr.shape[2] != size:
            raise DimensionError(
                f"image batch shape {arr.shape} does not match expected "
                f"[N, {size}, {size}]"
            )
        return arr

    def _patches(self, arr: np.ndarray) -> np.ndarray:
        p = self.config.patch_size
        n, size, _ = arr.shape
        g = size // p
        x = arr.astype(np.float32) / np.float32(255.0) - np.float32(0.5)
        x = x.reshape(n, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(n, g * g, p * p)
        return x

    def forward_image_batch(self, images) -> np.ndarray:
        """Batched image encode -> unit-norm rows [N, embed_dim]; caches for backward."""
        arr = self._image_array(images)
        patches = self._patches(arr)
        x = self.patch_proj.forward(patches) + self.image_pos.value
        for blk in self.image_tower:
            x = blk.forward(x)
        x = self.image_ln.forward(x)
        pooled = x.mean(axis=1)
        proj = self.image_head.forward(pooled)
        emb, norms = _normalize_rows(proj)
        self._image_cache = {"n": arr.shape[0], "emb": emb, "norms": norms}
        return emb

    def backward_image_batch(self, d_emb: np.ndarray) -> None:
        if self._image_cache is None:
            raise StateError("backward_image_batch called before forward_image_batch")
        c = self._image_cache
        d_proj = _normalize_rows_backward(d_emb, c["emb"], c["norms"])
        d_pooled = self.image_head.backward(d_proj)
        num_patches = self.config.num_patches
        d_x = np.repeat(d_pooled[:, None, :], num_patches, axis=1) / np.float32(num_patches)
        d_x = self.image_ln.backward(d_x)
        for blk in reversed(self.image_tower):
            d_x = blk.backward(d_x)
        self.patch_proj.backward(d_x)
        if not self.image_pos.frozen:
            self.image_pos.grad += d_x.sum(axis=0)
        self._image_cache = None

    def image_features(self, image) -> list[np.ndarray]:
        """Intermediate patch feature maps [num_patches, d] from the image tower.

        Returns the patch-embedding output plus each block output; used by the
        perceptual distance metric.
        """
        arr = self._image_array(image)
        if arr.shape[0] != 1:
            raise ValidationError("image_features expects a single image")
        x = self.patch_proj.forward(self._patches(arr)) + self.image_pos.value
        feats = [x[0].copy()]
        for blk in self.image_tower:
            x = blk.forward(x)
            feats.append(x[0].copy())
        return feats

    # -------------------------------------------------------------- encoding

    def encode_text(self, tokens: Sequence[int]) -> Embedding:
        """Unit-norm text embedding; EOS-position pooled before projection."""
        emb = self.forward_text_batch([tokens])
        self._text_cache = None
        return Embedding(emb[0].copy(), "text")

    def encode_image(self, image) -> Embedding:
        """Unit-norm image embedding; mean-pooled patch features before projection."""
        emb = self.forward_image_batch(image)
        self._image_cache = None
        return Embedding(emb[0].copy(), "image")


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValidationError("cannot normalize a zero-length embedding")
    return (x / norms).astype(np.float32), norms.astype(np.float32)


def _normalize_rows_backward(d_emb: np.ndarray, emb: np.ndarray,
                             norms: np.ndarray) -> np.ndarray:
    d_emb = np.asarray(d_emb, dtype=np.float32)
    inner = np.sum(d_emb * emb, axis=-1, keepdims=True)
    return (d_emb - emb * inner) / norms


def combine(e_text: Embedding, e_image: Embedding, weight: float = 0.5) -> Embedding:
    """normalize(weight * e_text + (1 - weight) * e_image); default is the mean.

    Raises DegenerateCombinationError when the weighted sum is too small to
    normalize (e.g. exactly antiparallel inputs).
    """
    if not 0.0 <= weight <= 1.0:
        raise ValidationError(f"combine weight must be in [0, 1], got {weight}")
    if e_text.dim != e_image.dim:
        raise DimensionError(
            f"embedding dims differ: {e_text.values.shape} vs {e_image.values.shape}"
        )
    _check_unit(e_text, "combine input e_text")
    _check_unit(e_image, "combine input e_image")
    v = np.float32(weight) * e_text.values + np.float32(1.0 - weight) * e_image.values
    norm = float(np.linalg.norm(v))
    if norm < 1e-6:
        raise DegenerateCombinationError(
            f"combined embedding norm {norm:.2e} is too small to normalize"
        )
    return Embedding(v / np.float32(norm), "combined")


def project_conditioning(model: EncoderModel, e: Embedding) -> np.ndarray:
    """Map an embedding to the backend conditioning space: Linear e -> c."""
    _check_unit(e, "conditioning input")
    if e.dim != model.config.embed_dim:
        raise DimensionError(
            f"embedding dim {e.dim} does not match encoder embed_dim "
            f"{model.config.embed_dim}"
        )
    return model.cond_head.forward(e.values[None])[0]


def clip_score(a: Embedding, b: Embedding) -> float:
    """Cosine similarity of two unit-norm embeddings, clamped to [-1, 1]."""
    if a.dim != b.dim:
        raise DimensionError(f"embedding dims differ: {a.dim} vs {b.dim}")
    _check_unit(a, "clip_score input a")
    _check_unit(b, "clip_score input b")
    return float(np.clip(np.dot(a.values, b.values), -1.0, 1.0))
