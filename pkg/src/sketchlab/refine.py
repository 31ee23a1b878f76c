"""Iterative sketch refinement over a pluggable generator backend.

Three pipeline variants share one loop and differ only in conditioning:

  model1  no encoder conditioning (zero vector),
  model2  conditioning from a frozen encoder,
  model3  conditioning from a LoRA-fine-tuned encoder.

Each iteration re-encodes the current image into a latent, builds the prompt
as the base description plus all accepted feedback (re-truncated to the 77-id
budget, or to the encoder's max_text_len when that is smaller), and asks the
backend to generate. Per-iteration randomness is derived as
session_seed XOR iteration_index so sessions are reproducible end to end.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from sketchlab.encoder import (
    Embedding,
    EncoderModel,
    clip_score,
    combine,
    project_conditioning,
)
from sketchlab.errors import (
    BackendError,
    ConfigError,
    DimensionError,
    ValidationError,
)
from sketchlab.images import GrayImage
from sketchlab.tokenizer import EOS_ID

MODEL_KINDS = ("model1", "model2", "model3")
PROMPT_SEPARATOR = "; "


class GeneratorBackend(Protocol):
    """Minimal contract a generator backend must satisfy."""

    latent_dim: int
    conditioning_dim: int
    image_size: int

    def encode(self, image: GrayImage) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> GrayImage: ...

    def generate(self, latent: np.ndarray, conditioning: np.ndarray,
                 strength: float, guidance_scale: float, seed: int) -> GrayImage: ...


class ToyLatentBackend:
    """Deterministic linear stand-in for a latent diffusion generator.

    E maps centered pixels to latents. It is built as R @ E0 where E0 is the
    exact orthonormal block-average basis (block x block pixel blocks) and R is
    a seeded random rotation, so rows are orthonormal AND seeded-random while
    decode(encode(x)) stays the plain block-mean projector (R cancels). That
    projector is idempotent even through uint8 rounding, which keeps
    strength-0 refinement sequences exactly constant after iteration 1.

    generate computes z' = (1 - strength) * z + strength * tanh(guidance * C @ cond)
    and decodes z'. The formula is deterministic; the seed argument is accepted
    for interface parity with stochastic backends but is unused here.
    """

    def __init__(self, image_size: int = 64, conditioning_dim: int = 16,
                 *, block: int = 2, seed: int = 0):
        if image_size % block != 0:
            raise ConfigError(f"image_size {image_size} not divisible by block {block}")
        self.image_size = image_size
        self.conditioning_dim = conditioning_dim
        self.block = block
        self.seed = seed
        pixels = image_size * image_size
        grid = image_size // block
        self.latent_dim = grid * grid

        rng = np.random.default_rng(seed)
        # E0: one row per block, uniform weight 1/block over the block's pixels.
        e0 = np.zeros((self.latent_dim, pixels), dtype=np.float64)
        inv = 1.0 / block  # each row has block^2 entries of 1/block -> unit norm
        for by in range(grid):
            for bx in range(grid):
                row = by * grid + bx
                for dy in range(block):
                    start = (by * block + dy) * image_size + bx * block
                    e0[row, start:start + block] = inv
        q, r = np.linalg.qr(rng.normal(0.0, 1.0, (self.latent_dim, self.latent_dim)))
        q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity deterministically
        self.E = (q @ e0).astype(np.float32)
        self.C = rng.normal(0.0, conditioning_dim ** -0.5,
                            (self.latent_dim, conditioning_dim)).astype(np.float32)

    def _centered(self, image: GrayImage) -> np.ndarray:
        if (image.width, image.height) != (self.image_size, self.image_size):
            raise DimensionError(
                f"backend expects {self.image_size}x{self.image_size} images, "
                f"got {image.width}x{image.height}"
            )
        return image.pixels.astype(np.float32).reshape(-1) / np.float32(255.0) - np.float32(0.5)

    def encode(self, image: GrayImage) -> np.ndarray:
        return self.E @ self._centered(image)

    def decode(self, latent: np.ndarray) -> GrayImage:
        latent = np.asarray(latent, dtype=np.float32)
        if latent.shape != (self.latent_dim,):
            raise DimensionError(
                f"latent shape {latent.shape} does not match ({self.latent_dim},)"
            )
        flat = self.E.T @ latent + np.float32(0.5)
        pixels = np.clip(np.rint(flat * 255.0), 0, 255).astype(np.uint8)
        return GrayImage(self.image_size, self.image_size,
                         pixels.reshape(self.image_size, self.image_size))

    def generate(self, latent: np.ndarray, conditioning: np.ndarray,
                 strength: float, guidance_scale: float, seed: int) -> GrayImage:
        if not 0.0 <= strength <= 1.0:
            raise ValidationError(f"strength must be in [0, 1], got {strength}")
        if guidance_scale < 0.0:
            raise ValidationError(f"guidance_scale must be >= 0, got {guidance_scale}")
        conditioning = np.asarray(conditioning, dtype=np.float32)
        if conditioning.shape != (self.conditioning_dim,):
            raise DimensionError(
                f"conditioning shape {conditioning.shape} does not match "
                f"({self.conditioning_dim},)"
            )
        if not np.all(np.isfinite(conditioning)):
            raise ValidationError("conditioning vector contains non-finite values")
        latent = np.asarray(latent, dtype=np.float32)
        if strength == 0.0:
            return self.decode(latent)  # exact: no pull toward the conditioning
        pull = np.tanh(np.float32(guidance_scale) * (self.C @ conditioning))
        z = (np.float32(1.0 - strength) * latent + np.float32(strength) * pull)
        return self.decode(z)


@dataclass(frozen=True)
class RefinementConfig:
    model_kind: str = "model1"
    strength: float = 0.3
    guidance_scale: float = 7.5
    iterations: int = 5
    seed: int = 0
    combine_weight: float = 0.5

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValidationError(
                f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}"
            )
        if not 0.0 <= self.strength <= 1.0:
            raise ValidationError(f"strength must be in [0, 1], got {self.strength}")
        if self.guidance_scale < 0.0:
            raise ValidationError(
                f"guidance_scale must be >= 0, got {self.guidance_scale}"
            )
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.combine_weight <= 1.0:
            raise ValidationError(
                f"combine_weight must be in [0, 1], got {self.combine_weight}"
            )


@dataclass
class IterationRecord:
    index: int  # 1-based
    prompt_used: str
    prompt_tokens: list[int]
    conditioning: np.ndarray
    image: GrayImage
    metrics_prev: dict[str, float]
    metrics_ref: dict[str, float] | None = None


@dataclass
class RefinementSession:
    id: str
    description: str
    config: RefinementConfig
    input_image: GrayImage
    reference: GrayImage | None = None
    feedback: list[str] = field(default_factory=list)
    records: list[IterationRecord] = field(default_factory=list)

    def current_image(self) -> GrayImage:
        return self.records[-1].image if self.records else self.input_image

    def images(self) -> list[GrayImage]:
        """Iteration 0 (the input) followed by every generated image."""
        return [self.input_image] + [r.image for r in self.records]

    def metric_series(self, key: str, *, reference: bool = False) -> list[float]:
        series = []
        for r in self.records:
            source = r.metrics_ref if reference else r.metrics_prev
            if source is None:
                raise ValidationError("session has no ground-truth metrics")
            series.append(source[key])
        return series


def new_session(description: str, input_image: GrayImage,
                cfg: RefinementConfig | None = None,
                reference: GrayImage | None = None,
                session_id: str | None = None) -> RefinementSession:
    if not description or not description.strip():
        raise ValidationError("session description must be non-empty")
    cfg = cfg or RefinementConfig()
    return RefinementSession(
        id=session_id or uuid.uuid4().hex,
        description=description.strip(),
        config=cfg,
        input_image=input_image,
        reference=reference,
    )


def _build_prompt(session: RefinementSession, tokenizer,
                  pending_feedback: str | None, *,
                  max_len: int) -> tuple[str, list[int]]:
    parts = [session.description] + session.feedback
    if pending_feedback:
        parts.append(pending_feedback)
    ids = tokenizer.encode(PROMPT_SEPARATOR.join(parts))
    if len(ids) > max_len:
        # Encoders narrower than the tokenizer budget clamp the prompt too;
        # otherwise long-running sessions would wedge once feedback piles up.
        ids = ids[: max_len - 1] + [EOS_ID]
    return tokenizer.decode(ids), ids


def _iteration_metrics(model: EncoderModel, prompt_ids: Sequence[int],
                       image: GrayImage, against: GrayImage) -> dict[str, float]:
    from sketchlab import metrics as metrics_mod

    e_text = model.encode_text(prompt_ids)
    e_image = model.encode_image(image)
    return {
        "ssim": metrics_mod.ssim(image, against),
        "psnr": metrics_mod.psnr(image, against),
        "clip_score": clip_score(e_text, e_image),
        "perceptual_distance": metrics_mod.perceptual_distance(image, against, model),
    }


def refine_step(session: RefinementSession, model: EncoderModel | None,
                backend: GeneratorBackend,
                feedback_text: str | None = None) -> IterationRecord:
    """Run one refinement iteration and append its record to the session.

    `model` provides conditioning for model2/model3 and is always used for the
    clip/perceptual metrics, so it is required for every model kind (model1
    ignores it for conditioning). Feedback is committed to the session only
    when the iteration succeeds.
    """
    cfg = session.config
    if model is None:
        raise ValidationError(
            "refine_step needs an encoder (metrics and prompting); pass a "
            "default-constructed EncoderModel for model1"
        )
    pending = feedback_text.strip() if feedback_text and feedback_text.strip() else None
    prompt_used, prompt_ids = _build_prompt(
        session, model.tokenizer, pending, max_len=model.config.max_text_len)
    current = session.current_image()
    index = len(session.records) + 1

    if cfg.model_kind == "model1":
        conditioning = np.zeros(backend.conditioning_dim, dtype=np.float32)
    else:
        if backend.conditioning_dim != model.config.cond_dim:
            raise ConfigError(
                f"backend conditioning_dim {backend.conditioning_dim} does not "
                f"match encoder cond_dim {model.config.cond_dim}"
            )
        e_text = model.encode_text(prompt_ids)
        e_image = model.encode_image(current)
        combined = combine(e_text, e_image, cfg.combine_weight)
        conditioning = project_conditioning(model, combined)

    step_seed = cfg.seed ^ index
    try:
        latent = backend.encode(current)
        image = backend.generate(latent, conditioning, cfg.strength,
                                 cfg.guidance_scale, step_seed)
    except Exception as exc:
        raise BackendError(f"backend failed at iteration {index}: {exc}") from exc

    record = IterationRecord(
        index=index,
        prompt_used=prompt_used,
        prompt_tokens=list(prompt_ids),
        conditioning=conditioning,
        image=image,
        metrics_prev=_iteration_metrics(model, prompt_ids, image, current),
        metrics_ref=(
            _iteration_metrics(model, prompt_ids, image, session.reference)
            if session.reference is not None else None
        ),
    )
    if pending:
        session.feedback.append(pending)
    session.records.append(record)
    return record


def run_session(description: str, input_image: GrayImage,
                cfg: RefinementConfig, backend: GeneratorBackend,
                model: EncoderModel, *,
                feedback_schedule: Sequence[str | None] = (),
                reference: GrayImage | None = None) -> RefinementSession:
    """Create a session and run cfg.iterations refinement steps.

    The input (and reference, when given) is resized to the encoder's input
    size first, mirroring dataset ingestion.
    """
    size = model.config.image_size
    input_image = input_image.resize(size, size)
    if reference is not None:
        reference = reference.resize(size, size)
    session = new_session(description, input_image, cfg, reference)
    for i in range(cfg.iterations):
        fb = feedback_schedule[i] if i < len(feedback_schedule) else None
        refine_step(session, model, backend, fb)
    return session
