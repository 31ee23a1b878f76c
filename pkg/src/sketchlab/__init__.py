"""Text-conditioned sketch refinement at desk scale.

A dual-tower text/image encoder trained with a symmetric contrastive loss,
LoRA adapters over its attention projections, an iterative image refinement
loop over a pluggable generator backend, image-quality metrics, and an HTTP
session service. All model math is explicit numpy with hand-written
gradients.
"""

from sketchlab.dataset import PromptTemplate, SketchPair, load_manifest, synth_fixture
from sketchlab.encoder import Embedding, EncoderConfig, EncoderModel
from sketchlab.errors import (
    BackendError,
    ConfigError,
    DegenerateCombinationError,
    DimensionError,
    IngestError,
    SketchLabError,
    StateError,
    TemplateError,
    TrainingError,
    ValidationError,
)
from sketchlab.images import GrayImage, load_image, read_pgm, write_pgm
from sketchlab.lora import AdaptedModel, LoraAdapter, LoraConfig, inject, merge, unmerge
from sketchlab.metrics import MetricReport, psnr, report_session, ssim
from sketchlab.refine import (
    RefinementConfig,
    RefinementSession,
    ToyLatentBackend,
    new_session,
    refine_step,
    run_session,
)
from sketchlab.tokenizer import Tokenizer
from sketchlab.trainer import TrainConfig, TrainLog, contrastive_loss, topk_accuracy, train

__version__ = "0.1.0"

__all__ = [
    "AdaptedModel",
    "BackendError",
    "ConfigError",
    "DegenerateCombinationError",
    "DimensionError",
    "Embedding",
    "EncoderConfig",
    "EncoderModel",
    "GrayImage",
    "IngestError",
    "LoraAdapter",
    "LoraConfig",
    "MetricReport",
    "PromptTemplate",
    "RefinementConfig",
    "RefinementSession",
    "SketchLabError",
    "SketchPair",
    "StateError",
    "TemplateError",
    "Tokenizer",
    "ToyLatentBackend",
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "ValidationError",
    "contrastive_loss",
    "inject",
    "load_image",
    "load_manifest",
    "merge",
    "new_session",
    "psnr",
    "read_pgm",
    "refine_step",
    "report_session",
    "run_session",
    "ssim",
    "synth_fixture",
    "topk_accuracy",
    "train",
    "unmerge",
    "write_pgm",
    "__version__",
]
