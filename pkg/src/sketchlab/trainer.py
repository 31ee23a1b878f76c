"""Contrastive LoRA fine-tuning: loss, optimizer, training loop, ablation.

The loss is the symmetric InfoNCE objective over a batch of aligned pairs:
S = scale * (T @ I.T), L = 0.5 * (CE over rows + CE over columns) with the
diagonal as targets. Only adapter parameters and logit_scale are updated; the
base encoder stays bitwise frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from sketchlab import dataset as dataset_mod
from sketchlab.dataset import SketchPair
from sketchlab.encoder import LOGIT_SCALE_MAX, EncoderModel
from sketchlab.errors import TrainingError, ValidationError
from sketchlab.lora import AdaptedModel, LoraConfig, inject
from sketchlab.params import Parameter


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    split_ratio: float = 0.8
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValidationError(
                f"batch_size must be >= 2 for a contrastive batch, got {self.batch_size}"
            )
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValidationError(f"split_ratio must be in (0, 1), got {self.split_ratio}")


class TopKAccuracy(NamedTuple):
    """Retrieval accuracy plus the k actually used (clamped when k > M)."""

    fraction: float
    k: int
    clamped: bool

    def __float__(self) -> float:
        return self.fraction


@dataclass
class EpochStats:
    epoch: int
    loss: float
    acc1: float
    acc5: float
    acc10: float
    acc25: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)

    def final(self) -> EpochStats:
        if not self.epochs:
            raise ValidationError("train log is empty")
        return self.epochs[-1]

    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_records(self) -> str:
        """One epoch per line: epoch loss acc@1 acc@5 acc@10 acc@25."""
        lines = ["# epoch loss acc1 acc5 acc10 acc25"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch} {e.loss!r} {e.acc1!r} {e.acc5!r} {e.acc10!r} {e.acc25!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_records(cls, text: str) -> "TrainLog":
        log = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValidationError(f"bad train log line: {line!r}")
            log.epochs.append(EpochStats(
                epoch=int(parts[0]), loss=float(parts[1]), acc1=float(parts[2]),
                acc5=float(parts[3]), acc10=float(parts[4]), acc25=float(parts[5]),
            ))
        return log

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_records(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TrainLog":
        return cls.from_records(Path(path).read_text(encoding="utf-8"))


class Adam:
    """Adam with bias correction; state is keyed by parameter identity."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / correct1
            v_hat = v / correct2
            p.value -= np.float32(self.lr) * m_hat / (np.sqrt(v_hat) + np.float32(self.eps))


def _check_embedding_matrix(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValidationError(f"{what} must be [N, e], got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValidationError(f"{what} rows must be unit-norm")
    return x.astype(np.float64)


def contrastive_loss(text_emb: np.ndarray, img_emb: np.ndarray,
                     logit_scale: float) -> float:
    """Symmetric InfoNCE loss over aligned unit-norm embedding rows."""
    loss, _, _, _ = contrastive_loss_and_grads(text_emb, img_emb, logit_scale)
    return loss


def contrastive_loss_and_grads(text_emb: np.ndarray, img_emb: np.ndarray,
                               logit_scale: float):
    """Returns (loss, d_text, d_img, d_scale); gradients are float32.

    Internals run in float64 so the loss matches a brute-force oracle to 1e-6.
    """
    t = _check_embedding_matrix(text_emb, "text embeddings")
    m = _check_embedding_matrix(img_emb, "image embeddings")
    if t.shape != m.shape:
        raise ValidationError(f"embedding shapes differ: {t.shape} vs {m.shape}")
    n = t.shape[0]
    if n < 2:
        raise ValidationError(f"contrastive batch needs >= 2 pairs, got {n}")
    if logit_scale < 0:
        raise ValidationError(f"logit_scale must be non-negative, got {logit_scale}")
    sims = t @ m.T
    s = float(logit_scale) * sims
    # row CE (text -> image) and column CE (image -> text), diagonal targets
    row_shift = s - s.max(axis=1, keepdims=True)
    row_log_z = np.log(np.exp(row_shift).sum(axis=1)) + s.max(axis=1)
    col_shift = s - s.max(axis=0, keepdims=True)
    col_log_z = np.log(np.exp(col_shift).sum(axis=0)) + s.max(axis=0)
    diag = np.diag(s)
    loss = 0.5 * ((row_log_z - diag).mean() + (col_log_z - diag).mean())

    p_rows = np.exp(s - row_log_z[:, None])
    p_cols = np.exp(s - col_log_z[None, :])
    eye = np.eye(n)
    d_s = ((p_rows - eye) + (p_cols - eye)) / (2.0 * n)
    d_t = (float(logit_scale) * (d_s @ m)).astype(np.float32)
    d_m = (float(logit_scale) * (d_s.T @ t)).astype(np.float32)
    d_scale = float((d_s * sims).sum())
    return float(loss), d_t, d_m, d_scale


def topk_accuracy(text_emb: np.ndarray, img_emb: np.ndarray, k: int) -> TopKAccuracy:
    """Fraction of texts whose paired image ranks in the top k by cosine.

    Ties rank lower indices first (a tie with a smaller index outranks the
    pair). k larger than the candidate count is clamped and flagged.
    """
    t = _check_embedding_matrix(text_emb, "text embeddings")
    m = _check_embedding_matrix(img_emb, "image embeddings")
    if t.shape != m.shape:
        raise ValidationError(f"embedding shapes differ: {t.shape} vs {m.shape}")
    n = t.shape[0]
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    clamped = k > n
    k_used = min(k, n)
    sims = t @ m.T
    hits = 0
    for i in range(n):
        row = sims[i]
        own = row[i]
        rank = int(np.sum(row > own) + np.sum(row[:i] == own))
        if rank < k_used:
            hits += 1
    return TopKAccuracy(fraction=hits / n, k=k_used, clamped=clamped)


def _encode_all(model: EncoderModel, token_seqs, images, batch_size: int = 64):
    """Encode a full split in chunks; returns (text_matrix, image_matrix)."""
    t_parts, i_parts = [], []
    for start in range(0, len(token_seqs), batch_size):
        t_parts.append(model.forward_text_batch(token_seqs[start:start + batch_size]))
        model._text_cache = None
        i_parts.append(model.forward_image_batch(images[start:start + batch_size]))
        model._image_cache = None
    return np.concatenate(t_parts, axis=0), np.concatenate(i_parts, axis=0)


def _val_stats(model: EncoderModel, tokens, images) -> tuple[float, float, float, float]:
    t, m = _encode_all(model, tokens, images)
    return (
        topk_accuracy(t, m, 1).fraction,
        topk_accuracy(t, m, 5).fraction,
        topk_accuracy(t, m, 10).fraction,
        topk_accuracy(t, m, 25).fraction,
    )


def train(model: EncoderModel, pairs: Sequence[SketchPair],
          cfg: TrainConfig | None = None) -> tuple[AdaptedModel, TrainLog]:
    """LoRA fine-tune `model` on (description, sketch) pairs.

    Injects adapters per cfg.lora, freezes the base, and optimizes adapters
    plus logit_scale with Adam. Validation accuracy is computed every epoch on
    the held-out split; the returned model carries the weights of the best
    validation acc@1 epoch (the most-trained epoch wins ties).
    """
    cfg = cfg or TrainConfig()
    if not pairs:
        raise ValidationError("cannot train on an empty dataset")
    train_pairs, val_pairs = dataset_mod.split(pairs, cfg.split_ratio, cfg.seed)

    tokens_train = [model.tokenizer.encode(p.description) for p in train_pairs]
    images_train = [p.image for p in train_pairs]
    tokens_val = [model.tokenizer.encode(p.description) for p in val_pairs]
    images_val = [p.image for p in val_pairs]

    adapted = inject(model, cfg.lora, seed=cfg.seed)
    model.logit_scale.frozen = False
    trainables = adapted.adapter_parameters() + [model.logit_scale]
    opt = Adam(trainables, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    best_acc1 = -1.0
    best_state: list[np.ndarray] | None = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        batch_losses: list[float] = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue  # a 1-pair remainder has no contrastive signal
            opt.zero_grad()
            t_emb = model.forward_text_batch([tokens_train[i] for i in idx])
            i_emb = model.forward_image_batch([images_train[i] for i in idx])
            scale = model.logit_scale_value()
            loss, d_t, d_i, d_scale = contrastive_loss_and_grads(t_emb, i_emb, scale)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch start {start}"
                )
            model.backward_text_batch(d_t)
            model.backward_image_batch(d_i)
            # scale = exp(p) while exp(p) < max, else constant
            if math.exp(float(model.logit_scale.value)) < LOGIT_SCALE_MAX:
                model.logit_scale.accumulate(np.float32(d_scale * scale))
            opt.step()
            np.minimum(model.logit_scale.value, np.float32(math.log(LOGIT_SCALE_MAX)),
                       out=model.logit_scale.value)
            batch_losses.append(loss)
        acc1, acc5, acc10, acc25 = _val_stats(model, tokens_val, images_val)
        log.epochs.append(EpochStats(
            epoch=epoch, loss=float(np.mean(batch_losses)), acc1=acc1, acc5=acc5,
            acc10=acc10, acc25=acc25,
        ))
        if acc1 >= best_acc1:  # ties fall to the later, more-trained epoch
            best_acc1 = acc1
            best_state = [p.value.copy() for p in trainables]

    if best_state is not None:
        for p, value in zip(trainables, best_state):
            p.value[...] = value
    return adapted, log


TARGETS_ORDER = ("self_attention", "cross_attention", "both")


@dataclass
class AblationRow:
    targets: str
    final_loss: float
    acc1: float
    acc5: float
    acc10: float
    acc25: float
    trainable_params: int


@dataclass
class AblationResult:
    rows: list[AblationRow]
    logs: dict[str, TrainLog]

    def row(self, targets: str) -> AblationRow:
        for r in self.rows:
            if r.targets == targets:
                return r
        raise KeyError(targets)

    def to_table(self) -> str:
        header = (
            f"{'targets':<16} {'params':>8} {'loss':>10} "
            f"{'acc@1':>7} {'acc@5':>7} {'acc@10':>7} {'acc@25':>7}"
        )
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.targets:<16} {r.trainable_params:>8d} {r.final_loss:>10.4f} "
                f"{r.acc1:>7.3f} {r.acc5:>7.3f} {r.acc10:>7.3f} {r.acc25:>7.3f}"
            )
        return "\n".join(lines)

    def to_records(self) -> str:
        lines = []
        for r in self.rows:
            lines.append(
                f"targets={r.targets} params={r.trainable_params} "
                f"loss={r.final_loss!r} acc1={r.acc1!r} acc5={r.acc5!r} "
                f"acc10={r.acc10!r} acc25={r.acc25!r}"
            )
        return "\n".join(lines) + "\n"


def run_ablation(pairs: Sequence[SketchPair], base_cfg: TrainConfig | None = None,
                 *, encoder_config=None, model_seed: int = 0,
                 tokenizer=None) -> AblationResult:
    """Train self-only, cross-only, and both adapters from identical bases.

    Every arm rebuilds the encoder from the same (config, seed), so the three
    runs differ only in which projections carry adapters.
    """
    from sketchlab.tokenizer import Tokenizer

    base_cfg = base_cfg or TrainConfig()
    tokenizer = tokenizer or Tokenizer.fit(p.description for p in pairs)
    rows: list[AblationRow] = []
    logs: dict[str, TrainLog] = {}
    for targets in TARGETS_ORDER:
        model = EncoderModel(encoder_config, tokenizer, seed=model_seed)
        cfg = replace(base_cfg, lora=replace(base_cfg.lora, targets=targets))
        adapted, log = train(model, pairs, cfg)
        final = log.final()
        rows.append(AblationRow(
            targets=targets, final_loss=final.loss, acc1=final.acc1,
            acc5=final.acc5, acc10=final.acc10, acc25=final.acc25,
            trainable_params=adapted.trainable_param_count(),
        ))
        logs[targets] = log
    return AblationResult(rows=rows, logs=logs)
