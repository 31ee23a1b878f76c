"""Dataset handling: manifests, prompt templates, splits, synthetic fixtures.

A manifest is JSON Lines: one object per line with exactly the fields
{id, image_path, description}; image paths resolve relative to the manifest's
directory. The synthetic fixture generator produces clustered stripe motifs
whose per-item appearance (shading offset, stripe weight) is named in the
generated description, so contrastive training has real signal to learn.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from sketchlab.errors import IngestError, TemplateError, ValidationError
from sketchlab.images import GrayImage, load_image, write_pgm

DEFAULT_TEMPLATE = "The suspect is described as {demographic} with {physical attributes}."

_SLOT_RE = re.compile(r"\{([^{}]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """String template with named slots; rendering fails loudly on missing slots."""

    template: str = DEFAULT_TEMPLATE

    def slot_names(self) -> list[str]:
        return _SLOT_RE.findall(self.template)

    def render(self, slots: Mapping[str, str]) -> str:
        missing = [name for name in self.slot_names() if name not in slots]
        if missing:
            raise TemplateError(missing)
        return _SLOT_RE.sub(lambda m: str(slots[m.group(1)]), self.template)


def render_prompt(slots: Mapping[str, str],
                  template: PromptTemplate | None = None) -> str:
    return (template or PromptTemplate()).render(slots)


@dataclass
class SketchPair:
    id: str
    image: GrayImage
    description: str
    cluster: int | None = None  # set by the fixture generator; absent for manifests


def load_manifest(path: str | Path, *, image_size: int = 64) -> list[SketchPair]:
    """Parse a JSONL manifest, loading and resizing every referenced image.

    All record-level problems are collected and raised together as one
    IngestError so a bad manifest is diagnosed in a single pass.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError([f"manifest not found: {path}"])
    base = path.parent
    pairs: list[SketchPair] = []
    problems: list[str] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        if not isinstance(record, dict):
            problems.append(f"line {lineno}: record is not an object")
            continue
        missing = [k for k in ("id", "image_path", "description") if k not in record]
        if missing:
            problems.append(f"line {lineno}: missing field(s) {', '.join(missing)}")
            continue
        rid = str(record["id"])
        if rid in seen:
            problems.append(f"line {lineno}: duplicate id {rid!r}")
            continue
        seen.add(rid)
        description = record["description"]
        if not isinstance(description, str) or not description.strip():
            problems.append(f"line {lineno} (id {rid!r}): empty description")
            continue
        img_path = base / str(record["image_path"])
        try:
            image = load_image(img_path, size=image_size)
        except (ValidationError, OSError) as exc:
            problems.append(f"line {lineno} (id {rid!r}): {exc}")
            continue
        pairs.append(SketchPair(id=rid, image=image, description=description))
    if problems:
        raise IngestError(problems)
    return pairs


def split(pairs: Sequence[SketchPair], ratio: float = 0.8,
          seed: int = 0) -> tuple[list[SketchPair], list[SketchPair]]:
    """Deterministic shuffled split; train gets floor(ratio * n) items."""
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(pairs)
    if n < 2:
        raise ValidationError(f"need at least 2 pairs to split, got {n}")
    cut = math.floor(ratio * n)
    if cut == 0 or cut == n:
        raise ValidationError(f"split ratio {ratio} leaves an empty side for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    train = [pairs[i] for i in perm[:cut]]
    val = [pairs[i] for i in perm[cut:]]
    return train, val


# Cluster-level motif vocabulary (orientation word doubles as the cluster's
# text signal) and item-level attribute words. 8 shading and 8 weight levels.
_ORIENTATIONS = [
    "vertical", "horizontal", "diagonal", "slanted",
    "steep", "shallow", "upright", "oblique",
    "leaning", "crosswise", "angled", "tilted",
]
_DENSITIES = ["sparse", "spaced", "regular", "dense"]
_SHADE_WORDS = ["charcoal", "dark", "dim", "muted", "soft", "light", "bright", "pale"]
_WEIGHT_WORDS = ["hairline", "fine", "thin", "narrow", "medium", "firm", "heavy", "bold"]


def _cluster_motif(cluster: int, num_clusters: int) -> tuple[str, float, float]:
    """Returns (cluster phrase, stripe angle in radians, stripe frequency)."""
    orientation = _ORIENTATIONS[cluster % len(_ORIENTATIONS)]
    density = _DENSITIES[(cluster // len(_ORIENTATIONS)) % len(_DENSITIES)]
    angle = math.pi * cluster / max(num_clusters, 1)
    freq = 2.0 + (cluster % 3)  # wavelengths >= size/4: smooth enough to encode
    phrase = f"{density} {orientation}" if cluster >= len(_ORIENTATIONS) else orientation
    return phrase, angle, freq


def _stripe_image(size: int, angle: float, freq: float,
                  shade_level: int, weight_level: int) -> GrayImage:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t_main = (math.cos(angle) * xx + math.sin(angle) * yy) * (2.0 * math.pi * freq / size)
    # Per-item signature: two axis-aligned gratings, one full cycle per 8 px
    # patch, so every patch sees the identical pattern and the signal
    # survives mean pooling intact. The shading word sets the x-grating
    # amplitude and the weight word the y-grating amplitude; pattern-shaped
    # signals also survive normalization layers, where plain brightness
    # offsets would be attenuated away.
    grating_x = np.sin(2.0 * math.pi * 8.0 * xx / size)
    grating_y = np.sin(2.0 * math.pi * 8.0 * yy / size)
    shade_amp = 0.03 + 0.025 * shade_level        # 0.03 .. 0.205
    weight_amp = 0.03 + 0.025 * weight_level
    values = (0.5 + 0.20 * np.sin(t_main)
              + shade_amp * grating_x + weight_amp * grating_y)
    pixels = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    return GrayImage.from_array(pixels)


def synth_fixture(num_clusters: int, pairs_per_cluster: int, seed: int,
                  *, image_size: int = 64,
                  template: PromptTemplate | None = None) -> list[SketchPair]:
    """Clustered synthetic (description, sketch) pairs, deterministic in seed."""
    if num_clusters < 2:
        raise ValidationError(f"need at least 2 clusters, got {num_clusters}")
    if pairs_per_cluster < 1:
        raise ValidationError(f"pairs_per_cluster must be >= 1, got {pairs_per_cluster}")
    template = template or PromptTemplate()
    rng = np.random.default_rng(seed)
    pairs: list[SketchPair] = []
    # Small clusters draw attribute combos from the even sublattice so any
    # two cluster-mates differ by at least two amplitude levels in some
    # factor - items are meant to model distinct individuals, not near-twins.
    spread = [0, 2, 4, 6]
    n_spread = len(spread) ** 2
    n_levels = len(_SHADE_WORDS) * len(_WEIGHT_WORDS)
    for c in range(num_clusters):
        phrase, angle, freq = _cluster_motif(c, num_clusters)
        if pairs_per_cluster <= n_spread:
            picks = rng.choice(n_spread, size=pairs_per_cluster, replace=False)
            levels = [(spread[int(p) % 4], spread[int(p) // 4]) for p in picks]
        else:
            replace = pairs_per_cluster > n_levels
            picks = rng.choice(n_levels, size=pairs_per_cluster, replace=replace)
            levels = [(int(p) % len(_SHADE_WORDS), int(p) // len(_SHADE_WORDS))
                      for p in picks]
        for j, (shade, weight) in enumerate(levels):
            image = _stripe_image(image_size, angle, freq, shade, weight)
            description = template.render({
                "demographic": f"a suspect bearing {phrase} stripe markings",
                "physical attributes": (
                    f"{_SHADE_WORDS[shade]} shading and "
                    f"{_WEIGHT_WORDS[weight]} stripe lines"
                ),
            })
            pairs.append(SketchPair(
                id=f"c{c:02d}-{j:03d}",
                image=image,
                description=description,
                cluster=c,
            ))
    return pairs


def write_fixture(pairs: Sequence[SketchPair], out_dir: str | Path) -> Path:
    """Write PGM files plus a manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for pair in pairs:
        filename = f"{pair.id}.pgm"
        write_pgm(pair.image, out_dir / filename)
        lines.append(json.dumps(
            {"id": pair.id, "image_path": filename, "description": pair.description},
            ensure_ascii=True, sort_keys=True,
        ))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def descriptions(pairs: Sequence[SketchPair]) -> list[str]:
    return [p.description for p in pairs]
