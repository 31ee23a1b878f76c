"""8-bit grayscale images: container, binary PGM (P5) codec, nearest resize.

PGM is the required interchange format everywhere (disk, HTTP payloads). PNG
reading is a convenience that activates only when Pillow is importable; nothing
in the package or tests requires it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sketchlab.errors import DimensionError, ValidationError


@dataclass
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape [height, width], row-major

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"image dims must be positive, got {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width):
            if self.pixels.size == self.width * self.height:
                self.pixels = self.pixels.reshape(self.height, self.width)
            else:
                raise DimensionError(
                    f"pixel buffer of size {self.pixels.size} does not match "
                    f"{self.width}x{self.height}"
                )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GrayImage":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr.astype(np.uint8))

    def resize(self, width: int, height: int) -> "GrayImage":
        return GrayImage.from_array(resize_nearest(self.pixels, width, height))

    def __eq__(self, other) -> bool:
        return (isinstance(other, GrayImage)
                and self.width == other.width
                and self.height == other.height
                and np.array_equal(self.pixels, other.pixels))


def resize_nearest(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbor resize: dst index i maps to src floor(i * src / dst)."""
    if width < 1 or height < 1:
        raise ValidationError(f"resize target must be positive, got {width}x{height}")
    src_h, src_w = pixels.shape
    rows = (np.arange(height) * src_h) // height
    cols = (np.arange(width) * src_w) // width
    return pixels[rows][:, cols]


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Read one whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValidationError("truncated PGM header")
    return data[start:pos], pos


def decode_pgm(data: bytes) -> GrayImage:
    magic, pos = _next_token(data, 0)
    if magic != b"P5":
        raise ValidationError(f"not a binary PGM (magic {magic!r}, expected b'P5')")
    fields = []
    for _ in range(3):
        tok, pos = _next_token(data, pos)
        if not tok.isdigit():
            raise ValidationError(f"bad PGM header token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ValidationError(f"bad PGM dimensions {width}x{height}")
    if not (0 < maxval <= 255):
        raise ValidationError(f"only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise ValidationError(
            f"PGM raster truncated: expected {width * height} bytes, got {len(raster)}"
        )
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return GrayImage(width=width, height=height, pixels=pixels.copy())


def encode_pgm(image: GrayImage) -> bytes:
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + image.pixels.tobytes()


def read_pgm(path: str | Path) -> GrayImage:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(image: GrayImage, path: str | Path) -> None:
    Path(path).write_bytes(encode_pgm(image))


def load_image(path: str | Path, *, size: int | None = None) -> GrayImage:
    """Load a .pgm (always) or .png (when Pillow is available) image."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        img = read_pgm(path)
    elif suffix == ".png":
        try:
            from PIL import Image  # optional; never required by tests
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ValidationError(
                f"{path}: PNG support requires Pillow, which is not installed"
            ) from exc
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
        img = GrayImage.from_array(arr)
    else:
        raise ValidationError(f"{path}: unsupported image format {suffix!r} (use .pgm)")
    if size is not None and (img.width, img.height) != (size, size):
        img = img.resize(size, size)
    return img
