"""Single-line text rasterizer backed by a bitmap glyph atlas.

Rendering is black ink on a white strip of height ``line_height`` and width
``max_patches * patch_width``. Intensities are float32 in [0, 1] with 1.0 as
the white background.
"""

from __future__ import annotations

import hashlib
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

ATLAS_MAGIC = b"GATL"
ATLAS_VERSION = 1
FALLBACK_CODEPOINT = 0xFFFFFFFF

_HEADER = struct.Struct("<4sHHHI")
_GLYPH = struct.Struct("<IHHhhH")


class AtlasFormatError(ValueError):
    """Raised when an atlas file cannot be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class GlyphBitmap:
    width: int
    height: int
    bearing_x: int
    bearing_y: int  # distance from baseline up to the top row
    advance: int
    coverage: np.ndarray  # uint8 alpha, shape (height, width)

    def __post_init__(self):
        cov = np.ascontiguousarray(self.coverage, dtype=np.uint8).reshape(self.height, self.width)
        cov.setflags(write=False)
        object.__setattr__(self, "coverage", cov)
        # ink = 1 - alpha / 255, precomputed for blending
        ink = (1.0 - cov.astype(np.float32) / 255.0).astype(np.float32)
        ink.setflags(write=False)
        object.__setattr__(self, "_ink", ink)
        object.__setattr__(self, "_has_ink", bool(cov.any()))

    def __eq__(self, other):
        if not isinstance(other, GlyphBitmap):
            return NotImplemented
        return (
            (self.width, self.height, self.bearing_x, self.bearing_y, self.advance)
            == (other.width, other.height, other.bearing_x, other.bearing_y, other.advance)
            and np.array_equal(self.coverage, other.coverage)
        )

    __hash__ = None


@dataclass(frozen=True)
class GlyphAtlas:
    glyphs: dict[int, GlyphBitmap]
    ascent: int
    descent: int
    fallback: GlyphBitmap

    def glyph(self, codepoint: int | str) -> GlyphBitmap:
        if isinstance(codepoint, str):
            codepoint = ord(codepoint)
        return self.glyphs.get(codepoint, self.fallback)

    def __len__(self):
        return len(self.glyphs)


@dataclass(frozen=True)
class RenderConfig:
    font_size: int = 10
    line_height: int = 16
    patch_width: int = 16
    max_patches: int = 512
    newline_symbol: str = "////"
    prefix: str = "Beginning of the sequence:"
    word_spacing: int = 0
    margin_left: int = 0
    eos_black_patch: bool = True
    # accepted for config parity; inert for single-line rendering
    line_space: int = 6

    def __post_init__(self):
        if self.max_patches < 2:
            raise ValueError(f"max_patches must be >= 2, got {self.max_patches}")
        if self.patch_width < 1 or self.line_height < 1:
            raise ValueError("patch_width and line_height must be positive")

    @property
    def width(self) -> int:
        return self.max_patches * self.patch_width


@dataclass(eq=False)
class Screenshot:
    pixels: np.ndarray  # float32 [line_height, max_patches * patch_width]
    eos_patch_index: int | None
    source_text: str
    truncated: bool
    patch_width: int = 16
    last_ink_column: int = 0

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def n_patches(self) -> int:
        return self.width // self.patch_width

    @property
    def patches_used(self) -> int:
        return math.ceil(self.last_ink_column / self.patch_width)


def full_text(text: str, config: RenderConfig) -> str:
    """The exact string rendered for ``text``: prefix, then text with newlines substituted."""
    body = text.replace("\n", config.newline_symbol)
    if config.prefix and body:
        return f"{config.prefix} {body}"
    return config.prefix or body


def _layout(line: str, atlas: GlyphAtlas, config: RenderConfig):
    """Place glyphs left to right. Returns (placements, last_ink_column, truncated)."""
    limit = config.width - (config.patch_width if config.eos_black_patch else 0)
    pen = config.margin_left
    placements = []
    last_ink = 0
    truncated = False
    for ch in line:
        g = atlas.glyph(ch)
        x0 = pen + g.bearing_x
        if g._has_ink:
            if x0 + g.width > limit:
                truncated = True
                break
            placements.append((g, x0))
            last_ink = max(last_ink, x0 + g.width)
        pen += g.advance
        if ch == " ":
            pen += config.word_spacing
    return placements, last_ink, truncated


def _baseline(atlas: GlyphAtlas, config: RenderConfig) -> int:
    if atlas.ascent + atlas.descent > config.line_height:
        raise ValueError(
            f"atlas ascent+descent={atlas.ascent + atlas.descent} exceeds line_height={config.line_height}"
        )
    return (config.line_height - atlas.ascent - atlas.descent) // 2 + atlas.ascent


def render_line(text: str, atlas: GlyphAtlas, config: RenderConfig = RenderConfig()) -> Screenshot:
    line = full_text(text, config)
    placements, last_ink, truncated = _layout(line, atlas, config)
    h, w, pw = config.line_height, config.width, config.patch_width
    pixels = np.ones((h, w), dtype=np.float32)
    baseline = _baseline(atlas, config)
    for g, x0 in placements:
        y0 = baseline - g.bearing_y
        ys, ye = max(y0, 0), min(y0 + g.height, h)
        xs, xe = max(x0, 0), min(x0 + g.width, w)
        if ys >= ye or xs >= xe:
            continue
        region = pixels[ys:ye, xs:xe]
        np.minimum(region, g._ink[ys - y0 : ye - y0, xs - x0 : xe - x0], out=region)
    # with negative bearings, ink can start left of the strip; clamp the column
    last_ink = max(0, min(last_ink, w))
    eos = None
    if config.eos_black_patch:
        eos = math.ceil(last_ink / pw)
        pixels[:, eos * pw : (eos + 1) * pw] = 0.0
    return Screenshot(
        pixels=pixels,
        eos_patch_index=eos,
        source_text=line,
        truncated=truncated,
        patch_width=pw,
        last_ink_column=last_ink,
    )


def measure_fit(text: str, atlas: GlyphAtlas, config: RenderConfig = RenderConfig()) -> int:
    """Number of patches up to and including the last one touched by ink."""
    _, last_ink, _ = _layout(full_text(text, config), atlas, config)
    return min(math.ceil(max(last_ink, 0) / config.patch_width), config.max_patches)


# -- atlases -----------------------------------------------------------------

BUILTIN_ASCENT = 12
BUILTIN_DESCENT = 4


def _hash_glyph(codepoint: int) -> GlyphBitmap:
    digest = hashlib.blake2b(codepoint.to_bytes(4, "little"), digest_size=8, person=b"screenlm").digest()
    bits = np.unpackbits(np.frombuffer(digest, dtype=np.uint8))[:60]
    return GlyphBitmap(
        width=6, height=10, bearing_x=0, bearing_y=11, advance=7, coverage=(bits * 255).astype(np.uint8)
    )


def builtin_test_atlas() -> GlyphAtlas:
    """Procedural atlas covering printable ASCII.

    Every non-space glyph is a 6x10 binary bitmap drawn from a keyed hash of its
    codepoint, so the atlas is identical on every platform. Space is blank.
    Unmapped codepoints get a hollow box.
    """
    glyphs = {}
    for cp in range(0x20, 0x7F):
        if cp == 0x20:
            glyphs[cp] = GlyphBitmap(6, 10, 0, 11, 7, np.zeros(60, dtype=np.uint8))
        else:
            glyphs[cp] = _hash_glyph(cp)
    box = np.zeros((10, 6), dtype=np.uint8)
    box[[0, -1], :] = 255
    box[:, [0, -1]] = 255
    fallback = GlyphBitmap(6, 10, 0, 11, 7, box)
    return GlyphAtlas(glyphs=glyphs, ascent=BUILTIN_ASCENT, descent=BUILTIN_DESCENT, fallback=fallback)


def _pack_glyph(cp: int, g: GlyphBitmap) -> bytes:
    return _GLYPH.pack(cp, g.width, g.height, g.bearing_x, g.bearing_y, g.advance) + g.coverage.tobytes()


def atlas_to_bytes(atlas: GlyphAtlas) -> bytes:
    records = [_pack_glyph(cp, atlas.glyphs[cp]) for cp in sorted(atlas.glyphs)]
    records.append(_pack_glyph(FALLBACK_CODEPOINT, atlas.fallback))
    header = _HEADER.pack(ATLAS_MAGIC, ATLAS_VERSION, atlas.ascent, atlas.descent, len(records))
    return header + b"".join(records)


def atlas_from_bytes(data: bytes) -> GlyphAtlas:
    if len(data) < _HEADER.size:
        raise AtlasFormatError("truncated header", len(data))
    magic, version, ascent, descent, count = _HEADER.unpack_from(data, 0)
    if magic != ATLAS_MAGIC:
        raise AtlasFormatError(f"bad magic {magic!r}", 0)
    if version != ATLAS_VERSION:
        raise AtlasFormatError(f"unsupported version {version}", 4)
    offset = _HEADER.size
    glyphs: dict[int, GlyphBitmap] = {}
    fallback = None
    for i in range(count):
        if offset + _GLYPH.size > len(data):
            raise AtlasFormatError(f"glyph record {i} header overruns file", offset)
        cp, w, h, bx, by, adv = _GLYPH.unpack_from(data, offset)
        start = offset + _GLYPH.size
        end = start + w * h
        if end > len(data):
            raise AtlasFormatError(f"glyph record {i} bitmap overruns file", offset)
        g = GlyphBitmap(w, h, bx, by, adv, np.frombuffer(data[start:end], dtype=np.uint8))
        if cp == FALLBACK_CODEPOINT:
            fallback = g
        elif cp in glyphs:
            raise AtlasFormatError(f"duplicate codepoint {cp:#x}", offset)
        else:
            glyphs[cp] = g
        offset = end
    if offset != len(data):
        raise AtlasFormatError("trailing bytes after last glyph record", offset)
    if fallback is None:
        raise AtlasFormatError("missing fallback glyph", offset)
    return GlyphAtlas(glyphs=glyphs, ascent=ascent, descent=descent, fallback=fallback)


def save_atlas(atlas: GlyphAtlas, path: str | Path) -> None:
    Path(path).write_bytes(atlas_to_bytes(atlas))


def load_atlas(path: str | Path) -> GlyphAtlas:
    return atlas_from_bytes(Path(path).read_bytes())


# -- PNG ---------------------------------------------------------------------


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(screenshot: Screenshot | np.ndarray, path: str | Path) -> None:
    pixels = screenshot.pixels if isinstance(screenshot, Screenshot) else screenshot
    Image.fromarray(to_bytes(pixels), mode="L").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


# -- benchmarking ------------------------------------------------------------


@dataclass
class RenderBenchmark:
    strings: int
    chars: int
    patches: int
    seconds: float
    checksum: int
    chars_per_sec: float = field(init=False)
    patches_per_sec: float = field(init=False)

    def __post_init__(self):
        t = max(self.seconds, 1e-12)
        self.chars_per_sec = self.chars / t
        self.patches_per_sec = self.patches / t


def bench_render(corpus: Sequence[str] | Iterable[str], atlas: GlyphAtlas, config: RenderConfig) -> RenderBenchmark:
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    chars = patches = 0
    checksum = 1
    t0 = time.perf_counter()
    for text in corpus:
        shot = render_line(text, atlas, config)
        chars += len(text)
        patches += shot.n_patches
        checksum = zlib.adler32(shot.pixels.tobytes(), checksum)
    elapsed = time.perf_counter() - t0
    return RenderBenchmark(len(corpus), chars, patches, elapsed, checksum)
