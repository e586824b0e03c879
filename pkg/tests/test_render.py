import math
import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from screenlm.render import (
    AtlasFormatError,
    GlyphAtlas,
    GlyphBitmap,
    RenderConfig,
    atlas_from_bytes,
    atlas_to_bytes,
    bench_render,
    builtin_test_atlas,
    full_text,
    load_atlas,
    load_png,
    measure_fit,
    render_line,
    save_atlas,
    save_png,
)

SMALL = RenderConfig(max_patches=32)
printable = st.text(alphabet=st.characters(min_codepoint=0x20, max_codepoint=0x7E), max_size=60)
with_newlines = st.text(alphabet=st.sampled_from(list("ab c\n/ ")), max_size=40)


def patch_columns(shot):
    pw = shot.patch_width
    return [shot.pixels[:, i * pw : (i + 1) * pw] for i in range(shot.n_patches)]


def inked_patch_count(shot):
    """Index of the last patch holding glyph ink, plus one (0 if none)."""
    cols = patch_columns(shot)
    last = 0
    for i, c in enumerate(cols):
        if i == shot.eos_patch_index:
            continue
        if (c < 1.0).any():
            last = i + 1
    return last


# -- atlas ---------------------------------------------------------------------


def test_builtin_atlas_is_deterministic():
    a, b = builtin_test_atlas(), builtin_test_atlas()
    assert a.glyphs.keys() == b.glyphs.keys()
    assert all(a.glyphs[k] == b.glyphs[k] for k in a.glyphs)
    assert atlas_to_bytes(a) == atlas_to_bytes(b)


def test_builtin_glyphs_distinct_over_ascii(atlas):
    grids = [atlas.glyph(cp).coverage.tobytes() for cp in range(0x21, 0x7F)]
    assert len(set(grids)) == len(grids)
    assert atlas.glyph("a") != atlas.glyph("b")


def test_builtin_glyph_shape(atlas):
    g = atlas.glyph("Q")
    assert (g.width, g.height, g.advance) == (6, 10, 7)
    assert g.bearing_y <= atlas.ascent and g.height - g.bearing_y <= atlas.descent


def test_lookup_is_total(atlas):
    g = atlas.glyph(0x4E2D)
    assert g is atlas.fallback
    assert g.advance >= 1


def test_atlas_roundtrip_count(atlas, tmp_path):
    path = tmp_path / "font.gatl"
    save_atlas(atlas, path)
    back = load_atlas(path)
    assert len(back) == 95
    assert back.fallback == atlas.fallback
    assert atlas_to_bytes(back) == path.read_bytes()


glyph_st = st.builds(
    lambda w, h, bx, by, adv, seed: GlyphBitmap(
        w, h, bx, by, adv, np.random.default_rng(seed).integers(0, 256, w * h, dtype=np.uint8)
    ),
    st.integers(0, 8),
    st.integers(0, 12),
    st.integers(-3, 3),
    st.integers(-2, 14),
    st.integers(1, 12),
    st.integers(0, 2**32 - 1),
)


@given(st.dictionaries(st.integers(0, 0x10FFFF), glyph_st, max_size=8), glyph_st, st.integers(0, 20), st.integers(0, 20))
@settings(max_examples=60, deadline=None)
def test_atlas_bytes_roundtrip_random(glyphs, fallback, ascent, descent):
    atlas = GlyphAtlas(glyphs, ascent, descent, fallback)
    data = atlas_to_bytes(atlas)
    back = atlas_from_bytes(data)
    assert atlas_to_bytes(back) == data
    assert back.glyphs.keys() == glyphs.keys()


def test_atlas_header_errors(atlas):
    data = atlas_to_bytes(atlas)
    with pytest.raises(AtlasFormatError, match="magic"):
        atlas_from_bytes(b"XXXX" + data[4:])
    bad_version = data[:4] + struct.pack("<H", 2) + data[6:]
    with pytest.raises(AtlasFormatError, match="version") as e:
        atlas_from_bytes(bad_version)
    assert e.value.offset == 4
    with pytest.raises(AtlasFormatError, match="header"):
        atlas_from_bytes(data[:5])


def test_atlas_truncated_record_names_offset(atlas):
    data = atlas_to_bytes(atlas)
    cut = data[:-10]
    with pytest.raises(AtlasFormatError, match="overruns") as e:
        atlas_from_bytes(cut)
    # the offending record is the last one (the fallback box)
    record = 14 + 6 * 10
    assert e.value.offset == len(data) - record


def test_atlas_trailing_and_missing_fallback(atlas):
    data = atlas_to_bytes(atlas)
    with pytest.raises(AtlasFormatError, match="trailing"):
        atlas_from_bytes(data + b"\0")
    g = atlas.glyph("a")
    only = struct.pack("<4sHHHI", b"GATL", 1, 12, 4, 1) + struct.pack("<IHHhhH", 97, 6, 10, 0, 11, 7) + g.coverage.tobytes()
    with pytest.raises(AtlasFormatError, match="fallback"):
        atlas_from_bytes(only)


# -- rendering -------------------------------------------------------------------


def test_geometry_and_range(atlas):
    shot = render_line("Hello, world", atlas, SMALL)
    assert shot.pixels.shape == (16, 32 * 16)
    assert shot.pixels.dtype == np.float32
    assert shot.pixels.min() >= 0.0 and shot.pixels.max() <= 1.0


def test_empty_text_renders_prefix_then_eos(atlas):
    shot = render_line("", atlas, SMALL)
    assert shot.source_text == SMALL.prefix
    prefix_cols = len(SMALL.prefix) * 7 - 1  # last glyph has no trailing gap
    assert shot.eos_patch_index == math.ceil(prefix_cols / 16)
    assert inked_patch_count(shot) == shot.eos_patch_index


def test_newline_symbol_substitution(atlas):
    a = render_line("a\nb", atlas, SMALL)
    b = render_line("a////b", atlas, SMALL)
    assert np.array_equal(a.pixels, b.pixels)


@given(with_newlines)
@settings(max_examples=50, deadline=None)
def test_newline_erasure_property(s):
    atlas = builtin_test_atlas()
    a = render_line(s, atlas, SMALL)
    b = render_line(s.replace("\n", "////"), atlas, SMALL)
    assert np.array_equal(a.pixels, b.pixels)


def test_full_text_joins_prefix():
    assert full_text("x", RenderConfig()) == "Beginning of the sequence: x"
    assert full_text("", RenderConfig(prefix="")) == ""
    assert full_text("x", RenderConfig(prefix="")) == "x"


@given(printable)
@settings(max_examples=80, deadline=None)
def test_eos_structure(text):
    atlas = builtin_test_atlas()
    shot = render_line(text, atlas, SMALL)
    cols = patch_columns(shot)
    e = shot.eos_patch_index
    assert e is not None and 0 < e < shot.n_patches
    assert (cols[e] == 0.0).all()
    assert all((c == 1.0).all() for c in cols[e + 1 :])
    black = [i for i, c in enumerate(cols) if (c == 0.0).all()]
    assert black == [e]


@given(printable)
@settings(max_examples=80, deadline=None)
def test_measure_fit_matches_rendering(text):
    atlas = builtin_test_atlas()
    for cfg in (SMALL, RenderConfig(max_patches=32, prefix="", eos_black_patch=False)):
        shot = render_line(text, atlas, cfg)
        assert measure_fit(text, atlas, cfg) == inked_patch_count(shot)
        assert measure_fit(text, atlas, cfg) <= cfg.max_patches


def test_measure_fit_empty_without_prefix(atlas):
    assert measure_fit("", atlas, RenderConfig(prefix="")) == 0


def test_truncation_keeps_whole_glyphs(atlas):
    cfg = RenderConfig(max_patches=4, prefix="")
    shot = render_line("abcdefghijklmnop", atlas, cfg)
    assert shot.truncated
    # 48 px of room before the EOS patch; glyphs are 6 wide on a 7 px pitch
    assert shot.last_ink_column == 6 * 7 + 6
    assert shot.eos_patch_index == 3
    short = render_line("abc", atlas, cfg)
    assert not short.truncated


def test_no_eos_patch_when_disabled(atlas):
    shot = render_line("abc", atlas, RenderConfig(max_patches=8, eos_black_patch=False, prefix=""))
    assert shot.eos_patch_index is None
    assert not any((c == 0.0).all() for c in patch_columns(shot))


def test_max_ink_blending():
    a = np.full((10, 6), 128, dtype=np.uint8)
    g = GlyphBitmap(6, 10, 0, 11, 2, a)
    atlas = GlyphAtlas({ord("x"): g}, 12, 4, g)
    shot = render_line("xx", atlas, RenderConfig(max_patches=4, prefix="", eos_black_patch=False))
    ink = np.float32(1) - np.float32(128) / np.float32(255)
    # baseline row 12, bearing 11: ink occupies rows 1..10; the overlap keeps min(ink, ink) == ink
    assert (shot.pixels[1:11, 0:8] == ink).all()
    assert (shot.pixels[1:11, 8:] == 1.0).all()
    assert (shot.pixels[0] == 1.0).all() and (shot.pixels[11:] == 1.0).all()


def test_determinism_across_threads(atlas):
    texts = [f"sample {i} with text" for i in range(24)]
    ref = [render_line(t, atlas, SMALL).pixels for t in texts]
    with ThreadPoolExecutor(8) as pool:
        got = list(pool.map(lambda t: render_line(t, atlas, SMALL).pixels, texts))
    assert all(np.array_equal(a, b) for a, b in zip(ref, got))


def test_max_patches_lower_bound():
    with pytest.raises(ValueError):
        RenderConfig(max_patches=1)


# -- png -------------------------------------------------------------------------


def test_png_white_and_black(atlas, tmp_path):
    shot = render_line("", atlas, RenderConfig(max_patches=8, prefix=""))
    path = tmp_path / "s.png"
    save_png(shot, path)
    back = load_png(path)
    assert (back[:, 16:] == 1.0).all()
    assert (back[:, :16] == 0.0).all()


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
def test_png_roundtrip_error(seed, tmp_path_factory):
    px = np.random.default_rng(seed).random((16, 64), dtype=np.float32)
    path = tmp_path_factory.mktemp("png") / "r.png"
    save_png(px, path)
    assert np.abs(load_png(path) - px).max() <= 1 / 255


# -- bench -----------------------------------------------------------------------


def test_bench_reports(atlas):
    r = bench_render(["hello there"], atlas, SMALL)
    assert r.chars == 11 and r.chars_per_sec > 0 and r.patches == 32
    r2 = bench_render(["", "x"], atlas, SMALL)
    assert r2.chars == 1
    with pytest.raises(ValueError):
        bench_render([], atlas, SMALL)


def test_bench_checksum_deterministic(atlas):
    a = bench_render(["abc", "def"], atlas, SMALL)
    b = bench_render(["abc", "def"], atlas, SMALL)
    assert a.checksum == b.checksum
