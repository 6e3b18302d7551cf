import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from vexel import io
from _docs import random_svg_doc
from vexel.vgcore import Rect

# -- PNG ----------------------------------------------------------------------


def test_png_roundtrip_quantization(tmp_path):
    img = np.random.default_rng(0).uniform(size=(13, 17, 3))
    io.write_png(img, tmp_path / "a.png")
    back = io.read_png(tmp_path / "a.png")
    assert back.shape == img.shape and np.max(np.abs(back - img)) <= 1 / 510 + 1e-12


def test_write_rounds_half_up(tmp_path):
    img = np.full((1, 2, 3), 0.5 / 255)
    img[0, 1] = 1.5 / 255
    io.write_png(img, tmp_path / "h.png")
    assert np.asarray(Image.open(tmp_path / "h.png"))[0, :, 0].tolist() == [1, 2]


def test_transparent_pixel_reads_white(tmp_path):
    rgba = np.zeros((2, 2, 4), dtype=np.uint8)
    rgba[..., 0] = 255
    rgba[1, 1] = [0, 0, 255, 255]
    Image.fromarray(rgba, "RGBA").save(tmp_path / "t.png")
    img = io.read_png(tmp_path / "t.png")
    assert np.array_equal(img[0, 0], [1, 1, 1]) and np.array_equal(img[1, 1], [0, 0, 1])


def test_sixteen_bit_rejected(tmp_path):
    Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(io.ImageFormatError, match="16-bit"):
        io.read_png(tmp_path / "d.png")


def test_bad_file_names_path(tmp_path):
    p = tmp_path / "junk.png"
    p.write_bytes(b"not an image")
    with pytest.raises(io.ImageFormatError, match="junk.png"):
        io.read_png(p)
    with pytest.raises(FileNotFoundError, match="missing.png"):
        io.read_png(tmp_path / "missing.png")


# -- SVG ----------------------------------------------------------------------


def assert_docs_close(a, b):
    assert (a.width, a.height) == (b.width, b.height)
    assert len(a.rounds) == len(b.rounds)
    for ra, rb in zip(a.rounds, b.rounds):
        assert ra.precision == rb.precision
        assert (ra.region is None) == (rb.region is None)
        if ra.region is not None:
            assert np.allclose(ra.region.as_tuple(), rb.region.as_tuple(), atol=1e-6)
        assert [e.id for e in ra.elements] == [e.id for e in rb.elements]
        for ea, eb in zip(ra.elements, rb.elements):
            assert ea.path.points.shape == eb.path.points.shape
            assert np.max(np.abs(ea.path.points - eb.path.points)) <= 1e-6
            assert np.max(np.abs(ea.fill[:3] - eb.fill[:3])) <= 1 / 255
            assert abs(ea.fill[3] - eb.fill[3]) <= 1e-6


def test_svg_roundtrip_thousand_documents():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        doc = random_svg_doc(rng)
        text = io.serialize_svg(doc)
        back = io.parse_svg(text)
        assert_docs_close(doc, back)
        assert io.serialize_svg(back) == text


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_svg_roundtrip_property(seed):
    doc = random_svg_doc(np.random.default_rng(seed))
    assert_docs_close(doc, io.parse_svg(io.serialize_svg(doc)))


CONFORMING = """<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="10" height="8" viewBox="0 0 10 8">
  <g data-round-index="0" data-round-ncolors="10">
    <path data-id="0" d="M 1.000000 1.000000 C 2.000000 1.000000 3.000000 1.000000 4.000000 1.000000 C 4.000000 3.000000 2.000000 3.000000 1.000000 1.000000 Z" fill="#ff8000" fill-opacity="0.500000"/>
  </g>
  <g data-round-index="1" data-round-ncolors="30" data-round-region="1.000000 2.000000 3.000000 4.000000">
  </g>
</svg>
"""


def test_conforming_text_is_fixed_point():
    doc = io.parse_svg(CONFORMING)
    assert io.serialize_svg(doc) == CONFORMING
    assert len(doc.rounds) == 2 and doc.rounds[1].elements == ()
    assert doc.rounds[1].region == Rect(1, 2, 3, 4)
    assert np.allclose(doc.elements()[0].fill, [1, 128 / 255, 0, 0.5])


def _svg_with_d(d):
    return (f'<svg width="10" height="10"><g data-round-index="0" data-round-ncolors="1">'
            f'<path d="{d}" fill="#000000"/></g></svg>')


@pytest.mark.parametrize("d,needle", [
    ("M 0 0 Q 1 1 2 2 Z", "'Q' at offset 6"),
    ("M 0 0 A 1 1 0 0 1 2 2 Z", "'A' at offset 6"),
    ("M 0 0 c 1 1 2 2 3 3 Z", "'c' at offset 6"),
    ("m 0 0 C 1 1 2 2 3 3 Z", "'m' at offset 0"),
    ("M 0 0 C 1 1 2 2 3 3", "missing 'Z'"),
    ("M 0 0 C 1 1 2 2 Z", "multiple of 6"),
])
def test_path_errors(d, needle):
    with pytest.raises(io.SvgParseError, match=needle):
        io.parse_svg(_svg_with_d(d))


def test_open_endpoint_gets_closing_segment():
    doc = io.parse_svg(_svg_with_d("M 0 0 C 1 0 2 0 3 0 C 3 1 3 2 3 3 Z"))
    pts = doc.elements()[0].path.points
    assert len(pts) == 9
    assert np.allclose(pts[6], [3, 3]) and np.allclose(pts[7], [2, 2]) and np.allclose(pts[8], [1, 1])


def test_missing_ids_are_assigned():
    doc = io.parse_svg(_svg_with_d("M 0 0 C 1 0 2 0 3 0 C 3 1 3 2 0 0 Z"))
    assert doc.ids() == [0]


@pytest.mark.parametrize("text,needle", [
    ('<svg width="4" height="4"><g><rect/></g></svg>', "line 1, column 30: unexpected element <rect>"),
    ('<svg width="4" height="4" style="x"></svg>', "unknown attribute 'style'"),
    ('<svg width="4" height="4">\n<g data-round-index="0" foo="1"></g></svg>', "line 2, column 1: unknown attribute 'foo'"),
    ('<svg width="4" height="4"><g data-round-index="1"></g></svg>', "out of order"),
    ('<svg width="4"></svg>', "missing height"),
    ('<svg width="4" height="4"><g>', "malformed XML"),
    (_svg_with_d("M 0 0 C 1 0 2 0 0 0 Z").replace("#000000", "red"), "fill must be"),
])
def test_structure_errors(text, needle):
    with pytest.raises(io.SvgParseError, match=needle):
        io.parse_svg(text)


# -- config -------------------------------------------------------------------


def load(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return io.load_config(p)


def test_minimal_config_defaults(tmp_path):
    cfg = load(tmp_path, 'input = "img.png"\n[[guidance.rois]]\nprompt = "a sunny day"\n')
    assert cfg.input == str(tmp_path / "img.png")
    assert [r.n_colors for r in cfg.vectorize.rounds] == [10, 30]
    assert all(r.region is None for r in cfg.vectorize.rounds)
    roi = cfg.guidance.rois[0]
    assert (roi.rect, roi.roi_weight, roi.patch_count, roi.patch_weight_total, roi.patch_fraction) == (
        None, 30.0, 64, 80.0, 0.8)
    assert cfg.guidance.reference_text == "photo"
    o = cfg.optimizer
    assert (o.iterations, o.lr_shape, o.lr_color, o.mode) == (150, 0.2, 0.01, "both")
    assert cfg.backend.kind == "mock"


def test_empty_optimizer_table(tmp_path):
    assert load(tmp_path, "[optimizer]\n").optimizer.iterations == 150


def test_full_config(tmp_path):
    cfg = load(tmp_path, """
input = "/abs/in.png"
[output]
svg = "out/o.svg"
[vectorize]
seed = 4
rounds = [{n_colors = 8}, {n_colors = 30, region = [10, 20, 30, 40]}]
[guidance]
reference_text = "picture"
content_weight = 1e6
[[guidance.rois]]
rect = [0, 0, 100, 50]
prompt = "a"
patch_count = 8
[optimizer]
mode = "color_only"
subregion = [5, 5, 10, 10]
seed = 9
[backend]
kind = "mock"
seed = 2
text_vectors = {a = [1.0, 0.0]}
""")
    assert cfg.input == "/abs/in.png" and cfg.output.svg == str(tmp_path / "out/o.svg")
    assert cfg.vectorize.rounds[1].region == (10.0, 20.0, 30.0, 40.0) and cfg.vectorize.seed == 4
    assert cfg.guidance.content_weight == 1e6 and cfg.guidance.rois[0].patch_count == 8
    assert cfg.optimizer.subregion == (5.0, 5.0, 10.0, 10.0) and cfg.optimizer.mode == "color_only"
    assert cfg.backend.text_vectors == {"a": (1.0, 0.0)}


@pytest.mark.parametrize("text,needle", [
    ("[[guidance.rois]]\nprompt = \"x\"\npatch_fraction = 1.5\n", "patch_fraction"),
    ("[optimizer]\nbogus = 1\n", "unknown key optimizer.bogus"),
    ("colour = 1\n", "unknown key colour"),
    ("[optimizer]\niterations = \"many\"\n", "optimizer.iterations must be an integer"),
    ("[optimizer]\nmode = \"all\"\n", "optimizer.mode"),
    ("[[guidance.rois]]\nrect = [0, 0, 10]\nprompt = \"x\"\n", "rect"),
    ("[[guidance.rois]]\npatch_count = 2\n", "prompt is required"),
    ("[vectorize]\nrounds = [{n_colors = 5, region = [0, 0, 4, 4]}]\n", "full canvas"),
    ("[backend]\nkind = \"external\"\n", "text_model"),
    ("[backend]\nkind = \"gpu\"\n", "backend.kind"),
    ("not toml at all [", "run.toml"),
])
def test_config_errors(tmp_path, text, needle):
    with pytest.raises(io.ConfigError, match=needle):
        load(tmp_path, text)
