"""Acceptance checks, one test per criterion, each reporting a PASS/FAIL line."""

import time

import numpy as np
import pytest
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from _docs import blob, random_doc, random_svg_doc
from vexel import io, synthetic
from vexel.guidance import (
    GuidanceConfig,
    LinearMockEmbedder,
    RoiPrompt,
    clip_score,
    crop,
    directional_loss,
    patch_side,
    perspective_warp,
    resize,
    sample_patches,
    total_loss,
)
from vexel.optimizer import OptimizeConfig, optimize
from vexel.rasterizer import RenderSettings, backward, element_coverage, flatten_path, render, render_with_tape
from vexel.vectorizer import vectorize
from vexel.vgcore import PathElement, Rect, Round, VectorDocument, apply_params, flatten_params, select_intersecting


def relative_errors(f, analytic, values, indices, h):
    """Central differences of ``f`` at ``indices``; returns (relative errors, worst tiny-FD analytic)."""
    rel, tiny = [], 0.0
    for i in indices:
        v = values.copy()
        v[i] += h
        up = f(v)
        v[i] -= 2 * h
        dn = f(v)
        fd = (up - dn) / (2 * h)
        if abs(fd) < 1e-8:
            tiny = max(tiny, abs(analytic[i]))
        else:
            rel.append(abs(fd - analytic[i]) / abs(fd))
    return np.array(rel), tiny


def test_c1_rasterizer_gradients(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2025)
    rel, tiny = [], 0.0
    for d in range(4):
        doc = random_doc(rng, int(rng.integers(6, 11)), size=64)
        w = rng.normal(size=(64, 64, 3))
        p = flatten_params(doc)
        an = backward(render_with_tape(doc)[1], w).vector(p)
        idx = rng.choice(len(p), size=50, replace=False)
        r, t = relative_errors(lambda v: np.sum(render(apply_params(doc, p.with_values(v))) * w), an, p.values, idx, 1e-3)
        rel.extend(r)
        tiny = max(tiny, t)
    elapsed = time.perf_counter() - start
    ok = np.median(rel) <= 1e-2 and max(rel) <= 5e-2 and tiny <= 1e-6 and elapsed < 60
    criterion(1, "rasterizer gradient fidelity", ok,
              f"200 params, median {np.median(rel):.2e}, max {max(rel):.2e}, tiny-FD |grad| {tiny:.1e}, {elapsed:.1f}s")
    assert ok


def test_c2_guidance_chain_gradients(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    doc = random_doc(rng, 3, size=32, n_rounds=1)
    initial = render(random_doc(np.random.default_rng(8), 3, size=32, n_rounds=1))
    be = LinearMockEmbedder(seed=1)
    cfg = GuidanceConfig([RoiPrompt(Rect(2, 2, 28, 26), "a bright scene", patch_count=2)], content_weight=10.0)
    p = flatten_params(doc)

    def loss(v):
        return total_loss(be, cfg, render(apply_params(doc, p.with_values(v))), initial, np.random.default_rng(3)).loss

    img, tape = render_with_tape(doc)
    res = total_loss(be, cfg, img, initial, np.random.default_rng(3))
    an = backward(tape, res.grad).vector(p)
    rel, tiny = relative_errors(loss, an, p.values, range(len(p)), 1e-3)
    elapsed = time.perf_counter() - start
    ok = np.median(rel) <= 2e-2 and elapsed < 60
    criterion(2, "guidance chain gradient fidelity", ok,
              f"{len(p)} params, median {np.median(rel):.2e}, max {max(rel):.2e}, {elapsed:.1f}s")
    assert ok


def test_c3_patch_geometry(criterion):
    rng = np.random.default_rng(0)
    wide = Rect(0, 0, 500, 300)
    roi = np.ones((300, 500, 3))
    sides, padded = [], True
    for p in sample_patches(wide, 0.8, 16, 0.3, rng):
        patch = crop(roi, p.rect)
        sides.append(patch.shape[:2])
        padded &= not patch[300:].any() and bool(patch[:300].all())
    square = [p.rect[2:] for p in sample_patches(Rect(0, 0, 512, 512), 0.8, 16, 0.3, rng)]
    ok = (patch_side(wide, 0.8) == 400 and set(sides) == {(400, 400)} and padded
          and patch_side(Rect(0, 0, 512, 512), 0.8) == 410 and set(square) == {(410, 410)})
    criterion(3, "patch geometry", ok, f"500x300 -> {sorted(set(sides))}, zero-padded {padded}; 512x512 -> {sorted(set(square))}")
    assert ok


def _orthogonal(v, rng):
    w = rng.normal(size=v.shape)
    return w - (w @ v) / (v @ v) * v


def test_c4_loss_oracles(criterion):
    rng = np.random.default_rng(4)
    be = LinearMockEmbedder(seed=2)
    gen, src = rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3))
    d = be.embed_image(gen) - be.embed_image(src)
    be.register_text("ref", np.zeros(be.dim()))
    dl = {}
    for name, v in (("aligned", 2 * d), ("orthogonal", _orthogonal(d, rng)), ("antiparallel", -d)):
        be.register_text(name, v)
        dl[name] = directional_loss(be, name, "ref", gen, src)[0]
    ok_dir = np.allclose([dl["aligned"], dl["orthogonal"], dl["antiparallel"]], [0, 1, 2], atol=1e-6)

    # two ROIs with patches, summed by hand from independently composed pieces
    cur, ini = rng.uniform(size=(48, 48, 3)), rng.uniform(size=(48, 48, 3))
    rois = [RoiPrompt(Rect(0, 0, 30, 48), "left", patch_count=2),
            RoiPrompt(Rect(20, 6, 28, 20), "right", roi_weight=5.0, patch_count=3, patch_weight_total=12.0)]
    be.register_text("left", rng.normal(size=be.dim()))
    be.register_text("right", rng.normal(size=be.dim()))
    got = total_loss(be, GuidanceConfig(rois, reference_text="ref"), cur, ini, np.random.default_rng(11)).loss
    hand, prng = 0.0, np.random.default_rng(11)
    for r in rois:
        rect = (int(r.area.x), int(r.area.y), int(r.area.w), int(r.area.h))
        c, i = crop(cur, rect), crop(ini, rect)
        hand += r.roi_weight * directional_loss(be, r.prompt, "ref", resize(c, 32), resize(i, 32))[0]
        for p in sample_patches(r.area, r.patch_fraction, r.patch_count, r.perspective_strength, prng):
            rel = (p.rect[0] - rect[0], p.rect[1] - rect[1], p.rect[2], p.rect[3])
            g = resize(perspective_warp(crop(c, rel), p.quad), 32)
            hand += r.patch_weight_total / r.patch_count * directional_loss(be, r.prompt, "ref", g, resize(crop(i, rel), 32))[0]
    ok_sum = abs(got - hand) <= 1e-9 * max(1.0, abs(hand))

    e = be.embed_image(resize(cur, 32))
    scores = []
    for name, v in (("same", 3 * e), ("orth", _orthogonal(e, rng)), ("opp", -e)):
        be.register_text(name, v)
        scores.append(clip_score(be, cur, name))
    ok_clip = np.allclose(scores, [1, 0, -1], atol=1e-6)
    ok = ok_dir and ok_sum and ok_clip
    criterion(4, "loss formula oracles", ok,
              f"directional {', '.join(f'{dl[k] + 0.0:.6f}' for k in dl)}, two-ROI {got:.9f} vs hand {hand:.9f}, "
              f"clip {', '.join(f'{s + 0.0:.6f}' for s in scores)}")
    assert ok


def test_c5_vectorization_reconstruction(criterion):
    details, ok = [], True
    for name, img in synthetic.suite().items():
        doc = vectorize(img)
        p = synthetic.psnr(render(doc), img)
        h, w = img.shape[:2]
        bg = doc.rounds[0].elements[0]
        cov = element_coverage(flatten_path(bg.path, 16), RenderSettings().bandwidth, w, h)
        covered = (cov.window == (0, h, 0, w) and bool(np.all(cov.cov == 1.0)) and bg.fill[3] == 1.0
                   and np.array_equal(render(doc, RenderSettings(background=(0, 0, 0))), render(doc)))
        ok &= p >= 25 and covered
        details.append(f"{name} {p:.1f}dB{'' if covered else ' UNCOVERED'}")
    criterion(5, "vectorization reconstruction", ok, ", ".join(details))
    assert ok


def hue_shift(img, amount):
    hsv = rgb_to_hsv(np.clip(img, 0, 1))
    hsv[..., 0] = (hsv[..., 0] + amount) % 1.0
    return hsv_to_rgb(hsv)


def toy_run():
    img = synthetic.three_region_fixture()
    doc = vectorize(img)
    be = LinearMockEmbedder(seed=0)
    be.register_text("hue shifted", be.embed_image(hue_shift(img, 0.33)))
    be.register_text("photo", be.embed_image(img))
    g = GuidanceConfig([RoiPrompt(Rect(0, 0, 64, 64), "hue shifted", patch_count=8)])
    return optimize(doc, img, OptimizeConfig(g, iterations=150, seed=0), be)


def test_c6_toy_manipulation(criterion):
    start = time.perf_counter()
    a = toy_run()
    elapsed = time.perf_counter() - start
    b = toy_run()
    first, last = np.mean(a.history[:5]), np.mean(a.history[-5:])
    same = a.history == b.history and io.serialize_svg(a.final) == io.serialize_svg(b.final)
    ok = len(a.history) == 150 and last <= 0.5 * first and same and elapsed < 300
    criterion(6, "end-to-end toy manipulation", ok,
              f"smoothed loss {first:.3f} -> {last:.3f} (ratio {last / first:.3f}), reproducible {same}, {elapsed:.1f}s")
    assert ok


def test_c7_isolation(criterion):
    img = synthetic.three_region_fixture()
    doc = vectorize(img)
    be = LinearMockEmbedder(seed=0)
    g = GuidanceConfig([RoiPrompt(Rect(0, 0, 64, 64), "warmer", patch_count=2)])

    def run(**kw):
        return optimize(doc, img, OptimizeConfig(g, iterations=10, **kw), be).final

    pairs = list(zip(doc.elements(), run(mode="color_only").elements()))
    color_only = all(np.array_equal(a.path.points, b.path.points) for a, b in pairs)
    color_moved = any(not np.array_equal(a.fill, b.fill) for a, b in pairs)
    pairs = list(zip(doc.elements(), run(mode="shape_only").elements()))
    shape_only = all(np.array_equal(a.fill, b.fill) for a, b in pairs)
    shape_moved = any(not np.array_equal(a.path.points, b.path.points) for a, b in pairs)
    mask = select_intersecting(doc, Rect(0, 44, 20, 20))
    pairs = list(zip(doc.elements(), run(mask=mask).elements()))
    masked = all(np.array_equal(a.path.points, b.path.points) and np.array_equal(a.fill, b.fill)
                 for a, b in pairs if a.id not in mask)
    mask_moved = any(a.id in mask and not np.array_equal(a.fill, b.fill) for a, b in pairs)
    partial = 0 < len(mask) < len(doc.elements())
    ok = color_only and shape_only and masked and color_moved and shape_moved and mask_moved and partial
    criterion(7, "decoupled-control isolation", ok,
              f"color_only points fixed {color_only}, shape_only fills fixed {shape_only}, "
              f"{len(doc.elements()) - len(mask)} masked-out elements fixed {masked}")
    assert ok


def test_c8_round_z_order(criterion):
    rng = np.random.default_rng(3)
    ok, fully = True, 0
    for k in range(5):
        under = blob(rng, (32, 32), 20, 6, 0, fill=[1.0, 0.0, 0.0, 1.0], curved=True)
        top = np.append(rng.uniform(size=3), 1.0)
        doc = VectorDocument([Round([under], 10), Round([PathElement(under.path, top, 1)], 30)], 64, 64)
        cov = element_coverage(flatten_path(under.path, 16), RenderSettings().bandwidth, 64, 64)
        r0, r1, c0, c1 = cov.window
        inside = np.zeros((64, 64), dtype=bool)
        inside[r0:r1, c0:c1] = cov.cov == 1.0
        out = render(doc)
        fully += int(inside.sum())
        ok &= inside.sum() > 100 and bool(np.all(out[inside] == top[:3]))
    criterion(8, "multi-round z-order", ok, f"{fully} fully covered pixels checked for exact equality")
    assert ok


def test_c9_round_trips(criterion, tmp_path):
    rng = np.random.default_rng(99)
    worst_pt, worst_rgb, worst_a, fixed_point, n = 0.0, 0.0, 0.0, True, 1000
    for _ in range(n):
        doc = random_svg_doc(rng)
        text = io.serialize_svg(doc)
        back = io.parse_svg(text)
        fixed_point &= io.serialize_svg(back) == text and [e.id for e in back.elements()] == doc.ids()
        fixed_point &= [len(r.elements) for r in back.rounds] == [len(r.elements) for r in doc.rounds]
        for a, b in zip(doc.elements(), back.elements()):
            worst_pt = max(worst_pt, float(np.max(np.abs(a.path.points - b.path.points))))
            worst_rgb = max(worst_rgb, float(np.max(np.abs(a.fill[:3] - b.fill[:3]))))
            worst_a = max(worst_a, abs(float(a.fill[3] - b.fill[3])))
    svg_ok = fixed_point and worst_pt <= 1e-6 and worst_rgb <= 1 / 255 and worst_a <= 1e-6

    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text('input = "image.png"\n[[guidance.rois]]\nprompt = "a sunny day"\n')
    cfg = io.load_config(cfg_path)
    roi, o = cfg.guidance.rois[0], cfg.optimizer
    got = ([r.n_colors for r in cfg.vectorize.rounds], roi.roi_weight, roi.patch_count, roi.patch_weight_total,
           roi.patch_fraction, cfg.guidance.reference_text, o.iterations, o.lr_shape, o.lr_color)
    expected = ([10, 30], 30.0, 64, 80.0, 0.8, "photo", 150, 0.2, 0.01)
    cfg_ok = got == expected and all(r.region is None for r in cfg.vectorize.rounds) and roi.rect is None
    ok = svg_ok and cfg_ok
    criterion(9, "SVG and config round-trips", ok,
              f"{n} documents, max point error {worst_pt:.1e}, rgb {worst_rgb:.2e}, alpha {worst_a:.1e}; "
              f"config defaults {'match' if cfg_ok else got}")
    assert ok


@pytest.mark.slow
def test_c10_external_backend_demo(criterion, tmp_path):
    pytest.importorskip("torch")
    from _models import write_torchscript_pair
    from vexel.cli import main

    text, image = write_torchscript_pair(tmp_path, size=32, dim=16)
    yy, xx = np.mgrid[0:512, 0:512]
    img = np.ones((512, 512, 3)) * [0.9, 0.85, 0.7]
    img[yy > 330] = [0.2, 0.5, 0.3]
    img[(xx - 250) ** 2 + (yy - 200) ** 2 < 100**2] = [0.8, 0.2, 0.1]
    io.write_png(img, tmp_path / "in.png")
    (tmp_path / "run.toml").write_text(
        '[[guidance.rois]]\nprompt = "a blue sun"\n'
        f'[backend]\nkind = "external"\ntext_model = "{text}"\nimage_model = "{image}"\n')
    start = time.perf_counter()
    code = main(["edit", "--input", str(tmp_path / "in.png"), "--config", str(tmp_path / "run.toml"),
                 "--output", str(tmp_path / "out.svg"), "--frames", str(tmp_path / "frames")])
    elapsed = time.perf_counter() - start
    frames = sorted(p.name for p in (tmp_path / "frames").iterdir()) if code == 0 else []
    ok = code == 0 and frames[-1] == "frame_0150.png" and len(frames) == 16
    criterion(10, "external backend integration demo (non-gating)", ok,
              f"512x512, TorchScript backend, 150 iterations, {len(frames)} frames, {elapsed:.0f}s")
    assert ok
