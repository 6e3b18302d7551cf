"""``vexel`` command line: vectorize, edit, render, score.

Exit codes: 0 success, 2 bad input or configuration, 3 backend failure,
1 anything else (for example a diverging optimization).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import io
from .backends import BackendError, build_backend
from .guidance import GuidanceConfig, RoiPrompt, clip_score, crop
from .optimizer import OptimizationError, OptimizeConfig, optimize
from .rasterizer import RenderSettings, default_threads, render
from .synthetic import psnr
from .vectorizer import RoundSpec, VectorizeConfig, vectorize
from .vgcore import Rect, select_intersecting, transform

EXIT_INPUT = 2
EXIT_BACKEND = 3


class UsageError(ValueError):
    pass


def _config(path) -> io.RunConfig:
    return io.load_config(path) if path else io.RunConfig()


def _input_path(args, cfg) -> Path:
    p = args.input or cfg.input
    if not p:
        raise UsageError("no input image: pass --input or set 'input' in the config")
    p = Path(p)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


def _output_path(flag, configured, what) -> Path:
    p = flag or configured
    if not p:
        raise UsageError(f"no {what} output path: pass --output or set it in the config [output] table")
    return Path(p)


def _settings(cfg: io.RunConfig, threads: int | None) -> RenderSettings:
    r = cfg.render
    return RenderSettings(r.bandwidth, r.segments_per_cubic, tuple(r.background),
                          threads if threads is not None else default_threads())


def _vectorize_config(cfg: io.RunConfig, seed: int | None) -> VectorizeConfig:
    rounds = tuple(RoundSpec(r.n_colors, None if r.region is None else Rect(*r.region)) for r in cfg.vectorize.rounds)
    return VectorizeConfig(rounds, cfg.vectorize.seed if seed is None else seed)


def _guidance(cfg: io.RunConfig, width: int, height: int) -> GuidanceConfig:
    if not cfg.guidance.rois:
        raise UsageError("edit needs at least one [[guidance.rois]] entry with a prompt")
    rois = [
        RoiPrompt(Rect(*(r.rect or (0, 0, width, height))), r.prompt, r.roi_weight, r.patch_count,
                  r.patch_weight_total, r.patch_fraction, r.perspective_strength)
        for r in cfg.guidance.rois
    ]
    g = cfg.guidance
    return GuidanceConfig(rois, g.reference_text, g.content_weight, g.augment_source)


def _mkdir_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def cmd_vectorize(args) -> int:
    cfg = _config(args.config)
    src = _input_path(args, cfg)
    out = _output_path(args.output, cfg.output.svg, "SVG")
    image = io.read_png(src)
    doc = vectorize(image, _vectorize_config(cfg, args.seed))
    _mkdir_parent(out)
    io.write_svg(doc, out)
    for i, rnd in enumerate(doc.rounds):
        print(f"round {i}: {len(rnd.elements)} elements (n_colors={rnd.precision})")
    print(f"PSNR: {psnr(render(doc, _settings(cfg, args.threads)), image):.2f} dB")
    print(f"wrote {out}")
    return 0


def cmd_edit(args) -> int:
    cfg = io.load_config(args.config)
    src = _input_path(args, cfg)
    out = _output_path(args.output, cfg.output.svg, "SVG")
    frames = args.frames or cfg.output.frames
    render_out = args.render or cfg.output.png
    report_dir = args.report or cfg.output.report
    image = io.read_png(src)
    h, w = image.shape[:2]
    guidance = _guidance(cfg, w, h)
    backend = build_backend(cfg.backend)  # fail before any optimization work
    settings = _settings(cfg, args.threads)

    if args.svg:
        doc = io.read_svg(args.svg)
        if (doc.width, doc.height) != (w, h):
            raise UsageError(f"{args.svg} is {doc.width}x{doc.height} but {src} is {w}x{h}")
    else:
        doc = vectorize(image, _vectorize_config(cfg, None))

    o = cfg.optimizer
    mask = None if o.subregion is None else select_intersecting(doc, Rect(*o.subregion))
    seed = o.seed if args.seed is None else args.seed
    run_cfg = OptimizeConfig(guidance, o.iterations, o.lr_shape, o.lr_color, o.mode, mask, seed,
                             o.snapshot_every, settings)

    callback = None
    if frames:
        frame_dir = Path(frames)
        frame_dir.mkdir(parents=True, exist_ok=True)
        io.write_png(render(doc, settings), frame_dir / "frame_0000.png")

        def callback(step, loss, snapshot):
            if snapshot is not None:
                io.write_png(snapshot, frame_dir / f"frame_{step:04d}.png")

    run = optimize(doc, image, run_cfg, backend, callback)
    _mkdir_parent(out)
    io.write_svg(run.final, out)
    final = render(run.final, settings)
    if render_out:
        _mkdir_parent(Path(render_out))
        io.write_png(final, render_out)
    if report_dir:
        from .report import write_report

        write_report(run, report_dir, settings)

    hist = run.history
    if hist:
        print(f"iterations: {len(hist)}  loss first {hist[0]:.6f}  min {min(hist):.6f}  last {hist[-1]:.6f}")
    else:
        print("iterations: 0")
    for i, roi in enumerate(guidance.rois):
        score = _fmt(clip_score(backend, crop(final, roi.area), roi.prompt))
        print(f"roi {i} clip_score {score} prompt {roi.prompt!r}")
    print(f"wrote {out}")
    return 0


def cmd_render(args) -> int:
    if args.width < 1 or args.height < 1:
        raise UsageError("--width and --height must be >= 1")
    doc = io.read_svg(args.input)
    doc = transform(doc, args.width / doc.width, args.height / doc.height, args.width, args.height)
    out = Path(args.output)
    _mkdir_parent(out)
    io.write_png(render(doc, _settings(io.RunConfig(), args.threads)), out)
    return 0


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def cmd_score(args) -> int:
    cfg = _config(args.config)
    section = cfg.backend
    overrides = {k: v for k, v in (("kind", args.backend), ("seed", args.backend_seed),
                                   ("text_model", args.text_model), ("image_model", args.image_model))
                 if v is not None}
    section = replace(section, **overrides)
    if section.kind == "external" and not (section.text_model and section.image_model):
        raise UsageError("external backend needs --text-model and --image-model (or a [backend] table)")
    image = io.read_png(_input_path(args, cfg))
    backend = build_backend(section)
    print(_fmt(clip_score(backend, image, args.prompt)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vexel", description="Vectorize images and edit them with text prompts.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--input", help="input PNG")
        sp.add_argument("--config", required=config_required, help="TOML run config")
        sp.add_argument("--output", help="output SVG")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, help="render worker cap (default: VEXEL_THREADS or 1)")

    v = sub.add_parser("vectorize", help="raster to multi-round SVG")
    common(v)
    v.set_defaults(func=cmd_vectorize)

    e = sub.add_parser("edit", help="vectorize (or load --svg) and optimize towards the ROI prompts")
    common(e, config_required=True)
    e.add_argument("--svg", help="resume from this SVG instead of vectorizing")
    e.add_argument("--frames", help="directory for snapshot PNGs")
    e.add_argument("--render", help="also write the final raster to this PNG")
    e.add_argument("--report", help="directory for history.csv and loss/snapshot figures")
    e.set_defaults(func=cmd_edit)

    r = sub.add_parser("render", help="rasterize an SVG at any size")
    r.add_argument("--input", required=True, help="input SVG")
    r.add_argument("--width", type=int, required=True)
    r.add_argument("--height", type=int, required=True)
    r.add_argument("--output", required=True, help="output PNG")
    r.add_argument("--threads", type=int)
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("score", help="cosine similarity between an image and a prompt")
    s.add_argument("--input", help="input PNG")
    s.add_argument("--prompt", required=True)
    s.add_argument("--config", help="TOML file whose [backend] table selects the backend")
    s.add_argument("--backend", choices=("mock", "external"))
    s.add_argument("--backend-seed", type=int)
    s.add_argument("--text-model")
    s.add_argument("--image-model")
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"vexel: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (OSError, ValueError) as exc:
        print(f"vexel: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OptimizationError as exc:
        print(f"vexel: optimization failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
