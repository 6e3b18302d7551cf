"""PNG rasters, the SVG subset for vector documents, and run-config files.

SVG subset::

    <svg xmlns="http://www.w3.org/2000/svg" width="W" height="H" viewBox="0 0 W H">
      <g data-round-index="0" data-round-ncolors="10" [data-round-region="x y w h"]>
        <path data-id="0" d="M x y C x y x y x y ... Z" fill="#rrggbb" fill-opacity="a"/>
      </g>
    </svg>

Only absolute ``M``/``C``/``Z`` path commands are accepted. The last cubic
of a path ends on its first point; a path whose last cubic ends elsewhere is
closed with a straight cubic.
"""

from __future__ import annotations

import math
import re
import struct
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.parsers import expat

import numpy as np
from PIL import Image

from .vgcore import CubicPath, PathElement, Rect, Round, VectorDocument, line_cubic

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SVG_NS = "http://www.w3.org/2000/svg"


class SvgParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


# -- PNG --------------------------------------------------------------------


def _png_bit_depth(path: Path) -> int | None:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        return None
    return head[24]


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG as an (H, W, 3) float array in [0, 1].

    Alpha is composited over white.
    """
    path = Path(path)
    try:
        depth = _png_bit_depth(path)
        if depth is not None and depth > 8:
            raise ImageFormatError(f"{path}: {depth}-bit PNG is not supported (8-bit only)")
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "F"):
                raise ImageFormatError(f"{path}: high bit-depth image mode {mode!r} is not supported")
            rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    except ImageFormatError:
        raise
    except FileNotFoundError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: cannot read image ({exc})") from exc
    rgb, a = rgba[..., :3], rgba[..., 3:]
    return rgb * a + (1.0 - a)


def to_uint8(raster) -> np.ndarray:
    return np.floor(np.clip(np.asarray(raster, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(raster, path) -> None:
    Image.fromarray(to_uint8(raster), mode="RGB").save(Path(path), format="PNG")


# -- SVG --------------------------------------------------------------------


def _num(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _hex(rgb) -> str:
    r, g, b = (int(math.floor(min(max(c, 0.0), 1.0) * 255.0 + 0.5)) for c in rgb)
    return f"#{r:02x}{g:02x}{b:02x}"


def path_data(path: CubicPath) -> str:
    pts = path.points
    m = len(pts)
    parts = [f"M {_num(pts[0, 0])} {_num(pts[0, 1])}"]
    for s in range(m // 3):
        c = [pts[3 * s + 1], pts[3 * s + 2], pts[(3 * s + 3) % m]]
        parts.append("C " + " ".join(f"{_num(p[0])} {_num(p[1])}" for p in c))
    parts.append("Z")
    return " ".join(parts)


def serialize_svg(doc: VectorDocument) -> str:
    w, h = doc.width, doc.height
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="{SVG_NS}" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
    ]
    for i, rnd in enumerate(doc.rounds):
        attrs = f'data-round-index="{i}" data-round-ncolors="{rnd.precision}"'
        if rnd.region is not None:
            attrs += ' data-round-region="' + " ".join(_num(v) for v in rnd.region.as_tuple()) + '"'
        lines.append(f"  <g {attrs}>")
        for el in rnd.elements:
            lines.append(
                f'    <path data-id="{el.id}" d="{path_data(el.path)}" '
                f'fill="{_hex(el.fill[:3])}" fill-opacity="{_num(el.fill[3])}"/>'
            )
        lines.append("  </g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


_TOKEN = re.compile(r"\s*(?:([A-Za-z])|([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?))\s*,?")


def parse_path_data(d: str, where: str = "") -> np.ndarray:
    """Control points (m, 2) of a closed ``M ... C ... Z`` path string."""
    tokens = []
    pos = 0
    while pos < len(d):
        if d[pos:].strip() == "":
            break
        m = _TOKEN.match(d, pos)
        if not m or m.end() == pos:
            raise SvgParseError(f"{where}unexpected character {d[pos]!r} in path data at offset {pos}")
        if m.group(1):
            tokens.append(("cmd", m.group(1), m.start(1)))
        else:
            tokens.append(("num", float(m.group(2)), m.start(2)))
        pos = m.end()
    for kind, val, off in tokens:
        if kind == "cmd" and val not in "MCZ":
            if val in "mczlhvsqta":
                raise SvgParseError(f"{where}relative path command {val!r} at offset {off} is not supported")
            raise SvgParseError(f"{where}unsupported path command {val!r} at offset {off} (only M, C, Z)")
    if not tokens or tokens[0][:2] != ("cmd", "M"):
        off = tokens[0][2] if tokens else 0
        raise SvgParseError(f"{where}path data must start with 'M' (offset {off})")
    i = 1
    nums = []
    while i < len(tokens) and tokens[i][0] == "num":
        nums.append(tokens[i][1])
        i += 1
    if len(nums) != 2:
        raise SvgParseError(f"{where}'M' at offset 0 needs exactly 2 coordinates, got {len(nums)}")
    start = np.array(nums)
    pts = [start]
    closed = False
    while i < len(tokens):
        kind, val, off = tokens[i]
        if kind != "cmd":
            raise SvgParseError(f"{where}unexpected number at offset {off}")
        if val == "Z":
            if i != len(tokens) - 1:
                raise SvgParseError(f"{where}content after 'Z' at offset {tokens[i + 1][2]}")
            closed = True
            break
        if val == "M":
            raise SvgParseError(f"{where}multiple subpaths ('M' at offset {off}) are not supported")
        i += 1
        nums = []
        while i < len(tokens) and tokens[i][0] == "num":
            nums.append(tokens[i][1])
            i += 1
        if not nums or len(nums) % 6:
            raise SvgParseError(f"{where}'C' at offset {off} needs a multiple of 6 coordinates, got {len(nums)}")
        arr = np.array(nums).reshape(-1, 2)
        pts.extend(arr)
    if not closed:
        raise SvgParseError(f"{where}path is not closed: missing 'Z' at offset {len(d)}")
    if len(pts) < 4:
        raise SvgParseError(f"{where}path needs at least one 'C' segment")
    pts = np.array(pts)
    end = pts[-1]
    ctrl = list(pts[:-1])
    if np.max(np.abs(end - start)) > 1e-9:
        ctrl.append(end)
        ctrl.extend(line_cubic(end, start)[1:])
    return np.array(ctrl)


def _parse_hex(value: str, where: str) -> np.ndarray:
    if not re.fullmatch(r"#[0-9a-fA-F]{6}", value or ""):
        raise SvgParseError(f"{where}fill must be '#rrggbb', got {value!r}")
    return np.array([int(value[i:i + 2], 16) for i in (1, 3, 5)], dtype=np.float64) / 255.0


def _parse_float(value: str, what: str, where: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise SvgParseError(f"{where}{what} must be a number, got {value!r}") from None
    if not math.isfinite(v):
        raise SvgParseError(f"{where}{what} must be finite")
    return v


_SVG_ATTRS = {"xmlns", "width", "height", "viewBox", "version"}
_G_ATTRS = {"data-round-index", "data-round-ncolors", "data-round-region"}
_PATH_ATTRS = {"d", "fill", "fill-opacity", "data-id"}


def parse_svg(text: str) -> VectorDocument:
    parser = expat.ParserCreate()
    state = {"width": None, "height": None, "rounds": [], "stack": []}

    def where():
        return f"line {parser.CurrentLineNumber}, column {parser.CurrentColumnNumber + 1}: "

    def start(name, attrs):
        stack = state["stack"]
        parent = stack[-1] if stack else None
        if name == "svg" and parent is None:
            allowed = _SVG_ATTRS
        elif name == "g" and parent == "svg":
            allowed = _G_ATTRS
        elif name == "path" and parent == "g":
            allowed = _PATH_ATTRS
        else:
            raise SvgParseError(f"{where()}unexpected element <{name}> inside <{parent or 'document'}>")
        unknown = sorted(set(attrs) - allowed)
        if unknown:
            raise SvgParseError(f"{where()}unknown attribute {unknown[0]!r} on <{name}>")
        stack.append(name)
        if name == "svg":
            if attrs.get("xmlns", SVG_NS) != SVG_NS:
                raise SvgParseError(f"{where()}unexpected namespace {attrs['xmlns']!r}")
            for key in ("width", "height"):
                if key not in attrs:
                    raise SvgParseError(f"{where()}<svg> is missing {key}")
                v = _parse_float(attrs[key], key, where())
                if v <= 0 or v != int(v):
                    raise SvgParseError(f"{where()}{key} must be a positive integer, got {attrs[key]!r}")
                state[key] = int(v)
        elif name == "g":
            idx = len(state["rounds"])
            if "data-round-index" in attrs and attrs["data-round-index"] != str(idx):
                raise SvgParseError(f"{where()}data-round-index {attrs['data-round-index']!r} out of order (expected {idx})")
            ncol = attrs.get("data-round-ncolors", "0")
            if not ncol.isdigit():
                raise SvgParseError(f"{where()}data-round-ncolors must be a non-negative integer, got {ncol!r}")
            region = None
            if "data-round-region" in attrs:
                vals = attrs["data-round-region"].split()
                if len(vals) != 4:
                    raise SvgParseError(f"{where()}data-round-region needs 4 numbers")
                try:
                    region = Rect(*(_parse_float(v, "region", where()) for v in vals))
                except ValueError as exc:
                    raise SvgParseError(f"{where()}{exc}") from None
            state["rounds"].append({"precision": int(ncol), "region": region, "elements": []})
        else:
            w = where()
            if "d" not in attrs:
                raise SvgParseError(f"{w}<path> is missing d")
            pts = parse_path_data(attrs["d"], w)
            rgb = _parse_hex(attrs.get("fill"), w)
            a = _parse_float(attrs.get("fill-opacity", "1"), "fill-opacity", w)
            if not 0.0 <= a <= 1.0:
                raise SvgParseError(f"{w}fill-opacity must be in [0, 1], got {a}")
            eid = None
            if "data-id" in attrs:
                if not re.fullmatch(r"-?\d+", attrs["data-id"]):
                    raise SvgParseError(f"{w}data-id must be an integer, got {attrs['data-id']!r}")
                eid = int(attrs["data-id"])
            state["rounds"][-1]["elements"].append((pts, np.append(rgb, a), eid))

    def end(name):
        state["stack"].pop()

    def chars(data):
        if data.strip():
            raise SvgParseError(f"{where()}unexpected text content {data.strip()[:20]!r}")

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    parser.CharacterDataHandler = chars
    try:
        parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise SvgParseError(f"malformed XML: {exc}") from None
    if state["width"] is None:
        raise SvgParseError("no <svg> root element")
    explicit = [e for r in state["rounds"] for (_, _, e) in r["elements"] if e is not None]
    if len(set(explicit)) != len(explicit):
        raise SvgParseError("duplicate data-id values")
    next_id = max(explicit, default=-1) + 1
    rounds = []
    for r in state["rounds"]:
        els = []
        for pts, fill, eid in r["elements"]:
            if eid is None:
                eid, next_id = next_id, next_id + 1
            els.append(PathElement(CubicPath(pts), fill, eid))
        rounds.append(Round(els, r["precision"], r["region"]))
    return VectorDocument(rounds, state["width"], state["height"])


def read_svg(path) -> VectorDocument:
    return parse_svg(Path(path).read_text(encoding="utf-8"))


def write_svg(doc: VectorDocument, path) -> None:
    Path(path).write_text(serialize_svg(doc), encoding="utf-8")


# -- run configuration ------------------------------------------------------


@dataclass(frozen=True)
class RoundEntry:
    n_colors: int
    region: tuple | None = None


@dataclass(frozen=True)
class RoiEntry:
    prompt: str
    rect: tuple | None = None  # full canvas when omitted
    roi_weight: float = 30.0
    patch_count: int = 64
    patch_weight_total: float = 80.0
    patch_fraction: float = 0.8
    perspective_strength: float = 0.3


@dataclass(frozen=True)
class OutputSection:
    svg: str | None = None
    png: str | None = None
    frames: str | None = None
    report: str | None = None


@dataclass(frozen=True)
class VectorizeSection:
    rounds: tuple = (RoundEntry(10), RoundEntry(30))
    seed: int = 0


@dataclass(frozen=True)
class GuidanceSection:
    rois: tuple = ()
    reference_text: str = "photo"
    content_weight: float = 0.0
    augment_source: bool = False


@dataclass(frozen=True)
class OptimizerSection:
    iterations: int = 150
    lr_shape: float = 0.2
    lr_color: float = 0.01
    mode: str = "both"
    subregion: tuple | None = None
    seed: int = 0
    snapshot_every: int = 10


@dataclass(frozen=True)
class BackendSection:
    kind: str = "mock"
    seed: int = 0
    dim: int = 64
    input_size: int | None = None
    text_model: str | None = None
    image_model: str | None = None
    text_vectors: dict = field(default_factory=dict)
    text_images: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RenderSection:
    bandwidth: float = 0.5
    segments_per_cubic: int = 16
    background: tuple = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class RunConfig:
    input: str | None = None
    output: OutputSection = OutputSection()
    vectorize: VectorizeSection = VectorizeSection()
    guidance: GuidanceSection = GuidanceSection()
    optimizer: OptimizerSection = OptimizerSection()
    backend: BackendSection = BackendSection()
    render: RenderSection = RenderSection()


def _expect(table, allowed, where):
    if not isinstance(table, dict):
        raise ConfigError(f"{where} must be a table")
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")


def _typed(value, kind, where):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    raise TypeError(kind)


def _rect(value, where):
    if not isinstance(value, list) or len(value) != 4:
        raise ConfigError(f"{where} must be [x, y, width, height]")
    vals = tuple(_typed(v, float, where) for v in value)
    if vals[2] <= 0 or vals[3] <= 0:
        raise ConfigError(f"{where} must have positive width and height")
    return vals


def _section(cls, table, where, special=None):
    special = special or {}
    names = {f.name: f for f in cls.__dataclass_fields__.values()}
    _expect(table, names, where)
    kwargs = {}
    for key, value in table.items():
        path = f"{where}.{key}" if where else key
        if key in special:
            kwargs[key] = special[key](value, path)
            continue
        default = getattr(cls(), key) if key not in ("prompt", "n_colors") else None
        kind = type(default) if default is not None else _FIELD_TYPES.get((cls.__name__, key), str)
        kwargs[key] = _typed(value, kind, path)
    return kwargs


_FIELD_TYPES = {
    ("OutputSection", "svg"): str,
    ("OutputSection", "png"): str,
    ("OutputSection", "frames"): str,
    ("OutputSection", "report"): str,
    ("RunConfig", "input"): str,
    ("BackendSection", "input_size"): int,
    ("BackendSection", "text_model"): str,
    ("BackendSection", "image_model"): str,
}


def _round_entry(value, where):
    _expect(value, {"n_colors", "region"}, where)
    if "n_colors" not in value:
        raise ConfigError(f"{where}.n_colors is required")
    n = _typed(value["n_colors"], int, f"{where}.n_colors")
    if n < 1:
        raise ConfigError(f"{where}.n_colors must be >= 1")
    region = _rect(value["region"], f"{where}.region") if "region" in value else None
    return RoundEntry(n, region)


def _roi_entry(value, where):
    allowed = {f for f in RoiEntry.__dataclass_fields__}
    _expect(value, allowed, where)
    if "prompt" not in value:
        raise ConfigError(f"{where}.prompt is required")
    kw = {"prompt": _typed(value["prompt"], str, f"{where}.prompt")}
    if "rect" in value:
        kw["rect"] = _rect(value["rect"], f"{where}.rect")
    for key in ("roi_weight", "patch_weight_total", "patch_fraction", "perspective_strength"):
        if key in value:
            kw[key] = _typed(value[key], float, f"{where}.{key}")
    if "patch_count" in value:
        kw["patch_count"] = _typed(value["patch_count"], int, f"{where}.patch_count")
    e = RoiEntry(**kw)
    if not 0 < e.patch_fraction <= 1:
        raise ConfigError(f"{where}.patch_fraction must be in (0, 1], got {e.patch_fraction}")
    if e.patch_count < 0:
        raise ConfigError(f"{where}.patch_count must be >= 0")
    if e.roi_weight < 0 or e.patch_weight_total < 0:
        raise ConfigError(f"{where} weights must be >= 0")
    if not 0 <= e.perspective_strength < 1:
        raise ConfigError(f"{where}.perspective_strength must be in [0, 1)")
    return e


def parse_config(data: dict) -> RunConfig:
    """Build a fully defaulted :class:`RunConfig` from a parsed TOML table."""
    _expect(data, RunConfig.__dataclass_fields__, "")
    kw = {}
    if "input" in data:
        kw["input"] = _typed(data["input"], str, "input")
    if "output" in data:
        kw["output"] = OutputSection(**_section(OutputSection, data["output"], "output"))
    if "vectorize" in data:
        def rounds(v, where):
            if not isinstance(v, list) or not v:
                raise ConfigError(f"{where} must be a non-empty array of tables")
            out = tuple(_round_entry(r, f"{where}[{i}]") for i, r in enumerate(v))
            if out[0].region is not None:
                raise ConfigError(f"{where}[0] must cover the full canvas (no region)")
            return out

        kw["vectorize"] = VectorizeSection(**_section(VectorizeSection, data["vectorize"], "vectorize", {"rounds": rounds}))
    if "guidance" in data:
        def rois(v, where):
            if not isinstance(v, list):
                raise ConfigError(f"{where} must be an array of tables")
            return tuple(_roi_entry(r, f"{where}[{i}]") for i, r in enumerate(v))

        g = GuidanceSection(**_section(GuidanceSection, data["guidance"], "guidance", {"rois": rois}))
        if g.content_weight < 0:
            raise ConfigError("guidance.content_weight must be >= 0")
        kw["guidance"] = g
    if "optimizer" in data:
        o = OptimizerSection(**_section(OptimizerSection, data["optimizer"], "optimizer",
                                        {"subregion": lambda v, w: _rect(v, w)}))
        if o.iterations < 0:
            raise ConfigError("optimizer.iterations must be >= 0")
        if o.lr_shape < 0 or o.lr_color < 0:
            raise ConfigError("optimizer learning rates must be >= 0")
        if o.mode not in ("both", "shape_only", "color_only"):
            raise ConfigError(f"optimizer.mode must be both, shape_only or color_only, got {o.mode!r}")
        if o.snapshot_every < 0:
            raise ConfigError("optimizer.snapshot_every must be >= 0")
        kw["optimizer"] = o
    if "backend" in data:
        def vectors(v, where):
            _expect(v, v.keys() if isinstance(v, dict) else (), where)
            out = {}
            for text, vec in v.items():
                if not isinstance(vec, list) or not vec:
                    raise ConfigError(f"{where}.{text} must be a non-empty array of numbers")
                out[text] = tuple(_typed(x, float, f"{where}.{text}") for x in vec)
            return out

        def images(v, where):
            _expect(v, v.keys() if isinstance(v, dict) else (), where)
            return {text: _typed(p, str, f"{where}.{text}") for text, p in v.items()}

        b = BackendSection(**_section(BackendSection, data["backend"], "backend",
                                      {"text_vectors": vectors, "text_images": images}))
        if b.kind not in ("mock", "external"):
            raise ConfigError(f"backend.kind must be 'mock' or 'external', got {b.kind!r}")
        if b.kind == "external" and not (b.text_model and b.image_model):
            raise ConfigError("backend.kind = 'external' needs backend.text_model and backend.image_model")
        kw["backend"] = b
    if "render" in data:
        def background(v, where):
            if not isinstance(v, list) or len(v) != 3:
                raise ConfigError(f"{where} must be [r, g, b]")
            vals = tuple(_typed(x, float, where) for x in v)
            if not all(0 <= x <= 1 for x in vals):
                raise ConfigError(f"{where} channels must be in [0, 1]")
            return vals

        r = RenderSection(**_section(RenderSection, data["render"], "render", {"background": background}))
        if r.bandwidth <= 0 or r.segments_per_cubic < 4:
            raise ConfigError("render.bandwidth must be > 0 and render.segments_per_cubic >= 4")
        kw["render"] = r
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    """Read a TOML run config. Relative paths inside it are resolved against its directory."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = parse_config(data)
    return resolve_paths(cfg, path.parent)


def resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def fix(p):
        return None if p is None else str(base / p) if not Path(p).is_absolute() else p

    out = replace(cfg.output, **{k: fix(getattr(cfg.output, k)) for k in ("svg", "png", "frames", "report")})
    be = replace(
        cfg.backend,
        text_model=fix(cfg.backend.text_model),
        image_model=fix(cfg.backend.image_model),
        text_images={t: fix(p) for t, p in cfg.backend.text_images.items()},
    )
    return replace(cfg, input=fix(cfg.input), output=out, backend=be)
