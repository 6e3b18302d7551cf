"""Differentiable soft rasterizer for filled closed cubic paths.

Each path is flattened at fixed parameters t = j/K per cubic, so polyline
vertices are linear in the control points. Coverage of a pixel centre is a
smoothstep of the signed distance to the polyline (positive inside under the
nonzero rule), divided by the soft-edge bandwidth. Elements are composited
back to front with the straight-alpha "over" operator onto an opaque
background.

The ramp is the C1 smoothstep ``s(u) = 3x^2 - 2x^3`` with ``x = (u + 1) / 2``
clamped to [0, 1]; it gives s(-1) = 0, s(0) = 0.5, s(1) = 1 and zero slope at
both ends. Forward and backward both use it.
"""

from __future__ import annotations

import functools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .vgcore import CubicPath, ParamVector, VectorDocument


@dataclass(frozen=True)
class RenderSettings:
    bandwidth: float = 0.5
    segments_per_cubic: int = 16
    background: tuple = (1.0, 1.0, 1.0)
    threads: int = 1

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.segments_per_cubic < 4:
            raise ValueError("segments_per_cubic must be >= 4")


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("VEXEL_THREADS", "1")))
    except ValueError:
        return 1


def smoothstep(u):
    x = np.clip((np.asarray(u, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def smoothstep_grad(u):
    """Derivative of :func:`smoothstep` with respect to u."""
    x = np.clip((np.asarray(u, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)
    return 3.0 * x * (1.0 - x)


# -- flattening -------------------------------------------------------------


def bernstein_matrix(K: int) -> np.ndarray:
    """(K, 4) cubic Bernstein weights at t = j/K, j = 0..K-1."""
    t = np.arange(K, dtype=np.float64) / K
    s = 1.0 - t
    return np.stack([s**3, 3 * s * s * t, 3 * s * t * t, t**3], axis=1)


@functools.lru_cache(maxsize=256)
def flatten_matrix(m: int, K: int) -> np.ndarray:
    """Dense (k*K, m) map from control points to polyline vertices (read-only, cached)."""
    k = m // 3
    B = bernstein_matrix(K)
    F = np.zeros((k * K, m))
    for s in range(k):
        cols = [3 * s, 3 * s + 1, 3 * s + 2, (3 * s + 3) % m]
        for c in range(4):
            F[s * K:(s + 1) * K, cols[c]] += B[:, c]
    F.setflags(write=False)
    return F


def flatten_path(path: CubicPath, segments_per_cubic: int = 16) -> np.ndarray:
    """Closed polyline with ``segments_per_cubic`` vertices per cubic segment."""
    F = flatten_matrix(len(path.points), segments_per_cubic)
    return F @ path.points


def bezier_point(ctrl, t: float) -> np.ndarray:
    """De Casteljau evaluation of a single cubic at parameter t."""
    p = np.asarray(ctrl, dtype=np.float64)
    while len(p) > 1:
        p = (1 - t) * p[:-1] + t * p[1:]
    return p[0]


# -- geometry kernels -------------------------------------------------------


def _edge_distance(px, py, ax, ay, bx, by):
    """Distance from points to segments, with projection parameter and unit normal."""
    ex = bx - ax
    ey = by - ay
    l2 = ex * ex + ey * ey
    safe = np.where(l2 > 0, l2, 1.0)
    t = np.where(l2 > 0, ((px - ax) * ex + (py - ay) * ey) / safe, 0.0)
    t = np.clip(t, 0.0, 1.0)
    dx = px - (ax + t * ex)
    dy = py - (ay + t * ey)
    d = np.hypot(dx, dy)
    return d, t, dx, dy


def winding_numbers(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Brute-force nonzero winding number of each query point (reference kernel)."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    w = np.zeros(px.shape, dtype=np.int64)
    for (ax, ay), (bx, by) in zip(a, b):
        if ay == by:
            continue
        lo, hi = (ay, by) if ay < by else (by, ay)
        hit = (py >= lo) & (py < hi)
        xi = ax + (py - ay) * (bx - ax) / (by - ay)
        w += np.where(hit & (px < xi), 1 if by > ay else -1, 0)
    return w


def signed_coverage(poly, point, bandwidth: float = 0.5) -> float:
    """Soft coverage of a single point by a closed polyline (brute force)."""
    poly = np.asarray(poly, dtype=np.float64)
    px = np.array([float(point[0])])
    py = np.array([float(point[1])])
    b = np.roll(poly, -1, axis=0)
    d, _, _, _ = _edge_distance(px[:, None], py[:, None], poly[:, 0], poly[:, 1], b[:, 0], b[:, 1])
    dist = d.min()
    inside = winding_numbers(poly, px, py)[0] != 0
    sd = dist if inside else -dist
    return float(smoothstep(sd / bandwidth))


def _window(poly, pad, width, height):
    lo = poly.min(axis=0) - pad
    hi = poly.max(axis=0) + pad
    c0 = max(int(np.ceil(lo[0] - 0.5)), 0)
    c1 = min(int(np.floor(hi[0] - 0.5)) + 1, width)
    r0 = max(int(np.ceil(lo[1] - 0.5)), 0)
    r1 = min(int(np.floor(hi[1] - 0.5)) + 1, height)
    if c1 <= c0 or r1 <= r0:
        return None
    return r0, r1, c0, c1


def _window_winding(poly, r0, r1, c0, c1):
    """Nonzero winding for every pixel centre of a window, via row crossings."""
    h, w = r1 - r0, c1 - c0
    a = poly
    b = np.roll(poly, -1, axis=0)
    ay, by = a[:, 1], b[:, 1]
    moving = ay != by
    a, b, ay, by = a[moving], b[moving], ay[moving], by[moving]
    lo = np.minimum(ay, by)
    hi = np.maximum(ay, by)
    # rows whose centre lies in [lo, hi)
    first = np.maximum(np.ceil(lo - 0.5).astype(np.int64), r0)
    last = np.minimum(np.ceil(hi - 0.5).astype(np.int64), r1)
    counts = np.maximum(last - first, 0)
    delta = np.zeros((h, w + 1), dtype=np.int64)
    total = int(counts.sum())
    if total:
        edge = np.repeat(np.arange(len(a)), counts)
        offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        rows = first[edge] + offs
        cy = rows + 0.5
        ax_, ay_ = a[edge, 0], a[edge, 1]
        bx_, by_ = b[edge, 0], b[edge, 1]
        xi = ax_ + (cy - ay_) * (bx_ - ax_) / (by_ - ay_)
        direction = np.where(by_ > ay_, 1, -1)
        # pixel centres strictly left of the crossing: c + 0.5 < xi
        ncols = np.clip(np.ceil(xi - 0.5 - c0).astype(np.int64), 0, w)
        np.add.at(delta, (rows - r0, np.zeros_like(rows)), direction)
        np.add.at(delta, (rows - r0, ncols), -direction)
    return np.cumsum(delta, axis=1)[:, :w]


def _band_distances(poly, bandwidth, r0, r1, c0, c1):
    """Nearest edge for every window pixel closer than ``bandwidth`` to the outline.

    Each edge only visits the pixels inside its own bounding box grown by the
    bandwidth (a uniform one-pixel grid), so the result equals the brute-force
    minimum wherever that minimum is below the bandwidth.
    """
    w = c1 - c0
    a = poly
    b = np.roll(poly, -1, axis=0)
    lo = np.minimum(a, b) - bandwidth
    hi = np.maximum(a, b) + bandwidth
    ec0 = np.maximum(np.ceil(lo[:, 0] - 0.5).astype(np.int64), c0)
    ec1 = np.minimum(np.floor(hi[:, 0] - 0.5).astype(np.int64) + 1, c1)
    er0 = np.maximum(np.ceil(lo[:, 1] - 0.5).astype(np.int64), r0)
    er1 = np.minimum(np.floor(hi[:, 1] - 0.5).astype(np.int64) + 1, r1)
    nw = np.maximum(ec1 - ec0, 0)
    nh = np.maximum(er1 - er0, 0)
    counts = nw * nh
    total = int(counts.sum())
    if total == 0:
        return None
    edge = np.repeat(np.arange(len(a)), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    ew = nw[edge]
    rows = er0[edge] + offs // ew
    cols = ec0[edge] + offs % ew
    d, t, dx, dy = _edge_distance(cols + 0.5, rows + 0.5, a[edge, 0], a[edge, 1], b[edge, 0], b[edge, 1])
    keep = d < bandwidth
    if not np.any(keep):
        return None
    pix = (rows[keep] - r0) * w + (cols[keep] - c0)
    edge, d, t, dx, dy = edge[keep], d[keep], t[keep], dx[keep], dy[keep]
    # lexsort is stable: equal distances resolve to the lowest edge index
    order = np.lexsort((d, pix))
    pix, edge, d, t, dx, dy = pix[order], edge[order], d[order], t[order], dx[order], dy[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    return pix[first], edge[first], d[first], t[first], dx[first], dy[first]


@dataclass
class ElementCoverage:
    window: tuple | None
    cov: np.ndarray | None = None
    band_pix: np.ndarray | None = None
    band_edge: np.ndarray | None = None
    band_t: np.ndarray | None = None
    band_nx: np.ndarray | None = None
    band_ny: np.ndarray | None = None
    band_slope: np.ndarray | None = None


def element_coverage(poly, bandwidth, width, height) -> ElementCoverage:
    win = _window(poly, bandwidth, width, height)
    if win is None:
        return ElementCoverage(None)
    r0, r1, c0, c1 = win
    inside = _window_winding(poly, r0, r1, c0, c1) != 0
    cov = inside.astype(np.float64)
    out = ElementCoverage(win, cov)
    band = _band_distances(poly, bandwidth, r0, r1, c0, c1)
    if band is None:
        return out
    pix, edge, d, t, dx, dy = band
    flat = cov.reshape(-1)
    sign = np.where(flat[pix] > 0, 1.0, -1.0)
    u = sign * d / bandwidth
    flat[pix] = smoothstep(u)
    safe = np.where(d > 0, d, 1.0)
    nx = np.where(d > 0, dx / safe, 0.0)
    ny = np.where(d > 0, dy / safe, 0.0)
    on_edge = d == 0
    if np.any(on_edge):
        # signed distance is smooth across the boundary: use the inward edge normal
        e = np.roll(poly, -1, axis=0)[edge[on_edge]] - poly[edge[on_edge]]
        length = np.hypot(e[:, 0], e[:, 1])
        orient = np.sign(np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1]))
        scale = np.where(length > 0, orient * sign[on_edge] / np.where(length > 0, length, 1.0), 0.0)
        nx[on_edge] = -e[:, 1] * scale
        ny[on_edge] = e[:, 0] * scale
    out.band_pix = pix
    out.band_edge = edge
    out.band_t = t
    out.band_nx = nx
    out.band_ny = ny
    # d(coverage)/d(distance), sign folded in
    out.band_slope = sign * smoothstep_grad(u) / bandwidth
    return out


# -- forward / backward -----------------------------------------------------


@dataclass
class _TapeEntry:
    eid: int
    n_points: int
    color: np.ndarray
    alpha: float
    coverage: ElementCoverage
    below: np.ndarray | None  # composite under this element, window-sized


@dataclass
class RenderTape:
    width: int
    height: int
    settings: RenderSettings
    entries: list = field(default_factory=list)

    @property
    def shape(self):
        return (self.height, self.width, 3)


@dataclass
class DocGradient:
    """Per-element gradients: control points (m, 2) and fill (4,)."""

    points: dict
    fill: dict

    def vector(self, p: ParamVector) -> np.ndarray:
        """Gather the gradient entries matching a parameter layout."""
        out = np.empty(len(p.layout))
        flat_pts = {k: v.reshape(-1) for k, v in self.points.items()}
        for i, (eid, fld, idx) in enumerate(p.layout):
            out[i] = flat_pts[eid][idx] if fld == "pt" else self.fill[eid][idx]
        return out


def _coverages(polys, settings, width, height):
    threads = settings.threads
    work = lambda poly: element_coverage(poly, settings.bandwidth, width, height)  # noqa: E731
    if threads > 1 and len(polys) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(work, polys))
    return [work(p) for p in polys]


def _render(doc: VectorDocument, settings: RenderSettings, keep_tape: bool):
    W, H = int(doc.width), int(doc.height)
    if W <= 0 or H <= 0:
        raise ValueError("cannot render a zero-area canvas")
    K = settings.segments_per_cubic
    elements = doc.elements()
    polys = [flatten_path(el.path, K) for el in elements]
    covs = _coverages(polys, settings, W, H)
    img = np.empty((H, W, 3))
    img[:] = np.asarray(settings.background, dtype=np.float64)
    tape = RenderTape(W, H, settings) if keep_tape else None
    for el, cov in zip(elements, covs):
        below = None
        if cov.window is not None:
            r0, r1, c0, c1 = cov.window
            alpha = el.fill[3] * cov.cov
            region = img[r0:r1, c0:c1]
            if keep_tape:
                below = region.copy()
            a = alpha[..., None]
            img[r0:r1, c0:c1] = (1.0 - a) * region + a * el.fill[:3]
        if keep_tape:
            tape.entries.append(_TapeEntry(el.id, len(el.path.points), el.fill.copy(), float(el.fill[3]), cov, below))
    np.clip(img, 0.0, 1.0, out=img)
    return img, tape


def render(doc: VectorDocument, settings: RenderSettings | None = None) -> np.ndarray:
    """Rasterize ``doc`` to an (H, W, 3) float array in [0, 1]."""
    return _render(doc, settings or RenderSettings(), keep_tape=False)[0]


def render_with_tape(doc: VectorDocument, settings: RenderSettings | None = None):
    return _render(doc, settings or RenderSettings(), keep_tape=True)


def backward(tape: RenderTape, pixel_grad) -> DocGradient:
    """Reverse-mode gradient of the rendered image w.r.t. every element parameter."""
    g = np.array(pixel_grad, dtype=np.float64)
    if g.shape != tape.shape:
        raise ValueError(f"pixel gradient shape {g.shape} does not match raster {tape.shape}")
    K = tape.settings.segments_per_cubic
    pts_grad = {}
    fill_grad = {}
    for e in reversed(tape.entries):
        gp = np.zeros((e.n_points, 2))
        gf = np.zeros(4)
        pts_grad[e.eid] = gp
        fill_grad[e.eid] = gf
        cov = e.coverage
        if cov.window is None:
            continue
        r0, r1, c0, c1 = cov.window
        gw = g[r0:r1, c0:c1]
        alpha = e.alpha * cov.cov
        # d out / d alpha = color - below
        d_alpha = np.einsum("ijc,ijc->ij", gw, e.color[:3] - e.below)
        gf[:3] = np.einsum("ij,ijc->c", alpha, gw)
        gf[3] = np.sum(d_alpha * cov.cov)
        g[r0:r1, c0:c1] = gw * (1.0 - alpha)[..., None]
        if cov.band_pix is None:
            continue
        d_cov = d_alpha.reshape(-1)[cov.band_pix] * e.alpha * cov.band_slope
        # d(dist)/d(a) = -(1-t) n, d(dist)/d(b) = -t n for the nearest edge (a, b)
        n_vert = (e.n_points // 3) * K
        gv = np.zeros((n_vert, 2))
        ia = cov.band_edge
        ib = (ia + 1) % n_vert
        wa = -d_cov * (1.0 - cov.band_t)
        wb = -d_cov * cov.band_t
        np.add.at(gv[:, 0], ia, wa * cov.band_nx)
        np.add.at(gv[:, 1], ia, wa * cov.band_ny)
        np.add.at(gv[:, 0], ib, wb * cov.band_nx)
        np.add.at(gv[:, 1], ib, wb * cov.band_ny)
        gp += flatten_matrix(e.n_points, K).T @ gv
    return DocGradient(pts_grad, fill_grad)
