"""Multi-round raster-to-vector conversion.

Each round quantizes the colours of (a region of) the image with seeded
k-means, traces the outer boundary of every connected component per palette
colour with marching squares, simplifies it with Douglas-Peucker and fits
closed cubic Bezier paths. Rounds are stacked back to front.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import measure

from .vgcore import CubicPath, PathElement, Rect, Round, VectorDocument, rect_path

log = logging.getLogger(__name__)

LUMA = np.array([0.2126, 0.7152, 0.0722])
KMEANS_ITERS = 20
KMEANS_TOL = 1e-4
CORNER_ANGLE = np.deg2rad(70.0)
FIT_SPACING = 1.0


@dataclass(frozen=True)
class RoundSpec:
    n_colors: int
    region: Rect | None = None
    simplify_tolerance: float = 0.5
    fit_tolerance: float = 0.5
    min_area: float = 16.0

    def __post_init__(self):
        if self.n_colors < 1:
            raise ValueError("n_colors must be >= 1")
        if self.simplify_tolerance <= 0 or self.fit_tolerance <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class VectorizeConfig:
    rounds: tuple = field(default_factory=lambda: (RoundSpec(10), RoundSpec(30)))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(self.rounds))
        if not self.rounds:
            raise ValueError("at least one round is required")
        if self.rounds[0].region is not None:
            raise ValueError("the first round must cover the full canvas")


class DegeneratePolygonWarning(UserWarning):
    pass


# -- colour quantization ----------------------------------------------------


def _sort_palette(palette: np.ndarray) -> np.ndarray:
    luma = palette @ LUMA
    order = np.lexsort((palette[:, 2], palette[:, 1], palette[:, 0], luma))
    return palette[order]


def _kmeanspp(points, weights, k, rng):
    n = len(points)
    p = weights / weights.sum()
    centers = [points[rng.choice(n, p=p)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        score = d2 * weights
        total = score.sum()
        if total <= 0:
            break
        centers.append(points[rng.choice(n, p=score / total)])
        d2 = np.minimum(d2, np.sum((points - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def _nearest(points, centers):
    d = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.argmin(d, axis=1)


def quantize_colors(image, n_colors: int, seed: int = 0):
    """k-means colour quantization.

    Returns ``(palette, labels)`` where palette is (P, 3) sorted by luminance
    and labels is an (H, W) index map. P is smaller than ``n_colors`` when
    the image has fewer distinct colours.
    """
    if n_colors < 1:
        raise ValueError("n_colors must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    flat = img.reshape(-1, 3)
    uniq, inverse, counts = np.unique(flat, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if len(uniq) <= n_colors:
        palette = _sort_palette(uniq)
    else:
        weights = counts.astype(np.float64)
        rng = np.random.default_rng(seed)
        centers = _kmeanspp(uniq, weights, n_colors, rng)
        for _ in range(KMEANS_ITERS):
            assign = _nearest(uniq, centers)
            sums = np.zeros_like(centers)
            np.add.at(sums, assign, uniq * weights[:, None])
            mass = np.bincount(assign, weights=weights, minlength=len(centers))
            new = np.where(mass[:, None] > 0, sums / np.maximum(mass, 1e-300)[:, None], centers)
            shift = np.max(np.linalg.norm(new - centers, axis=1))
            centers = new
            if shift < KMEANS_TOL:
                break
        # empty clusters are dropped
        used = np.unique(_nearest(uniq, centers))
        palette = _sort_palette(centers[used])
    labels = _nearest(uniq, palette)[inverse].reshape(img.shape[:2])
    return palette, labels


# -- contour tracing --------------------------------------------------------


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def extract_contours(labels, color_index: int, origin=(0.0, 0.0), with_area: bool = False):
    """Closed outer boundaries of each 4-connected component of ``color_index``.

    Vertices are canvas coordinates (pixel (r, c) spans [c, c+1] x [r, r+1]
    shifted by ``origin``), clipped to the label map's extent, and oriented
    with positive shoelace area. Holes are filled: they belong to other
    components which are painted on top.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    comp, n = ndimage.label(labels == color_index)
    out = []
    eight = np.ones((3, 3), dtype=bool)
    for i, sl in enumerate(ndimage.find_objects(comp), start=1):
        if sl is None:
            continue
        local = comp[sl] == i
        area = int(local.sum())
        filled = ndimage.binary_fill_holes(local, structure=eight)
        # pad by one so the component edge is visible to marching squares
        r0, c0 = sl[0].start, sl[1].start
        block = np.zeros((filled.shape[0] + 2, filled.shape[1] + 2), dtype=bool)
        block[1:-1, 1:-1] = filled
        # edge replication must only apply at the true canvas border
        top, left = r0 == 0, c0 == 0
        bottom, right = sl[0].stop == h, sl[1].stop == w
        poly = _trace_block(block, top, bottom, left, right)
        if poly is None:
            continue
        # block-local pixel centre (j, i) -> canvas corner coordinates
        poly = poly + np.array([c0 - 1 + 0.5, r0 - 1 + 0.5])
        poly[:, 0] = np.clip(poly[:, 0], 0.0, w)
        poly[:, 1] = np.clip(poly[:, 1], 0.0, h)
        if _signed_area(poly) < 0:
            poly = poly[::-1]
        poly = poly + np.asarray(origin, dtype=np.float64)
        out.append((poly, int(filled.sum()), area) if with_area else poly)
    return out


def _trace_block(block, top, bottom, left, right):
    """Trace the largest outline of a padded boolean block.

    Sides that lie on the canvas border are extended outward first, so the
    traced outline reaches (and is later clipped to) the border instead of
    cutting the corners.
    """
    b = block
    if top:
        b = np.vstack([b[1:2], b[1:]])
    if bottom:
        b = np.vstack([b[:-1], b[-2:-1]])
    if left:
        b = np.hstack([b[:, 1:2], b[:, 1:]])
    if right:
        b = np.hstack([b[:, :-1], b[:, -2:-1]])
    padded = np.pad(b, 1).astype(np.float64)
    contours = measure.find_contours(padded, 0.5, fully_connected="low")
    if not contours:
        return None
    best = max(contours, key=lambda c: abs(_signed_area(c)))
    poly = best[:-1, ::-1] - 1.0
    return poly


# -- simplification ---------------------------------------------------------


def _seg_dist(pts, a, b):
    ab = b - a
    l2 = float(ab @ ab)
    if l2 == 0:
        return np.linalg.norm(pts - a, axis=1)
    t = np.clip(((pts - a) @ ab) / l2, 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)


def _dp_chain(pts, tol, keep, lo, hi):
    stack = [(lo, hi)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = _seg_dist(pts[i + 1:j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > tol:
            k += i + 1
            keep[k] = True
            stack.append((i, k))
            stack.append((k, j))


def simplify_polygon(poly, tolerance: float):
    """Douglas-Peucker on a closed polygon.

    Returns the simplified vertex array, or ``None`` (with a
    :class:`DegeneratePolygonWarning`) when fewer than 3 distinct vertices
    remain. A tolerance of 0 returns the input unchanged.
    """
    pts = np.asarray(poly, dtype=np.float64)
    distinct = np.unique(pts, axis=0)
    if len(distinct) < 3:
        warnings.warn(f"dropping degenerate polygon with {len(distinct)} distinct vertices", DegeneratePolygonWarning)
        return None
    if tolerance <= 0:
        return pts.copy()
    n = len(pts)
    # anchor on an extreme (convex hull) vertex and the vertex farthest from it
    a = int(np.lexsort((pts[:, 1], pts[:, 0]))[0])
    pts = np.roll(pts, -a, axis=0)
    b = int(np.argmax(np.linalg.norm(pts - pts[0], axis=1)))
    ring = np.vstack([pts, pts[:1]])
    keep = np.zeros(n + 1, dtype=bool)
    keep[[0, b, n]] = True
    _dp_chain(ring, tolerance, keep, 0, b)
    _dp_chain(ring, tolerance, keep, b, n)
    out = ring[:-1][keep[:-1]]
    if len(out) < 3:
        # collapse to a sliver: keep the vertex farthest from the chord
        d = _seg_dist(pts, pts[0], pts[b])
        k = int(np.argmax(d))
        if d[k] == 0:
            warnings.warn("dropping collinear polygon", DegeneratePolygonWarning)
            return None
        idx = sorted({0, b, k})
        out = pts[idx]
    return out


# -- cubic fitting ----------------------------------------------------------


def _bez(ctrl, t):
    t = np.asarray(t)[:, None]
    s = 1.0 - t
    return s**3 * ctrl[0] + 3 * s * s * t * ctrl[1] + 3 * s * t * t * ctrl[2] + t**3 * ctrl[3]


def _bez_d1(ctrl, t):
    t = np.asarray(t)[:, None]
    s = 1.0 - t
    return 3 * s * s * (ctrl[1] - ctrl[0]) + 6 * s * t * (ctrl[2] - ctrl[1]) + 3 * t * t * (ctrl[3] - ctrl[2])


def _bez_d2(ctrl, t):
    t = np.asarray(t)[:, None]
    return 6 * (1 - t) * (ctrl[2] - 2 * ctrl[1] + ctrl[0]) + 6 * t * (ctrl[3] - 2 * ctrl[2] + ctrl[1])


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _chord_params(pts):
    d = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    return d / d[-1] if d[-1] > 0 else np.linspace(0, 1, len(pts))


def _generate(pts, u, t1, t2):
    first, last = pts[0], pts[-1]
    s = 1.0 - u
    b0, b1, b2, b3 = s**3, 3 * s * s * u, 3 * s * u * u, u**3
    A1 = b1[:, None] * t1
    A2 = b2[:, None] * t2
    C = np.array([[np.sum(A1 * A1), np.sum(A1 * A2)], [np.sum(A1 * A2), np.sum(A2 * A2)]])
    tmp = pts - ((b0 + b1)[:, None] * first + (b2 + b3)[:, None] * last)
    X = np.array([np.sum(A1 * tmp), np.sum(A2 * tmp)])
    det = C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0]
    seg = np.linalg.norm(last - first)
    eps = 1e-6 * seg
    if abs(det) > 1e-12:
        al = (X[0] * C[1, 1] - X[1] * C[0, 1]) / det
        ar = (C[0, 0] * X[1] - C[1, 0] * X[0]) / det
    else:
        al = ar = 0.0
    if al < eps or ar < eps:
        al = ar = seg / 3.0
    return np.array([first, first + al * t1, last + ar * t2, last])


def _reparam(ctrl, pts, u):
    q = _bez(ctrl, u) - pts
    q1 = _bez_d1(ctrl, u)
    q2 = _bez_d2(ctrl, u)
    num = np.sum(q * q1, axis=1)
    den = np.sum(q1 * q1, axis=1) + np.sum(q * q2, axis=1)
    step = np.where(np.abs(den) > 1e-12, num / np.where(den == 0, 1, den), 0.0)
    return np.clip(u - step, 0.0, 1.0)


def _polish(ctrl, pts, u, t1, t2, rounds=3):
    """A few extra reparameterisation passes; keeps the fit only if it improves."""
    best = ctrl
    best_err = np.max(np.linalg.norm(_bez(ctrl, u) - pts, axis=1))
    for _ in range(rounds):
        u = _reparam(best, pts, u)
        cand = _generate(pts, u, t1, t2)
        err = np.max(np.linalg.norm(_bez(cand, u) - pts, axis=1))
        if not err < best_err:
            break
        best, best_err = cand, err
    return best


def _fit_chain(pts, t1, t2, tol, out):
    """Append control points (without the end point) fitting an open chain."""
    if len(pts) == 2:
        d = np.linalg.norm(pts[1] - pts[0]) / 3.0
        out.append(np.array([pts[0], pts[0] + d * t1, pts[1] + d * t2, pts[1]]))
        return
    u = _chord_params(pts)
    ctrl = _generate(pts, u, t1, t2)
    err = np.linalg.norm(_bez(ctrl, u) - pts, axis=1)
    k = int(np.argmax(err))
    if err[k] <= tol:
        out.append(_polish(ctrl, pts, u, t1, t2))
        return
    if err[k] <= 4 * tol:
        for _ in range(8):
            u = _reparam(ctrl, pts, u)
            ctrl = _generate(pts, u, t1, t2)
            err = np.linalg.norm(_bez(ctrl, u) - pts, axis=1)
            k = int(np.argmax(err))
            if err[k] <= tol:
                out.append(ctrl)
                return
    k = min(max(k, 1), len(pts) - 2)
    tc = _unit(pts[k - 1] - pts[k + 1])
    if not np.any(tc):
        tc = _unit(np.array([-(pts[k] - pts[k - 1])[1], (pts[k] - pts[k - 1])[0]]))
    _fit_chain(pts[: k + 1], t1, tc, tol, out)
    _fit_chain(pts[k:], -tc, t2, tol, out)


def _corners(pts):
    prev = pts - np.roll(pts, 1, axis=0)
    nxt = np.roll(pts, -1, axis=0) - pts
    cross = prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0]
    dot = np.sum(prev * nxt, axis=1)
    turn = np.abs(np.arctan2(cross, dot))
    return np.flatnonzero(turn > CORNER_ANGLE)


def _densify(chain, spacing):
    """Insert evenly spaced points on edges longer than ``spacing``."""
    out = [chain[:1]]
    for a, b in zip(chain[:-1], chain[1:]):
        n = int(np.ceil(np.linalg.norm(b - a) / spacing))
        if n > 1:
            t = np.arange(1, n)[:, None] / n
            out.append(a + t * (b - a))
        out.append(b[None])
    return np.vstack(out)


def sharpen_corners(poly, max_cut: float = 1.5):
    """Undo corner cuts left by marching squares.

    A short edge whose two end turns add up to a corner is replaced by the
    intersection of its neighbouring edges' supporting lines, when that point
    lies within ``max_cut`` of the short edge.
    """
    pts = np.asarray(poly, dtype=np.float64)
    changed = True
    while changed and len(pts) > 3:
        changed = False
        n = len(pts)
        for i in range(n):
            a, b = pts[i], pts[(i + 1) % n]
            if np.linalg.norm(b - a) > max_cut:
                continue
            prev, nxt = pts[i - 1], pts[(i + 2) % n]
            d1, d2 = a - prev, nxt - b
            turn = np.arctan2(d1[0] * d2[1] - d1[1] * d2[0], d1 @ d2)
            if abs(turn) <= CORNER_ANGLE:
                continue
            den = d1[0] * d2[1] - d1[1] * d2[0]
            if abs(den) < 1e-12:
                continue
            diff = b - a
            s = (diff[0] * d2[1] - diff[1] * d2[0]) / den
            corner = a + s * d1
            if np.linalg.norm(corner - 0.5 * (a + b)) > max_cut:
                continue
            keep = [j for j in range(n) if j not in (i, (i + 1) % n)]
            pos = i if (i + 1) % n else 0
            pts = np.insert(pts[keep], min(pos, len(keep)), corner, axis=0)
            changed = True
            break
    return pts


def fit_beziers(poly, fit_tolerance: float = 1.0) -> CubicPath:
    """Least-squares cubic fit of a closed polygon, split at corners and at the
    worst-fitting vertex until every vertex lies within ``fit_tolerance``."""
    pts = np.asarray(poly, dtype=np.float64)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    pts = pts[keep]
    if len(pts) > 1 and np.all(pts[0] == pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        raise ValueError("cannot fit a path to fewer than 3 distinct vertices")
    n = len(pts)
    corners = _corners(pts)
    segs = []
    if len(corners) == 0:
        ring = np.vstack([pts, pts[:1]])
        t = _unit(pts[1] - pts[-1])
        _fit_chain(_densify(ring, FIT_SPACING), t, -t, fit_tolerance, segs)
    else:
        for ci, start in enumerate(corners):
            end = corners[(ci + 1) % len(corners)]
            idx = np.arange(start, start + ((end - start) % n or n) + 1) % n
            chain = pts[idx]
            t1 = _unit(chain[1] - chain[0])
            t2 = _unit(chain[-2] - chain[-1])
            _fit_chain(_densify(chain, FIT_SPACING), t1, t2, fit_tolerance, segs)
    control = [p for c in segs for p in c[:3]]
    return CubicPath(np.array(control))


# -- rounds -----------------------------------------------------------------


def _crop(image, region: Rect | None):
    h, w = image.shape[:2]
    if region is None:
        return image, (0, 0)
    x0 = int(round(region.x))
    y0 = int(round(region.y))
    x1 = int(round(region.x1))
    y1 = int(round(region.y1))
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h or x1 <= x0 or y1 <= y0:
        raise ValueError(f"region {region} is not inside the {w}x{h} canvas")
    return image[y0:y1, x0:x1], (x0, y0)


def _confine(poly, path, tol, box):
    """Keep a region round's control polygon (hence its curve) inside the region.

    Tighter refits shrink the handles first; any remaining overshoot is clipped.
    """
    x0, y0, x1, y1 = box

    def inside(p):
        lo, hi = p.points.min(axis=0), p.points.max(axis=0)
        return lo[0] >= x0 and lo[1] >= y0 and hi[0] <= x1 and hi[1] <= y1

    for _ in range(4):
        if inside(path):
            return path
        tol *= 0.5
        path = fit_beziers(poly, tol)
    pts = path.points.copy()
    pts[:, 0] = np.clip(pts[:, 0], x0, x1)
    pts[:, 1] = np.clip(pts[:, 1], y0, y1)
    return CubicPath(pts)


def vectorize_round(image, spec: RoundSpec, seed: int = 0, first_id: int = 0) -> Round:
    img = np.asarray(image, dtype=np.float64)
    sub, (ox, oy) = _crop(img, spec.region)
    palette, labels = quantize_colors(sub, spec.n_colors, seed)
    h, w = labels.shape
    candidates = []
    for ci, color in enumerate(palette):
        for poly, filled_area, area in extract_contours(labels, ci, origin=(ox, oy), with_area=True):
            if area < spec.min_area:
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegeneratePolygonWarning)
                simple = simplify_polygon(poly, spec.simplify_tolerance)
            if simple is None:
                log.debug("dropped degenerate outline of colour %d", ci)
                continue
            simple = sharpen_corners(simple)
            path = fit_beziers(simple, spec.fit_tolerance)
            if spec.region is not None:
                path = _confine(simple, path, spec.fit_tolerance, (ox, oy, ox + w, oy + h))
            candidates.append((filled_area, ci, path, color))
    # largest first; ties by palette index then tracing order (stable sort)
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i][0], candidates[i][1]))
    elements = []
    for n, i in enumerate(order):
        _, _, path, color = candidates[i]
        elements.append(PathElement(path, np.append(color, 1.0), first_id + n))
    return Round(elements, spec.n_colors, spec.region)


def vectorize(image, config: VectorizeConfig | None = None) -> VectorDocument:
    config = config or VectorizeConfig()
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    rounds = []
    next_id = 0
    for i, spec in enumerate(config.rounds):
        rnd = vectorize_round(img, spec, seed=config.seed + i, first_id=next_id + (1 if i == 0 else 0))
        if i == 0:
            bg = PathElement(rect_path(0.0, 0.0, float(w), float(h)), np.append(img.reshape(-1, 3).mean(axis=0), 1.0), next_id)
            rnd = Round((bg,) + rnd.elements, rnd.precision, rnd.region)
        next_id += len(rnd.elements)
        rounds.append(rnd)
        log.info("round %d: %d elements (N_c=%d)", i + 1, len(rnd.elements), spec.n_colors)
    return VectorDocument(rounds, w, h)
