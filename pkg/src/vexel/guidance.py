"""Embedding-space losses and the differentiable image plumbing they need.

Every image operation here (crop, bilinear resize, perspective warp) is
linear in the pixels and comes with its exact adjoint, so the gradient of a
loss with respect to the full-canvas raster is assembled by hand.
"""

from __future__ import annotations

import abc
import functools
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .vgcore import Rect

NORM_EPS = 1e-6


class DegenerateDirectionError(ValueError):
    pass


# -- backends ---------------------------------------------------------------


class EmbedderBackend(abc.ABC):
    """Text/image encoder pair plus the vector-Jacobian product of the image side."""

    @abc.abstractmethod
    def input_size(self) -> int: ...

    @abc.abstractmethod
    def dim(self) -> int: ...

    @abc.abstractmethod
    def embed_text(self, text: str) -> np.ndarray: ...

    @abc.abstractmethod
    def embed_image(self, raster) -> np.ndarray:
        """Embedding of an (S, S, 3) raster."""

    @abc.abstractmethod
    def image_vjp(self, raster, upstream) -> np.ndarray:
        """``upstream @ d(embed_image)/d(raster)``, shaped like the raster."""


class LinearMockEmbedder(EmbedderBackend):
    """Deterministic linear stand-in for an image/text encoder.

    Images are resized to S x S, flattened and multiplied by a fixed seeded
    Gaussian matrix (no normalisation, so the VJP is exact). Text maps to a
    unit vector drawn from a generator seeded by a hash of the string, unless
    an explicit vector was registered for it with :meth:`register_text`.
    Registered vectors are returned as given.
    """

    def __init__(self, seed: int = 0, dim: int = 64, size: int = 32):
        self.seed = int(seed)
        self._dim = int(dim)
        self._size = int(size)
        rng = np.random.default_rng(self.seed)
        n = 3 * self._size * self._size
        self.matrix = rng.normal(size=(self._dim, n)) / math.sqrt(n)
        self.matrix.setflags(write=False)
        self._overrides = {}

    def input_size(self) -> int:
        return self._size

    def dim(self) -> int:
        return self._dim

    def register_text(self, text: str, vector) -> None:
        v = np.array(vector, dtype=np.float64)
        if v.shape != (self._dim,):
            raise ValueError(f"override for {text!r} must have dimension {self._dim}")
        v.setflags(write=False)
        self._overrides[text] = v

    def embed_text(self, text: str) -> np.ndarray:
        if text in self._overrides:
            return self._overrides[text].copy()
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.normal(size=self._dim)
        return v / np.linalg.norm(v)

    def embed_image(self, raster) -> np.ndarray:
        x = resize(np.asarray(raster, dtype=np.float64), self._size)
        return self.matrix @ x.reshape(-1)

    def image_vjp(self, raster, upstream) -> np.ndarray:
        raster = np.asarray(raster)
        g = (self.matrix.T @ np.asarray(upstream, dtype=np.float64)).reshape(self._size, self._size, 3)
        return resize_adjoint(g, raster.shape[:2])


# -- linear image operators ---------------------------------------------------


def crop(raster, rect) -> np.ndarray:
    """Copy the pixels of integer ``rect`` (x, y, w, h); outside the raster is zero."""
    x, y, w, h = _irect(rect)
    H, W = raster.shape[:2]
    if x >= W or y >= H or x + w <= 0 or y + h <= 0:
        raise ValueError(f"crop rectangle {(x, y, w, h)} does not intersect the {W}x{H} raster")
    out = np.zeros((h, w) + raster.shape[2:], dtype=np.float64)
    sx0, sy0 = max(x, 0), max(y, 0)
    sx1, sy1 = min(x + w, W), min(y + h, H)
    out[sy0 - y:sy1 - y, sx0 - x:sx1 - x] = raster[sy0:sy1, sx0:sx1]
    return out


def crop_adjoint(grad, rect, shape) -> np.ndarray:
    """Adjoint of :func:`crop`: scatter ``grad`` back into a zero raster of ``shape``."""
    x, y, w, h = _irect(rect)
    H, W = shape[:2]
    out = np.zeros(tuple(shape[:2]) + grad.shape[2:])
    sx0, sy0 = max(x, 0), max(y, 0)
    sx1, sy1 = min(x + w, W), min(y + h, H)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0:sy1, sx0:sx1] = grad[sy0 - y:sy1 - y, sx0 - x:sx1 - x]
    return out


def _irect(rect):
    if isinstance(rect, Rect):
        rect = rect.as_tuple()
    x, y, w, h = (int(round(v)) for v in rect)
    if w <= 0 or h <= 0:
        raise ValueError(f"rectangle must have positive size, got {rect}")
    return x, y, w, h


@functools.lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred linear interpolation weights (cached, read-only)."""
    R = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(R, 1.0)
        R.setflags(write=False)
        return R
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - f)
    np.add.at(R, (rows, i1), f)
    R.setflags(write=False)
    return R


def resize(raster, size) -> np.ndarray:
    """Bilinear resize to ``size`` (int for square, or (h, w))."""
    h_out, w_out = (size, size) if np.isscalar(size) else size
    raster = np.asarray(raster, dtype=np.float64)
    H, W = raster.shape[:2]
    if (H, W) == (h_out, w_out):
        return raster.copy()
    Ry = resize_matrix(H, h_out)
    Rx = resize_matrix(W, w_out)
    return np.tensordot(Rx, np.tensordot(Ry, raster, axes=(1, 0)), axes=(1, 1)).transpose(1, 0, 2)


def resize_adjoint(grad, shape) -> np.ndarray:
    H, W = shape[:2]
    h_out, w_out = grad.shape[:2]
    if (H, W) == (h_out, w_out):
        return np.array(grad, dtype=np.float64)
    Ry = resize_matrix(H, h_out)
    Rx = resize_matrix(W, w_out)
    grad = np.asarray(grad, dtype=np.float64)
    return np.tensordot(Rx, np.tensordot(Ry, grad, axes=(0, 0)), axes=(0, 1)).transpose(1, 0, 2)


resize_to_backend = resize


def homography(src, dst) -> np.ndarray:
    """3x3 projective map taking the 4 points ``src`` to ``dst``."""
    A = []
    b = []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(A, dtype=np.float64), np.array(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def quad_is_valid(quad) -> bool:
    """True for a strictly convex quad with consistent orientation."""
    q = np.asarray(quad, dtype=np.float64)
    crosses = []
    for i in range(4):
        a, b, c = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        crosses.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    crosses = np.array(crosses)
    return bool(np.all(crosses > 1e-9) or np.all(crosses < -1e-9))


def warp_operator(shape, quad) -> sparse.csr_matrix:
    """Sparse matrix sampling an (h, w) image through the homography output->quad.

    Output pixel centres are mapped into the input with the homography sending
    the output corners (0,0), (w,0), (w,h), (0,h) to ``quad``; samples are
    bilinear and taps outside the input read zero.
    """
    h, w = shape[:2]
    return _warp_rows(h, w, quad, np.arange(h), np.arange(w))


def _warp_rows(h, w, quad, ys, xs) -> sparse.csr_matrix:
    """Rows of the (h, w) warp operator for output pixels ``ys x xs`` (row-major)."""
    q = np.asarray(quad, dtype=np.float64)
    if not quad_is_valid(q):
        raise ValueError("perspective quad is degenerate or non-convex")
    Hm = homography([(0, 0), (w, 0), (w, h), (0, h)], q)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    n = yy.size
    pts = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5, np.ones(n)])
    m = Hm @ pts
    sx = m[0] / m[2] - 0.5
    sy = m[1] / m[2] - 0.5
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    out_idx = np.arange(n)
    rows, cols, vals = [], [], []
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        rows.append(out_idx[ok])
        cols.append(yi[ok] * w + xi[ok])
        vals.append(wt[ok])
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, h * w)
    )


def warp_resize_operator(shape, quad, size) -> sparse.csr_matrix:
    """Sparse ``resize(perspective_warp(x, quad), size)`` as one matrix on flattened ``x``.

    Bilinear resizing reads only a few warped rows and columns, so the
    homography is evaluated on that sub-grid alone.
    """
    h, w = shape[:2]
    h_out, w_out = (size, size) if np.isscalar(size) else size
    Ry, Rx = resize_matrix(h, h_out), resize_matrix(w, w_out)
    ys = np.flatnonzero(Ry.any(axis=0))
    xs = np.flatnonzero(Rx.any(axis=0))
    sub = _warp_rows(h, w, quad, ys, xs)
    mix = sparse.kron(sparse.csr_matrix(Ry[:, ys]), sparse.csr_matrix(Rx[:, xs]), format="csr")
    return (mix @ sub).tocsr()


def _corners(h, w):
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def perspective_warp(raster, quad) -> np.ndarray:
    raster = np.asarray(raster, dtype=np.float64)
    h, w = raster.shape[:2]
    if np.array_equal(np.asarray(quad, dtype=np.float64), _corners(h, w)):
        return raster.copy()
    op = warp_operator(raster.shape, quad)
    return (op @ raster.reshape(h * w, -1)).reshape(raster.shape)


def perspective_warp_adjoint(grad, quad) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    h, w = grad.shape[:2]
    if np.array_equal(np.asarray(quad, dtype=np.float64), _corners(h, w)):
        return grad.copy()
    op = warp_operator(grad.shape, quad)
    return (op.T @ grad.reshape(h * w, -1)).reshape(grad.shape)


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class RoiPrompt:
    area: Rect
    prompt: str
    roi_weight: float = 30.0
    patch_count: int = 64
    patch_weight_total: float = 80.0
    patch_fraction: float = 0.8
    perspective_strength: float = 0.3

    def __post_init__(self):
        if self.patch_count < 0:
            raise ValueError("patch_count must be >= 0")
        if self.roi_weight < 0 or self.patch_weight_total < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0 < self.patch_fraction <= 1:
            raise ValueError(f"patch_fraction must be in (0, 1], got {self.patch_fraction}")
        if not 0 <= self.perspective_strength < 1:
            raise ValueError("perspective_strength must be in [0, 1)")


@dataclass(frozen=True)
class GuidanceConfig:
    rois: tuple
    reference_text: str = "photo"
    content_weight: float = 0.0
    # warp the source patch with the same quad as the generated one
    augment_source: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rois", tuple(self.rois))
        if not self.rois:
            raise ValueError("at least one ROI prompt is required")
        if self.content_weight < 0:
            raise ValueError("content_weight must be >= 0")

    def scaled(self, factor: float) -> "GuidanceConfig":
        """Same config with every loss weight multiplied by ``factor``."""
        rois = [
            RoiPrompt(r.area, r.prompt, r.roi_weight * factor, r.patch_count, r.patch_weight_total * factor,
                      r.patch_fraction, r.perspective_strength)
            for r in self.rois
        ]
        return GuidanceConfig(rois, self.reference_text, self.content_weight * factor, self.augment_source)


# -- losses -----------------------------------------------------------------


def _stable_norm(v):
    n = float(np.linalg.norm(v))
    return max(n, NORM_EPS), n > NORM_EPS


def text_direction(backend: EmbedderBackend, t_pr: str, t_ref: str) -> np.ndarray:
    dT = np.asarray(backend.embed_text(t_pr), dtype=np.float64) - np.asarray(backend.embed_text(t_ref), dtype=np.float64)
    if np.linalg.norm(dT) < NORM_EPS:
        raise DegenerateDirectionError(f"degenerate text direction: {t_pr!r} equals {t_ref!r} under the backend")
    return dT


def directional_loss_from_embeddings(dT, e_gen, e_src):
    """Loss and its gradient w.r.t. the generated-image embedding."""
    dI = e_gen - e_src
    nI, unclamped = _stable_norm(dI)
    nT = float(np.linalg.norm(dT))
    dot = float(dI @ dT)
    loss = 1.0 - dot / (nI * nT)
    g = -dT / (nI * nT)
    if unclamped:
        g = g + (dot / (nI * nI * nT)) * (dI / nI)
    return loss, g


def directional_loss(backend: EmbedderBackend, t_pr: str, t_ref: str, I_gen, I_src):
    """``1 - cos(E_I(I_gen) - E_I(I_src), E_T(t_pr) - E_T(t_ref))`` and d/dI_gen."""
    dT = text_direction(backend, t_pr, t_ref)
    e_gen = np.asarray(backend.embed_image(I_gen), dtype=np.float64)
    e_src = np.asarray(backend.embed_image(I_src), dtype=np.float64)
    loss, g_emb = directional_loss_from_embeddings(dT, e_gen, e_src)
    return loss, np.asarray(backend.image_vjp(I_gen, g_emb), dtype=np.float64)


def content_loss_l2(current, initial):
    current = np.asarray(current, dtype=np.float64)
    initial = np.asarray(initial, dtype=np.float64)
    if current.shape != initial.shape:
        raise ValueError(f"content loss needs equal shapes, got {current.shape} and {initial.shape}")
    diff = current - initial
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def clip_score(backend: EmbedderBackend, raster, prompt: str) -> float:
    e_i = np.asarray(backend.embed_image(resize(raster, backend.input_size())), dtype=np.float64)
    e_t = np.asarray(backend.embed_text(prompt), dtype=np.float64)
    ni = max(float(np.linalg.norm(e_i)), NORM_EPS)
    nt = max(float(np.linalg.norm(e_t)), NORM_EPS)
    return float(e_i @ e_t) / (ni * nt)


# -- patches ----------------------------------------------------------------


@dataclass(frozen=True)
class Patch:
    rect: tuple  # (x, y, side, side) in canvas pixels
    quad: np.ndarray  # warp target corners, patch-local, order TL TR BR BL


def patch_side(area: Rect, patch_fraction: float) -> int:
    return int(math.floor(patch_fraction * max(area.w, area.h) + 0.5))


MAX_QUAD_TRIES = 100


def sample_patches(area: Rect, patch_fraction: float, patch_count: int, perspective_strength: float, rng) -> list:
    """Random square patches of an ROI with jittered perspective quads.

    The top-left corner is drawn uniformly from the positions that keep the
    patch inside the ROI along each axis where it fits; along an axis where
    the patch is longer than the ROI it starts at the ROI edge and overhangs
    (that part is zero-padded by the crop).
    """
    side = patch_side(area, patch_fraction)
    x0, y0 = int(round(area.x)), int(round(area.y))
    span_x = max(int(round(area.w)) - side, 0)
    span_y = max(int(round(area.h)) - side, 0)
    corners = _corners(side, side)
    jitter = perspective_strength * side / 2.0
    out = []
    for _ in range(patch_count):
        px = x0 + int(rng.integers(0, span_x + 1))
        py = y0 + int(rng.integers(0, span_y + 1))
        quad = corners
        if jitter > 0:
            for _ in range(MAX_QUAD_TRIES):
                quad = corners + rng.uniform(-jitter, jitter, size=(4, 2))
                if quad_is_valid(quad):
                    break
            else:
                quad = corners
        out.append(Patch((px, py, side, side), quad))
    return out


# -- total ------------------------------------------------------------------


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    terms: dict = field(default_factory=dict)


def _roi_term(backend, dT, cur_roi, init_roi, S, quad=None, warp_src=False):
    """One directional term on an ROI-relative image pair; returns (loss, grad wrt cur_roi)."""
    h, w = cur_roi.shape[:2]
    if quad is not None and np.array_equal(np.asarray(quad, dtype=np.float64), _corners(h, w)):
        quad = None
    if quad is None:
        gen_s = resize(cur_roi, S)
        src_s = resize(init_roi, S)
    else:
        op = warp_resize_operator(cur_roi.shape, quad, S)
        gen_s = (op @ cur_roi.reshape(h * w, -1)).reshape(S, S, -1)
        src_s = (op @ init_roi.reshape(h * w, -1)).reshape(S, S, -1) if warp_src else resize(init_roi, S)
    e_gen = np.asarray(backend.embed_image(gen_s), dtype=np.float64)
    e_src = np.asarray(backend.embed_image(src_s), dtype=np.float64)
    loss, g_emb = directional_loss_from_embeddings(dT, e_gen, e_src)
    g_s = np.asarray(backend.image_vjp(gen_s, g_emb), dtype=np.float64)
    if quad is None:
        return loss, resize_adjoint(g_s, cur_roi.shape)
    return loss, (op.T @ g_s.reshape(S * S, -1)).reshape(cur_roi.shape)


def total_loss(backend: EmbedderBackend, config: GuidanceConfig, current, initial, rng) -> LossResult:
    """Weighted sum of ROI and patch directional losses plus optional L2 content loss."""
    current = np.asarray(current, dtype=np.float64)
    initial = np.asarray(initial, dtype=np.float64)
    if current.shape != initial.shape:
        raise ValueError(f"current {current.shape} and initial {initial.shape} rasters differ in size")
    S = backend.input_size()
    grad = np.zeros_like(current)
    total = 0.0
    terms = {}
    for i, roi in enumerate(config.rois):
        dT = text_direction(backend, roi.prompt, config.reference_text)
        rect = _irect(roi.area)
        cur_roi = crop(current, rect)
        init_roi = crop(initial, rect)
        g_roi = np.zeros_like(cur_roi)
        loss, g = _roi_term(backend, dT, cur_roi, init_roi, S)
        if roi.roi_weight:
            total += roi.roi_weight * loss
            g_roi += roi.roi_weight * g
        terms[f"roi{i}"] = loss
        if roi.patch_count:
            w = roi.patch_weight_total / roi.patch_count
            patches = sample_patches(roi.area, roi.patch_fraction, roi.patch_count, roi.perspective_strength, rng)
            ptotal = 0.0
            for p in patches:
                rel = (p.rect[0] - rect[0], p.rect[1] - rect[1], p.rect[2], p.rect[3])
                cur_p = crop(cur_roi, rel)
                init_p = crop(init_roi, rel)
                loss, g = _roi_term(backend, dT, cur_p, init_p, S, p.quad, config.augment_source)
                ptotal += loss
                if w:
                    total += w * loss
                    g_roi += crop_adjoint(w * g, rel, cur_roi.shape)
            terms[f"roi{i}_patches"] = ptotal / roi.patch_count
        grad += crop_adjoint(g_roi, rect, current.shape)
    if config.content_weight > 0:
        c, g = content_loss_l2(current, initial)
        total += config.content_weight * c
        grad += config.content_weight * g
        terms["content"] = c
    return LossResult(float(total), grad, terms)
