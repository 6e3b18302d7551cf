"""Adam over decoupled shape/colour parameter groups."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .guidance import EmbedderBackend, GuidanceConfig, total_loss
from .rasterizer import RenderSettings, backward, render, render_with_tape
from .vgcore import BOTH, COLOR, SHAPE, ParamVector, VectorDocument, apply_params, flatten_params

log = logging.getLogger(__name__)

MODES = ("both", "shape_only", "color_only")


class OptimizationError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, params, grads, lr: float, iteration: int | None = None):
    """One bias-corrected Adam update. Returns ``(new_state, new_params)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        where = "" if iteration is None else f" at iteration {iteration}"
        raise OptimizationError(f"non-finite gradient{where}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.beta1, state.beta2, state.eps), new


@dataclass(frozen=True)
class OptimizeConfig:
    guidance: GuidanceConfig
    iterations: int = 150
    lr_shape: float = 0.2
    lr_color: float = 0.01
    mode: str = "both"
    mask: frozenset | None = None
    seed: int = 0
    snapshot_every: int = 10
    render: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr_shape < 0 or self.lr_color < 0:
            raise ValueError("learning rates must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class RunReport:
    history: list
    terms: list
    snapshots: dict
    final: VectorDocument


def split_gradients(full_grads, layout, mode: str = "both", mask=None):
    """Partition a full-layout gradient into (shape, colour) vectors.

    Entries of masked-out elements and of a frozen group are dropped. Returns
    the two gradient vectors together with the matching layout indices.
    """
    g = np.asarray(full_grads, dtype=np.float64)
    shape_idx, color_idx = [], []
    for i, (eid, fld, _) in enumerate(layout):
        if mask is not None and eid not in mask:
            continue
        if fld == "pt" and mode != "color_only":
            shape_idx.append(i)
        elif fld == "rgba" and mode != "shape_only":
            color_idx.append(i)
    shape_idx = np.array(shape_idx, dtype=np.intp)
    color_idx = np.array(color_idx, dtype=np.intp)
    return g[shape_idx], g[color_idx], shape_idx, color_idx


def optimize(
    doc: VectorDocument,
    initial_raster,
    config: OptimizeConfig,
    backend: EmbedderBackend,
    progress_callback: Callable | None = None,
) -> RunReport:
    initial = np.asarray(initial_raster, dtype=np.float64)
    if initial.shape != (doc.height, doc.width, 3):
        raise ValueError(f"document renders at {doc.height}x{doc.width} but the initial raster is {initial.shape[:2]}")
    rng = np.random.default_rng(config.seed)
    mask = frozenset(doc.ids()) if config.mask is None else frozenset(config.mask)
    group = {"both": BOTH, "shape_only": SHAPE, "color_only": COLOR}[config.mode]
    current = doc
    params = flatten_params(current, group, mask)
    _, _, s_idx, c_idx = split_gradients(np.zeros(len(params)), params.layout, config.mode)
    shape_state = AdamState.zeros(len(s_idx))
    color_state = AdamState.zeros(len(c_idx))
    history, terms, snapshots = [], [], {0: doc}

    for it in range(config.iterations):
        img, tape = render_with_tape(current, config.render)
        res = total_loss(backend, config.guidance, img, initial, rng)
        if not np.isfinite(res.loss):
            raise OptimizationError(f"non-finite loss {res.loss} at iteration {it} (terms: {res.terms})")
        history.append(res.loss)
        terms.append(dict(res.terms))
        grads = backward(tape, res.grad).vector(params)
        values = params.values.copy()
        if len(s_idx):
            shape_state, values[s_idx] = adam_step(shape_state, values[s_idx], grads[s_idx], config.lr_shape, it)
        if len(c_idx):
            color_state, values[c_idx] = adam_step(color_state, values[c_idx], grads[c_idx], config.lr_color, it)
        current = apply_params(current, params.with_values(values))
        params = flatten_params(current, group, mask)
        step = it + 1
        snap_due = bool(config.snapshot_every) and step % config.snapshot_every == 0
        if snap_due:
            snapshots[step] = current
        if progress_callback is not None:
            progress_callback(step, res.loss, render(current, config.render) if snap_due else None)
        log.debug("iteration %d loss %.6f", step, res.loss)
    return RunReport(history, terms, snapshots, current)
