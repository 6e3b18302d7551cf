"""Concrete embedding backends and construction from a run config.

``mock``
    :class:`~vexel.guidance.LinearMockEmbedder`. Text embeddings can be pinned
    either to literal vectors or to the image embedding of a PNG file.

``external``
    A pair of exported models. Files ending in ``.pt``/``.pth``/``.ts`` are
    loaded as TorchScript modules and their image VJP is exact autograd.
    Files ending in ``.onnx`` run under onnxruntime; ONNX graphs carry no
    reverse pass here, so the image VJP is estimated by simultaneous
    perturbation (see :class:`OnnxEmbedder`).

Model contracts: the text model maps a list of ``n`` strings to an ``(n, D)``
float tensor, the image model maps a ``(1, 3, S, S)`` float tensor in [0, 1]
to ``(1, D)``. ``S`` comes from the config's ``input_size`` or from an
``input_size`` attribute on the TorchScript image module.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from .guidance import EmbedderBackend, LinearMockEmbedder, resize, resize_adjoint


class BackendError(RuntimeError):
    pass


def _fit(raster, size):
    raster = np.asarray(raster, dtype=np.float64)
    return raster if raster.shape[:2] == (size, size) else resize(raster, size)


class TorchScriptEmbedder(EmbedderBackend):
    def __init__(self, text_model, image_model, input_size: int | None = None):
        try:
            import torch
        except ImportError as exc:
            raise BackendError("TorchScript models need the 'torch' package") from exc
        self._torch = torch
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DeprecationWarning)
                self._text = torch.jit.load(str(text_model), map_location="cpu").eval()
                self._image = torch.jit.load(str(image_model), map_location="cpu").eval()
        except Exception as exc:  # torch raises assorted types for bad archives
            raise BackendError(f"cannot load TorchScript model: {exc}") from exc
        if input_size is None:
            input_size = getattr(self._image, "input_size", None)
        if input_size is None:
            raise BackendError(f"{image_model}: input_size not given and the module has no input_size attribute")
        self._size = int(input_size)
        params = list(self._image.parameters())
        self._dtype = params[0].dtype if params else torch.float32

    def input_size(self) -> int:
        return self._size

    def dim(self) -> int:
        return len(self.embed_text(""))

    def embed_text(self, text: str) -> np.ndarray:
        with self._torch.no_grad():
            out = self._text([text])
        return out.detach().double().numpy().reshape(-1)

    def _tensor(self, raster):
        raster = _fit(raster, self._size)
        raster = np.ascontiguousarray(raster.transpose(2, 0, 1)[None])
        return self._torch.from_numpy(raster).to(self._dtype)

    def embed_image(self, raster) -> np.ndarray:
        with self._torch.no_grad():
            out = self._image(self._tensor(raster))
        return out.detach().double().numpy().reshape(-1)

    def image_vjp(self, raster, upstream) -> np.ndarray:
        x = self._tensor(raster).requires_grad_(True)
        y = self._image(x).reshape(-1)
        up = self._torch.from_numpy(np.asarray(upstream, dtype=np.float64)).to(y.dtype)
        (g,) = self._torch.autograd.grad(y, x, up)
        g = g[0].double().numpy().transpose(1, 2, 0).copy()
        shape = np.shape(raster)[:2]
        return g if shape == (self._size, self._size) else resize_adjoint(g, shape)


class OnnxEmbedder(EmbedderBackend):
    """onnxruntime sessions with a stochastic image VJP.

    The VJP ``J^T u`` is estimated from ``probes`` Rademacher directions
    ``r``: ``mean(r * (u . (f(x + h r) - f(x - h r))) / (2 h))``. The probe
    stream is seeded, so runs are reproducible, but the estimate is noisy;
    prefer TorchScript exports when exact gradients matter.
    """

    def __init__(self, text_model, image_model, input_size: int | None = None,
                 probes: int = 32, step: float = 1e-3, seed: int = 0):
        try:
            import onnxruntime as ort
        except ImportError as exc:
            raise BackendError("ONNX models need the 'onnxruntime' package") from exc
        try:
            self._text = ort.InferenceSession(str(text_model), providers=["CPUExecutionProvider"])
            self._image = ort.InferenceSession(str(image_model), providers=["CPUExecutionProvider"])
        except Exception as exc:
            raise BackendError(f"cannot load ONNX model: {exc}") from exc
        if input_size is None:
            dims = self._image.get_inputs()[0].shape
            input_size = dims[-1] if isinstance(dims[-1], int) else None
        if input_size is None:
            raise BackendError(f"{image_model}: input_size not given and the graph input is dynamic")
        self._size = int(input_size)
        self._probes = probes
        self._step = step
        self._rng = np.random.default_rng(seed)

    def input_size(self) -> int:
        return self._size

    def dim(self) -> int:
        return len(self.embed_text(""))

    def embed_text(self, text: str) -> np.ndarray:
        name = self._text.get_inputs()[0].name
        out = self._text.run(None, {name: np.array([text], dtype=object)})[0]
        return np.asarray(out, dtype=np.float64).reshape(-1)

    def embed_image(self, raster) -> np.ndarray:
        x = _fit(raster, self._size).astype(np.float32).transpose(2, 0, 1)[None]
        name = self._image.get_inputs()[0].name
        return np.asarray(self._image.run(None, {name: np.ascontiguousarray(x)})[0], dtype=np.float64).reshape(-1)

    def image_vjp(self, raster, upstream) -> np.ndarray:
        raster = np.asarray(raster, dtype=np.float64)
        u = np.asarray(upstream, dtype=np.float64)
        g = np.zeros_like(raster)
        for _ in range(self._probes):
            r = self._rng.choice([-1.0, 1.0], size=raster.shape)
            up = self.embed_image(raster + self._step * r)
            dn = self.embed_image(raster - self._step * r)
            g += r * (u @ (up - dn)) / (2.0 * self._step)
        return g / self._probes


TORCHSCRIPT_SUFFIXES = (".pt", ".pth", ".ts", ".torchscript")


def external_backend(text_model, image_model, input_size: int | None = None) -> EmbedderBackend:
    for p in (text_model, image_model):
        if not Path(p).is_file():
            raise BackendError(f"model file not found: {p}")
    suffixes = {Path(text_model).suffix.lower(), Path(image_model).suffix.lower()}
    if suffixes == {".onnx"}:
        backend = OnnxEmbedder(text_model, image_model, input_size)
    elif suffixes <= set(TORCHSCRIPT_SUFFIXES):
        backend = TorchScriptEmbedder(text_model, image_model, input_size)
    else:
        raise BackendError(f"cannot tell the model format from suffixes {sorted(suffixes)} "
                           f"(use {', '.join(TORCHSCRIPT_SUFFIXES)} or .onnx for both)")
    _probe(backend)
    return backend


def _probe(backend: EmbedderBackend) -> None:
    try:
        e_t = backend.embed_text("photo")
        e_i = backend.embed_image(np.ones((backend.input_size(),) * 2 + (3,)))
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"backend smoke test failed: {exc}") from exc
    if e_t.shape != e_i.shape:
        raise BackendError(f"text and image embeddings differ in size ({e_t.size} vs {e_i.size})")


def build_backend(section, read_image=None) -> EmbedderBackend:
    """Backend described by a config ``[backend]`` table (``io.BackendSection``)."""
    if section.kind == "external":
        return external_backend(section.text_model, section.image_model, section.input_size)
    if section.kind != "mock":
        raise BackendError(f"unknown backend kind {section.kind!r}")
    kw = {"seed": section.seed, "dim": section.dim}
    if section.input_size is not None:
        kw["size"] = section.input_size
    backend = LinearMockEmbedder(**kw)
    for text, vec in section.text_vectors.items():
        if len(vec) != backend.dim():
            raise BackendError(f"text_vectors[{text!r}] has {len(vec)} entries, expected {backend.dim()}")
        backend.register_text(text, np.asarray(vec))
    if section.text_images:
        if read_image is None:
            from .io import read_png as read_image
        for text, path in section.text_images.items():
            img = read_image(path)
            backend.register_text(text, backend.embed_image(resize(img, backend.input_size())))
    return backend
