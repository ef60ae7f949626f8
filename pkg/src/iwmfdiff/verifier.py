"""A small differentiable face-embedding stand-in with hand-written gradients.

The network is::

    conv (4 x 4, stride 2, valid, no bias) -> shifted softplus -> G x G regional mean
    -> subtract the mid-gray image's features -> linear projection -> L2 normalisation

Centering on the mid-gray response removes the component every image
shares, so embeddings describe how an image departs from flat gray.

Weights are drawn once from a seed and never trained.  Everything accepts a
single image ``(C, H, W)`` or a batch ``(N, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import read_raw, rng_stream, write_raw

_LOG2 = float(np.log(2.0))


@dataclass(frozen=True)
class ToyExtractor:
    kernels: np.ndarray          # (K, C, k, k)
    projection: np.ndarray       # (D, K * G * G)
    grid: int
    input_shape: tuple[int, int, int]
    stride: int = 2
    _row_cuts: np.ndarray = field(init=False, repr=False, compare=False)
    _col_cuts: np.ndarray = field(init=False, repr=False, compare=False)
    _gray_features: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = self.kernels.shape[-1]
        c, h, w = self.input_shape
        if self.kernels.shape[1] != c:
            raise ValueError("kernel channels do not match input channels")
        hh, ww = self.conv_shape
        if hh < self.grid or ww < self.grid:
            raise ValueError("input too small for the pooling grid")
        if self.projection.shape[1] != self.kernels.shape[0] * self.grid ** 2:
            raise ValueError("projection width does not match K * G * G")
        object.__setattr__(self, "_row_cuts", np.linspace(0, hh, self.grid + 1).astype(int))
        object.__setattr__(self, "_col_cuts", np.linspace(0, ww, self.grid + 1).astype(int))
        gray = np.full((1, *self.input_shape), 0.5)
        object.__setattr__(self, "_gray_features", _features(self, gray))

    @property
    def conv_shape(self) -> tuple[int, int]:
        k = self.kernels.shape[-1]
        _, h, w = self.input_shape
        return (h - k) // self.stride + 1, (w - k) // self.stride + 1

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def save(self, directory) -> None:
        """Dump weights as two raw-tensor files in ``directory``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        kk = self.kernels
        with open(d / "kernels.rten", "wb") as fh:
            write_raw(kk.reshape(kk.shape[0], kk.shape[1], -1), fh)
        with open(d / "projection.rten", "wb") as fh:
            write_raw(self.projection[None], fh)
        (d / "geometry.txt").write_text(" ".join(map(str, (*self.input_shape, self.stride))) + "\n")

    @classmethod
    def load(cls, directory) -> "ToyExtractor":
        d = Path(directory)
        with open(d / "kernels.rten", "rb") as fh:
            kk = read_raw(fh)
        with open(d / "projection.rten", "rb") as fh:
            proj = read_raw(fh)[0]
        k = int(round(np.sqrt(kk.shape[2])))
        *shape, stride = (int(v) for v in (d / "geometry.txt").read_text().split())
        grid = int(round(np.sqrt(proj.shape[1] // kk.shape[0])))
        return cls(kk.reshape(kk.shape[0], kk.shape[1], k, k), proj, grid, tuple(shape), stride)


def make_extractor(seed: int = 0, input_shape=(3, 32, 32), n_kernels: int = 8,
                   kernel_size: int = 4, grid: int = 4, dim: int = 32, stride: int = 2) -> ToyExtractor:
    """Build a randomly initialised extractor; same seed, same weights."""
    rng = rng_stream(seed)
    c = input_shape[0]
    fan_in = c * kernel_size * kernel_size
    kernels = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(n_kernels, c, kernel_size, kernel_size))
    width = n_kernels * grid * grid
    projection = rng.normal(0.0, 1.0 / np.sqrt(width), size=(dim, width))
    # float32 round-trip keeps dumped weights bit-identical on reload
    return ToyExtractor(kernels.astype(np.float32).astype(np.float64),
                        projection.astype(np.float32).astype(np.float64),
                        grid, tuple(input_shape), stride)


def _as_batch(model: ToyExtractor, img) -> tuple[np.ndarray, bool]:
    x = np.asarray(img, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(model.input_shape):
        raise ValueError(f"image shape {np.shape(img)} does not match model input {model.input_shape}")
    return x, single


def _conv(model: ToyExtractor, x: np.ndarray) -> np.ndarray:
    kk = model.kernels
    k, st = kk.shape[-1], model.stride
    hh, ww = model.conv_shape
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::st, ::st]
    # (N, C, H', W', k, k) -> (N, H', W', C, k, k) -> im2col rows
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, kk[0].size) @ kk.reshape(kk.shape[0], -1).T
    return cols.reshape(len(x), hh, ww, kk.shape[0]).transpose(0, 3, 1, 2)


def _pool(model: ToyExtractor, a: np.ndarray) -> np.ndarray:
    rc, cc = model._row_cuts, model._col_cuts
    s = np.add.reduceat(np.add.reduceat(a, rc[:-1], axis=2), cc[:-1], axis=3)
    area = np.diff(rc)[:, None] * np.diff(cc)[None, :]
    return s / area


def _softplus0(u: np.ndarray) -> np.ndarray:
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u))) - _LOG2


def _features(model: ToyExtractor, x: np.ndarray) -> np.ndarray:
    return _pool(model, _softplus0(_conv(model, x))).reshape(len(x), -1)


def _forward(model: ToyExtractor, x: np.ndarray):
    u = _conv(model, x)
    h = _pool(model, _softplus0(u)).reshape(len(x), -1) - model._gray_features
    z = h @ model.projection.T
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    return u, z, norm, z / norm


def first_conv_response(model: ToyExtractor, img) -> np.ndarray:
    """Raw output of the first convolution (linear in the input)."""
    x, single = _as_batch(model, img)
    u = _conv(model, x)
    return u[0] if single else u


def extract(model: ToyExtractor, img) -> np.ndarray:
    """Unit-norm embedding(s) of an image or batch."""
    x, single = _as_batch(model, img)
    e = _forward(model, x)[3]
    return e[0] if single else e


def cosine_similarity(a, b) -> np.ndarray | float:
    """Cosine similarity of unit embeddings (row-wise for 2-d input)."""
    s = np.sum(np.asarray(a) * np.asarray(b), axis=-1)
    s = np.clip(s, -1.0, 1.0)
    return float(s) if np.ndim(s) == 0 else s


def loss_and_grad(model: ToyExtractor, img, target_emb) -> tuple[np.ndarray, np.ndarray]:
    """Feature distance ``||f(img) - target||`` and its gradient w.r.t. ``img``.

    Where the distance is exactly zero the norm is not differentiable; those
    rows get a zero gradient and a zero loss, which callers use as the flag.
    """
    x, single = _as_batch(model, img)
    t = np.broadcast_to(np.asarray(target_emb, dtype=np.float64), (len(x), model.dim))
    u, z, norm, e = _forward(model, x)
    diff = e - t
    loss = np.linalg.norm(diff, axis=1)
    safe = np.where(loss > 0, loss, 1.0)
    g_e = np.where(loss[:, None] > 0, diff / safe[:, None], 0.0)
    # d e / d z = (I - e e^T) / |z|
    g_z = (g_e - e * np.sum(g_e * e, axis=1, keepdims=True)) / norm
    g_h = g_z @ model.projection
    g_p = g_h.reshape(len(x), model.kernels.shape[0], model.grid, model.grid)
    rl, cl = np.diff(model._row_cuts), np.diff(model._col_cuts)
    g_p = g_p / (rl[:, None] * cl[None, :])
    g_a = np.repeat(np.repeat(g_p, rl, axis=2), cl, axis=3)
    g_u = g_a / (1.0 + np.exp(-u))
    grad = _conv_input_grad(model, g_u, x.shape)
    if single:
        return loss[0], grad[0]
    return loss, grad


def _conv_input_grad(model: ToyExtractor, g_u: np.ndarray, shape) -> np.ndarray:
    kk = model.kernels
    nk, c, k, _ = kk.shape
    st = model.stride
    n, _, hh, ww = g_u.shape
    cols = g_u.transpose(0, 2, 3, 1).reshape(-1, nk) @ kk.reshape(nk, -1)
    cols = cols.reshape(n, hh, ww, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    grad = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            grad[:, :, i:i + st * (hh - 1) + 1:st, j:j + st * (ww - 1) + 1:st] += cols[:, :, i, j]
    return grad


def grad_loss_wrt_input(model: ToyExtractor, img, target_emb) -> np.ndarray:
    return loss_and_grad(model, img, target_emb)[1]
