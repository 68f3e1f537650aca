"""Small convolutional autoencoder in plain numpy (float64 throughout).

Topology, for an ``S x S x 3`` crop and channel widths ``(c1, c2)``::

    conv 3x3 stride 2, 3 -> c1, leaky ReLU        S   -> S/2
    conv 3x3 stride 2, c1 -> c2, leaky ReLU       S/2 -> S/4   (latent)
    upsample x2, conv 3x3, c2 -> c1, leaky ReLU   S/4 -> S/2
    upsample x2, conv 3x3, c1 -> 3, linear        S/2 -> S

All convolutions use zero padding 1.  Arrays are NHWC.  Training minimises
the mean squared error with Adam.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LEAK = 0.1
LAYERS = ("enc1", "enc2", "dec1", "dec2")
MAGIC = b"GEOAE\x00\x01\x00"


class ShapeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Crop:
    pixels: np.ndarray
    source_image_id: str
    crop_index: int


@dataclass
class AEModel:
    crop_size: int
    channels: tuple[int, int]
    params: dict[str, np.ndarray]
    seed: int = 0
    hyper: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)

    def param_names(self) -> list[str]:
        return [f"{layer}.{p}" for layer in LAYERS for p in ("w", "b")]

    def copy(self) -> "AEModel":
        return AEModel(self.crop_size, self.channels,
                       {k: v.copy() for k, v in self.params.items()},
                       self.seed, dict(self.hyper), list(self.loss_history))

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def final_loss(self) -> float | None:
        return self.loss_history[-1] if self.loss_history else None


def _layer_shapes(channels: tuple[int, int]) -> dict[str, tuple[int, int]]:
    c1, c2 = channels
    return {"enc1": (3, c1), "enc2": (c1, c2), "dec1": (c2, c1), "dec2": (c1, 3)}


def init(seed: int = 0, crop_size: int = 32, channels: tuple[int, int] = (8, 16)) -> AEModel:
    """Glorot-uniform kernels, zero biases, drawn from one seeded generator."""
    if crop_size % 4:
        raise ShapeError("crop_size must be divisible by 4")
    rng = np.random.default_rng(seed)
    params = {}
    for name, (cin, cout) in _layer_shapes(tuple(channels)).items():
        a = math.sqrt(6.0 / (9 * cin + 9 * cout))
        params[f"{name}.w"] = rng.uniform(-a, a, size=(3, 3, cin, cout))
        params[f"{name}.b"] = np.zeros(cout)
    return AEModel(crop_size, tuple(channels), params, seed)


def closed_form_param_count(channels: tuple[int, int] = (8, 16)) -> int:
    c1, c2 = channels
    return (9 * 3 * c1 + c1) + (9 * c1 * c2 + c2) + (9 * c2 * c1 + c1) + (9 * c1 * 3 + 3)


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    cols = [xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
            for i in range(3) for j in range(3)]
    return np.concatenate(cols, axis=-1)


def _col2im(dcols: np.ndarray, shape, stride: int) -> np.ndarray:
    n, h, w, c = shape
    _, ho, wo, _ = dcols.shape
    dxp = np.zeros((n, h + 2, w + 2, c))
    k = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride, :] += dcols[..., k * c:(k + 1) * c]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def _conv(x, w, b, stride):
    cols = _im2col(x, stride)
    return cols @ w.reshape(-1, w.shape[-1]) + b, cols


def _leaky(z):
    return np.where(z > 0, z, LEAK * z)


def _up(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


# _SUBPIX[o, d, k] = 1 when tap k of a 3-tap kernel applied after 2x nearest
# upsampling reads low-resolution offset o - 1 for output phase d.
_SUBPIX = np.zeros((3, 2, 3))
for _d in range(2):
    for _k in range(3):
        _SUBPIX[(_d + _k - 1) // 2 + 1, _d, _k] = 1.0


def _subpixel_kernel(w: np.ndarray) -> np.ndarray:
    """(3, 3, Cin, Cout) kernel -> (9 Cin, 4 Cout) matrix acting on low-res patches."""
    cin, cout = w.shape[2], w.shape[3]
    wc = np.einsum("adk,bel,klio->abidoe", _SUBPIX, _SUBPIX, w)
    # rows (oi, oj, cin), columns (di, dj, cout)
    return wc.transpose(0, 1, 2, 3, 5, 4).reshape(9 * cin, 4 * cout)


def _subpixel_kernel_grad(gwc: np.ndarray, cin: int, cout: int) -> np.ndarray:
    g = gwc.reshape(3, 3, cin, 2, 2, cout)
    return np.einsum("adk,bel,abideo->klio", _SUBPIX, _SUBPIX, g)


def _upconv(a, w, b):
    """Nearest 2x upsampling followed by a 3x3 'same' convolution, on the low-res grid."""
    n, h, wd, _ = a.shape
    cout = w.shape[-1]
    cols = _im2col(a, 1)
    y = cols @ _subpixel_kernel(w)
    y = y.reshape(n, h, wd, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * wd, cout)
    return y + b, cols


def _upconv_back(g, cols, w, in_shape):
    n, h, wd, _ = in_shape
    cin, cout = w.shape[2], w.shape[3]
    gp = g.reshape(n, h, 2, wd, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, wd, 4 * cout)
    gw = _subpixel_kernel_grad(cols.reshape(-1, cols.shape[-1]).T @ gp.reshape(-1, 4 * cout),
                               cin, cout)
    da = _col2im(gp @ _subpixel_kernel(w).T, in_shape, 1)
    return da, gw, g.sum(axis=(0, 1, 2))


def _forward(model: AEModel, x: np.ndarray):
    p = model.params
    cache = {}
    z1, cache["cols1"] = _conv(x, p["enc1.w"], p["enc1.b"], 2)
    a1 = _leaky(z1)
    z2, cache["cols2"] = _conv(a1, p["enc2.w"], p["enc2.b"], 2)
    a2 = _leaky(z2)
    z3, cache["cols3"] = _upconv(a2, p["dec1.w"], p["dec1.b"])
    a3 = _leaky(z3)
    y, cache["cols4"] = _upconv(a3, p["dec2.w"], p["dec2.b"])
    cache.update(x=x, z1=z1, a1=a1, z2=z2, a2=a2, z3=z3, a3=a3)
    return y, cache


def _check_input(model: AEModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    s = model.crop_size
    if x.ndim != 4 or x.shape[1:] != (s, s, 3):
        raise ShapeError(f"expected crops of shape ({s}, {s}, 3), got {x.shape[-3:]}")
    return x


def forward(model: AEModel, crop) -> np.ndarray:
    """Reconstruction of one crop (H, W, 3) or a batch (N, H, W, 3)."""
    pixels = crop.pixels if isinstance(crop, Crop) else crop
    x = _check_input(model, pixels)
    y, _ = _forward(model, x)
    return y[0] if np.ndim(pixels) == 3 else y


def reconstruction_error(model: AEModel, crop) -> float:
    """Squared Euclidean distance between a crop and its reconstruction."""
    pixels = crop.pixels if isinstance(crop, Crop) else crop
    if np.ndim(pixels) != 3:
        raise ShapeError("reconstruction_error takes a single crop")
    x = _check_input(model, pixels)
    d = _forward(model, x)[0] - x
    return float(np.sum(d * d))


def reconstruction_errors(model: AEModel, crops: np.ndarray, batch: int = 256) -> np.ndarray:
    """Per-crop reconstruction errors for an (N, H, W, 3) array."""
    x = _check_input(model, crops)
    out = np.empty(len(x))
    for i in range(0, len(x), batch):
        xb = x[i:i + batch]
        d = _forward(model, xb)[0] - xb
        out[i:i + batch] = np.einsum("nhwc,nhwc->n", d, d)
    return out


def loss_and_grads(model: AEModel, x: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over all elements of the batch, and its gradient."""
    x = _check_input(model, x)
    p = model.params
    y, c = _forward(model, x)
    diff = y - x
    loss = float(np.mean(diff * diff))
    g = 2.0 * diff / diff.size
    grads = {}

    def conv_back(name, g, cols, in_shape, stride, input_grad=True):
        w = p[f"{name}.w"]
        grads[f"{name}.b"] = g.sum(axis=(0, 1, 2))
        gf = g.reshape(-1, g.shape[-1])
        grads[f"{name}.w"] = (cols.reshape(-1, cols.shape[-1]).T @ gf).reshape(w.shape)
        if input_grad:
            return _col2im(g @ w.reshape(-1, w.shape[-1]).T, in_shape, stride)
        return None

    g, grads["dec2.w"], grads["dec2.b"] = _upconv_back(g, c["cols4"], p["dec2.w"],
                                                       c["a3"].shape)
    g = g * np.where(c["z3"] > 0, 1.0, LEAK)
    g, grads["dec1.w"], grads["dec1.b"] = _upconv_back(g, c["cols3"], p["dec1.w"],
                                                       c["a2"].shape)
    g = g * np.where(c["z2"] > 0, 1.0, LEAK)
    g = conv_back("enc2", g, c["cols2"], c["a1"].shape, 2)
    g = g * np.where(c["z1"] > 0, 1.0, LEAK)
    conv_back("enc1", g, c["cols1"], c["x"].shape, 2, input_grad=False)
    return loss, grads


def train(model: AEModel, crops, epochs: int = 30, learning_rate: float = 1e-3,
          batch_size: int = 64, seed: int = 0, betas=(0.9, 0.999),
          eps: float = 1e-8) -> AEModel:
    """Mini-batch Adam on the reconstruction MSE; returns a new trained model.

    ``loss_history`` holds the mean batch loss of every epoch.
    """
    if len(crops) and isinstance(crops[0], Crop):
        crops = [c.pixels for c in crops]
    x = np.asarray(crops, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("training set is empty")
    x = _check_input(model, x)
    out = model.copy()
    out.hyper = {"epochs": epochs, "learning_rate": learning_rate, "batch_size": batch_size,
                 "seed": seed, "betas": tuple(betas), "eps": eps}
    rng = np.random.default_rng(seed)
    m = {k: np.zeros_like(v) for k, v in out.params.items()}
    v = {k: np.zeros_like(v) for k, v in out.params.items()}
    b1, b2 = betas
    t = 0
    for _ in range(epochs):
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(x), batch_size):
            loss, grads = loss_and_grads(out, x[order[i:i + batch_size]])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at step {t}")
            losses.append(loss)
            t += 1
            for k, g in grads.items():
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1 ** t)
                vhat = v[k] / (1 - b2 ** t)
                out.params[k] = out.params[k] - learning_rate * mhat / (np.sqrt(vhat) + eps)
        out.loss_history.append(float(np.mean(losses)))
    for k, val in out.params.items():
        if not np.all(np.isfinite(val)):
            raise TrainingDivergedError(f"non-finite parameters in {k}")
    return out


def save_model(model: AEModel, path: str | Path) -> None:
    """Flat binary: magic, topology (crop, c1, c2, n_arrays as uint32 LE), then each
    array's rank, shape and little-endian float64 data in layer order."""
    names = model.param_names()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", model.crop_size, *model.channels, len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_model(path: str | Path) -> AEModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an autoencoder model file")
    off = len(MAGIC)
    crop, c1, c2, count = struct.unpack_from("<4I", data, off)
    off += 16
    model = init(0, crop, (c1, c2))
    names = model.param_names()
    if count != len(names):
        raise ValueError(f"{path}: expected {len(names)} arrays, found {count}")
    for name in names:
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        if arr.shape != model.params[name].shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        model.params[name] = arr.astype(np.float64)
    return model
