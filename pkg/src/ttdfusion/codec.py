"""Encoder/decoder backends used as the fusion model ``D(sum_m w_m * E(x_m))``.

Three backends share one functional interface (``encode``/``decode``):

* ``constant``  identity encoder and decoder (image-level "early" fusion).
* ``pyramid``   undecimated Gaussian band decomposition with quantized detail
  bands; deterministic and training-free, lossy by construction.
* ``toynet``    one convolution + leaky ReLU encoder, one convolution decoder,
  with exact reverse-mode gradients and a seeded SGD trainer.

The toy net uses a single encoder shared by all sources.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import gaussian_blur
from .rng import CounterRNG

BACKENDS = ("constant", "pyramid", "toynet")
LEAKY_SLOPE = 0.1
PARAMS_MAGIC = b"TTDN"
PARAMS_VERSION = 1


class CodecError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class CodecSpec:
    backend: str = "pyramid"
    levels: int = 3
    step: float = 0.05
    features: int = 8
    kernel: int = 3
    image_channels: int = 1

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise CodecError(f"unknown backend {self.backend!r}")
        if self.levels < 1:
            raise CodecError("pyramid levels must be >= 1")
        if not 0.0 < self.step <= 1.0:
            raise CodecError("detail quantization step must be in (0, 1]")
        if self.features < 1:
            raise CodecError("toy-net feature count must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise CodecError("kernel size must be a positive odd integer")
        if self.image_channels not in (1, 3):
            raise CodecError("image_channels must be 1 or 3")

    def feature_channels(self) -> int:
        if self.backend == "constant":
            return self.image_channels
        if self.backend == "pyramid":
            return (self.levels + 1) * self.image_channels
        return self.features

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "CodecSpec":
        kv = parse_key_values(text)
        types = {"backend": str, "levels": int, "step": float, "features": int,
                 "kernel": int, "image_channels": int}
        unknown = set(kv) - set(types)
        if unknown:
            raise CodecError(f"unknown codec keys: {sorted(unknown)}")
        return cls(**{k: types[k](v) for k, v in kv.items()})


def parse_key_values(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class ToyNetParams:
    enc_w: np.ndarray  # (K, C, k, k)
    enc_b: np.ndarray  # (K,)
    dec_w: np.ndarray  # (C, K, k, k)
    dec_b: np.ndarray  # (C,)

    def __post_init__(self):
        k_out, c_in, kh, kw = self.enc_w.shape
        if kh != kw or kh % 2 == 0:
            raise CodecError("kernels must be square and odd")
        if self.enc_b.shape != (k_out,):
            raise CodecError("encoder bias shape mismatch")
        if self.dec_w.shape != (c_in, k_out, kh, kw):
            raise CodecError("decoder kernel shape mismatch")
        if self.dec_b.shape != (c_in,):
            raise CodecError("decoder bias shape mismatch")
        for arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise CodecError("non-finite parameter")

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.enc_w, self.enc_b, self.dec_w, self.dec_b)

    @property
    def shape(self) -> tuple[int, int, int]:
        """(image channels, feature channels, kernel size)."""
        return self.enc_w.shape[1], self.enc_w.shape[0], self.enc_w.shape[2]

    def copy(self) -> "ToyNetParams":
        return ToyNetParams(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ToyNetParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return ToyNetParams(*out)


def init_params(spec: CodecSpec, seed: int) -> ToyNetParams:
    """Kernels uniform in [-0.1, 0.1] from the counter RNG, biases zero."""
    k, K, C = spec.kernel, spec.features, spec.image_channels
    rng = CounterRNG(seed, stream=0x70A)
    enc_w = rng.uniform((K, C, k, k), -0.1, 0.1)
    dec_w = rng.uniform((C, K, k, k), -0.1, 0.1)
    return ToyNetParams(enc_w, np.zeros(K), dec_w, np.zeros(C))


def _check_params(spec: CodecSpec, params: Optional[ToyNetParams]) -> None:
    if spec.backend == "toynet":
        if params is None:
            raise CodecError("toynet backend requires parameters")
        if params.shape != (spec.image_channels, spec.features, spec.kernel):
            raise CodecError(f"parameter shape {params.shape} does not match codec spec")
    elif params is not None:
        raise CodecError(f"{spec.backend} backend takes no parameters")


# ------------------------------------------------------------------ convolution


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """(H, W, C) -> (H, W, C, k, k) replicate-padded neighbourhoods."""
    r = k // 2
    padded = np.pad(x, ((r, r), (r, r), (0, 0)), mode="edge")
    return sliding_window_view(padded, (k, k), axis=(0, 1))


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size multi-channel correlation: (H,W,Cin) * (Cout,Cin,k,k) + b."""
    k = w.shape[2]
    if k == 1:
        return x @ w[:, :, 0, 0].T + b
    return np.einsum("hwcij,ocij->hwo", _patches(x, k), w, optimize=True) + b


def conv_backward(x: np.ndarray, w: np.ndarray, gout: np.ndarray):
    """Gradients of ``conv_forward`` w.r.t. input, kernel and bias."""
    k = w.shape[2]
    r = k // 2
    h, wd, _ = x.shape
    gb = gout.sum(axis=(0, 1))
    if k == 1:
        gw = np.einsum("hwc,hwo->oc", x, gout)[:, :, None, None]
        return gout @ w[:, :, 0, 0], gw, gb
    gw = np.einsum("hwcij,hwo->ocij", _patches(x, k), gout, optimize=True)
    gpad = np.zeros((h + 2 * r, wd + 2 * r, x.shape[2]))
    for dy in range(k):
        for dx in range(k):
            gpad[dy : dy + h, dx : dx + wd] += gout @ w[:, :, dy, dx]
    # adjoint of replicate padding: fold the border back onto the edge pixels
    if r:
        gpad[r, :] += gpad[:r].sum(axis=0)
        gpad[h + r - 1, :] += gpad[h + r :].sum(axis=0)
        gpad[:, r] += gpad[:, :r].sum(axis=1)
        gpad[:, wd + r - 1] += gpad[:, wd + r :].sum(axis=1)
    return gpad[r : r + h, r : r + wd], gw, gb


def leaky(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def leaky_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


# ------------------------------------------------------------ encode / decode


def _pyramid_encode(spec: CodecSpec, x: np.ndarray) -> np.ndarray:
    prev = x
    details = []
    for j in range(1, spec.levels + 1):
        cur = gaussian_blur(x, 2.0 ** (j - 1))
        details.append(np.floor((prev - cur) / spec.step + 0.5))
        prev = cur
    return np.concatenate([prev] + details, axis=2)


def _pyramid_decode_raw(spec: CodecSpec, f: np.ndarray) -> np.ndarray:
    c = spec.image_channels
    low = f[:, :, :c]
    detail = f[:, :, c:].reshape(f.shape[0], f.shape[1], spec.levels, c).sum(axis=2)
    return low + spec.step * detail


def encode(spec: CodecSpec, params: Optional[ToyNetParams], x: np.ndarray) -> np.ndarray:
    _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != spec.image_channels:
        raise CodecError(f"image shape {x.shape} does not match codec channels {spec.image_channels}")
    if spec.backend == "constant":
        return x.copy()
    if spec.backend == "pyramid":
        return _pyramid_encode(spec, x)
    return leaky(conv_forward(x, params.enc_w, params.enc_b))


def decode_raw(spec: CodecSpec, params: Optional[ToyNetParams], f: np.ndarray) -> np.ndarray:
    """Decoder output before clamping to [0, 1]."""
    _check_params(spec, params)
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != spec.feature_channels():
        raise CodecError(f"feature shape {f.shape} does not match codec ({spec.feature_channels()} channels)")
    if spec.backend == "constant":
        return f.copy()
    if spec.backend == "pyramid":
        return _pyramid_decode_raw(spec, f)
    return conv_forward(f, params.dec_w, params.dec_b)


def decode(spec: CodecSpec, params: Optional[ToyNetParams], f: np.ndarray) -> np.ndarray:
    out = decode_raw(spec, params, f)
    if spec.backend == "constant":
        return out
    return np.clip(out, 0.0, 1.0)


def reconstruct(spec: CodecSpec, params: Optional[ToyNetParams], x: np.ndarray) -> np.ndarray:
    """Uni-source component ``D(E(x))``."""
    return decode(spec, params, encode(spec, params, x))


# -------------------------------------------------------------------- gradients


@dataclass
class Gradients:
    params: ToyNetParams
    features: np.ndarray  # dL/dE(x), (H, W, K)
    loss: float


def _forward_cache(params: ToyNetParams, x: np.ndarray):
    z = conv_forward(x, params.enc_w, params.enc_b)
    f = leaky(z)
    r = conv_forward(f, params.dec_w, params.dec_b)
    return z, f, r


def _backward(params: ToyNetParams, x_in: np.ndarray, z: np.ndarray, f: np.ndarray, gr: np.ndarray):
    gf, gdw, gdb = conv_backward(f, params.dec_w, gr)
    gz = gf * leaky_grad(z)
    _, gew, geb = conv_backward(x_in, params.enc_w, gz)
    return ToyNetParams(gew, geb, gdw, gdb), gf


def loss_gradients(spec: CodecSpec, params: ToyNetParams, x: np.ndarray) -> Gradients:
    """Exact gradients of ``sum((D(E(x)) - x)**2)`` (pre-clamp decoder output).

    Returns parameter gradients and the feature gradient map ``dL/dE(x)``.
    """
    if spec.backend != "toynet":
        raise CodecError("loss_gradients requires the toynet backend")
    _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    z, f, r = _forward_cache(params, x)
    resid = r - x
    gparams, gf = _backward(params, x, z, f, 2.0 * resid)
    return Gradients(gparams, gf, float(np.sum(resid * resid)))


def fusion_objective(params: ToyNetParams, sources: Sequence[np.ndarray]):
    """Uniform-weight fusion training loss and its parameter gradient.

    ``I = D(mean_m E(x_m))`` (pre-clamp); loss ``sum_m mean((I - x_m)**2)``.
    """
    m = len(sources)
    xs = [np.asarray(x, dtype=np.float64) for x in sources]
    caches = [(x, conv_forward(x, params.enc_w, params.enc_b)) for x in xs]
    fused = sum(leaky(z) for _, z in caches) / m
    out = conv_forward(fused, params.dec_w, params.dec_b)
    n = out.size
    loss = sum(float(np.mean((out - x) ** 2)) for x, _ in caches)
    gout = sum(2.0 * (out - x) for x, _ in caches) / n
    gfused, gdw, gdb = conv_backward(fused, params.dec_w, gout)
    gew = np.zeros_like(params.enc_w)
    geb = np.zeros_like(params.enc_b)
    for x, z in caches:
        gz = (gfused / m) * leaky_grad(z)
        _, w_, b_ = conv_backward(x, params.enc_w, gz)
        gew += w_
        geb += b_
    return loss, ToyNetParams(gew, geb, gdw, gdb)


# --------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.learning_rate < 1.0:
            raise ValueError("learning rate must be in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")


def dataset_loss(params: ToyNetParams, dataset: Sequence[Sequence[np.ndarray]]) -> float:
    return math.fsum(fusion_objective(params, item)[0] for item in dataset) / len(dataset)


def train_toy(spec: CodecSpec, dataset: Sequence[Sequence[np.ndarray]], cfg: TrainConfig,
              init: Optional[ToyNetParams] = None) -> ToyNetParams:
    """Seeded minibatch SGD on the uniform-weight fusion objective.

    The returned parameters are the best seen at an epoch boundary, so the
    final dataset loss never exceeds the initial one.
    """
    if spec.backend != "toynet":
        raise CodecError("train_toy requires the toynet backend")
    if not dataset:
        raise ValueError("empty training dataset")
    m = len(dataset[0])
    if m < 1 or any(len(item) != m for item in dataset):
        raise ValueError("all training tuples must have the same source count")
    params = init.copy() if init is not None else init_params(spec, cfg.seed)
    _check_params(spec, params)
    best, best_loss = params.copy(), dataset_loss(params, dataset)
    order_rng = CounterRNG(cfg.seed, stream=0x5D6)
    for _ in range(cfg.epochs):
        order = order_rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc = [np.zeros_like(a) for a in params.arrays()]
            for idx in batch:
                loss, g = fusion_objective(params, dataset[idx])
                if not math.isfinite(loss):
                    raise TrainingDivergedError("training loss became non-finite")
                for a, ga in zip(acc, g.arrays()):
                    a += ga
            arrays = [p - cfg.learning_rate * a / len(batch) for p, a in zip(params.arrays(), acc)]
            if not all(np.all(np.isfinite(a)) for a in arrays):
                raise TrainingDivergedError("parameters became non-finite")
            params = ToyNetParams(*arrays)
        epoch_loss = dataset_loss(params, dataset)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError("training loss became non-finite")
        if epoch_loss <= best_loss:
            best, best_loss = params.copy(), epoch_loss
    return best


# ---------------------------------------------------------------- serialization


def save_params(params: ToyNetParams, spec: CodecSpec, path) -> None:
    """Binary ``TTDN`` file plus a ``<path>.spec.txt`` key=value sidecar."""
    c, k_feat, k = params.shape
    header = PARAMS_MAGIC + struct.pack("<HIII", PARAMS_VERSION, c, k_feat, k)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays())
    path = Path(path)
    path.write_bytes(header + body)
    Path(str(path) + ".spec.txt").write_text(spec.to_text(), encoding="utf-8")


def load_params(path) -> tuple[ToyNetParams, Optional[CodecSpec]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != PARAMS_MAGIC:
        raise CodecError(f"{path}: bad magic (not a TTDN parameter file)")
    if len(raw) < 18:
        raise CodecError(f"{path}: truncated header")
    version, c, k_feat, k = struct.unpack("<HIII", raw[4:18])
    if version != PARAMS_VERSION:
        raise CodecError(f"{path}: unsupported format version {version}")
    shapes = [(k_feat, c, k, k), (k_feat,), (c, k_feat, k, k), (c,)]
    sizes = [int(np.prod(s)) for s in shapes]
    body = raw[18:]
    if len(body) != 4 * sum(sizes):
        raise CodecError(f"{path}: body size does not match header")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    arrays, pos = [], 0
    for shape, size in zip(shapes, sizes):
        arrays.append(flat[pos : pos + size].reshape(shape).copy())
        pos += size
    sidecar = Path(str(path) + ".spec.txt")
    spec = CodecSpec.from_text(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else None
    return ToyNetParams(*arrays), spec
