"""From-scratch CNN regression of (speed, rotation) actions.

Three stride-2 'same' convolutions (8, 16, 32 filters of 5x5) downsample
the 64x64 occupancy map to 8x8x32; the flattened 2048 features plus the
two orientation features feed dense layers 128 -> 32 -> 2, ReLU on all
hidden layers and a linear output. Forward, backward, mini-batch SGD
with inverse-time learning-rate decay, gradient checking and a binary
parameter format are all implemented here on plain numpy arrays.

Convolution convention (fixed for every layer, including reduced test
networks): stride 2, symmetric zero padding of kernel_size // 2, so a
side of n maps to ceil(n / 2).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

try:  # optional: compiles the conv backward scatter; numpy fallback below
    from numba import njit as _njit
except ImportError:  # pragma: no cover
    _njit = None

from crowdnav import mapping

PARAMS_MAGIC = b"CRWDNN01"
PARAMS_VERSION = 1

CONV_STRIDE = 2

# per-element gradient-check denominators below this are treated as zero
_GRAD_CHECK_FLOOR = 1e-6


class ShapeError(ValueError):
    """Input or parameter shapes disagree; message names the layer."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"training diverged at step {step} (non-finite loss)")


class ParamsFormatError(ValueError):
    """Base class for parameter-file failures."""


class ParamsMagicError(ParamsFormatError):
    pass


class ParamsVersionError(ParamsFormatError):
    pass


class ParamsTruncatedError(ParamsFormatError):
    pass


class ParamsShapeError(ParamsFormatError):
    pass


@dataclass
class NetworkParams:
    """All weights, conv stages then dense stages.

    conv_w[i] has shape (filters, in_channels, k, k) with conv_b[i] of
    (filters,); dense_w[i] has shape (in, out) with dense_b[i] of (out,).
    The canonical architecture comes from init_params(); smaller
    configurations are used for finite-difference checks.
    """

    conv_w: list
    conv_b: list
    dense_w: list
    dense_b: list

    def __post_init__(self):
        if len(self.conv_w) != len(self.conv_b) or len(self.dense_w) != len(self.dense_b):
            raise ValueError("weight/bias lists must pair up")
        if not self.dense_w:
            raise ValueError("need at least one dense layer")
        prev_f = None
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            if w.ndim != 4 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ValueError(f"conv{i + 1} arrays malformed")
            if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
                raise ValueError(f"conv{i + 1} kernels must be square with odd size")
            if prev_f is not None and w.shape[1] != prev_f:
                raise ValueError(f"conv{i + 1} input channels do not chain")
            prev_f = w.shape[0]
        prev_d = None
        for i, (w, b) in enumerate(zip(self.dense_w, self.dense_b)):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
                raise ValueError(f"dense{i + 1} arrays malformed")
            if prev_d is not None and w.shape[0] != prev_d:
                raise ValueError(f"dense{i + 1} input width does not chain")
            prev_d = w.shape[1]

    def arrays(self) -> list:
        """Flat array list in serialization order (conv pairs, dense pairs)."""
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend((w, b))
        for w, b in zip(self.dense_w, self.dense_b):
            out.extend((w, b))
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [w.copy() for w in self.conv_w],
            [b.copy() for b in self.conv_b],
            [w.copy() for w in self.dense_w],
            [b.copy() for b in self.dense_b],
        )

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            [w.astype(dtype) for w in self.conv_w],
            [b.astype(dtype) for b in self.conv_b],
            [w.astype(dtype) for w in self.dense_w],
            [b.astype(dtype) for b in self.dense_b],
        )

    @property
    def dtype(self):
        return self.dense_w[0].dtype

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def params_equal(a: NetworkParams, b: NetworkParams) -> bool:
    aa, bb = a.arrays(), b.arrays()
    return len(aa) == len(bb) and all(
        x.shape == y.shape and np.array_equal(x, y) for x, y in zip(aa, bb)
    )


def init_params(
    seed: int,
    conv_filters: Sequence[int] = (8, 16, 32),
    kernel_size: int = 5,
    dense_units: Sequence[int] = (128, 32, 2),
    input_side: int = 64,
    input_channels: int = 1,
    extra_features: int = 2,
    dtype=np.float32,
) -> NetworkParams:
    """Seeded uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    c = input_channels
    side = input_side
    for f in conv_filters:
        bound = math.sqrt(6.0 / (c * kernel_size * kernel_size))
        conv_w.append(rng.uniform(-bound, bound, (f, c, kernel_size, kernel_size)).astype(dtype))
        conv_b.append(np.zeros(f, dtype=dtype))
        c = f
        side = -(-side // CONV_STRIDE)
    dense_w, dense_b = [], []
    d = c * side * side + extra_features if conv_filters else extra_features
    for u in dense_units:
        bound = math.sqrt(6.0 / d)
        dense_w.append(rng.uniform(-bound, bound, (d, u)).astype(dtype))
        dense_b.append(np.zeros(u, dtype=dtype))
        d = u
    return NetworkParams(conv_w, conv_b, dense_w, dense_b)


@dataclass(frozen=True)
class Prediction:
    speed: float
    rotation: float


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 128
    lr0: float = 1e-4
    decay: float = 5e-5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lr0 <= 0 or self.decay < 0:
            raise ValueError("lr0 must be positive and decay non-negative")


class LossPoint(NamedTuple):
    step: int
    lr: float
    loss: float


@dataclass
class TrainData:
    """Dense training arrays: maps (N, S, S), extras (N, 2), targets (N, 2)."""

    maps: np.ndarray
    extras: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if not (len(self.maps) == len(self.extras) == len(self.targets)):
            raise ValueError("maps, extras and targets must have equal length")

    def __len__(self):
        return len(self.maps)


def to_train_data(records) -> TrainData:
    """Convert TrainingRecords into the arrays the optimizer consumes."""
    maps = np.stack([mapping.normalize_map(r.map) for r in records])
    extras = np.array([mapping.orientation_features(r.theta_rel) for r in records])
    targets = np.array([(r.speed, r.rotation) for r in records])
    return TrainData(maps=maps, extras=extras, targets=targets)


# --- layer primitives ---------------------------------------------------------
# Module-level functions so tests can swap a backward pass for a corrupted
# one and confirm the gradient check notices. Activations flow in NHWC
# layout (batch, height, width, channels); weights keep the public
# (filters, in_channels, k, k) layout.

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-2 same convolution. x: (B, H, W, C) -> (B, ceil(H/2), ceil(W/2), F)."""
    bsz, h, wd, c = x.shape
    f, _, k, _ = w.shape
    p = k // 2
    oh, ow = -(-h // CONV_STRIDE), -(-wd // CONV_STRIDE)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(bsz, oh, ow, k, k, c),
        strides=(s0, CONV_STRIDE * s1, CONV_STRIDE * s2, s1, s2, s3),
        writeable=False,
    )
    cols = windows.reshape(bsz * oh * ow, k * k * c)
    wm = w.transpose(0, 2, 3, 1).reshape(f, -1)  # (F, k*k*C), matching cols
    y = (cols @ wm.T + b).reshape(bsz, oh, ow, f)
    return y, (cols, w, x.shape, (oh, ow))


def _scatter_windows_numpy(dxp: np.ndarray, dwin: np.ndarray, stride: int) -> None:
    _, oh, ow, k, _, _ = dwin.shape
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki : ki + stride * oh : stride,
                kj : kj + stride * ow : stride, :] += dwin[:, :, :, ki, kj, :]


if _njit is not None:
    @_njit(cache=True)
    def _scatter_windows(dxp, dwin, stride):  # pragma: no cover - jitted
        bsz, oh, ow, k, _, c = dwin.shape
        for b in range(bsz):
            for i in range(oh):
                for j in range(ow):
                    for ki in range(k):
                        yy = stride * i + ki
                        for kj in range(k):
                            xx = stride * j + kj
                            for ci in range(c):
                                dxp[b, yy, xx, ci] += dwin[b, i, j, ki, kj, ci]
else:  # pragma: no cover
    _scatter_windows = _scatter_windows_numpy


def conv2d_backward(dy: np.ndarray, cache, need_dx: bool = True):
    cols, w, x_shape, (oh, ow) = cache
    bsz, h, wd, c = x_shape
    f, _, k, _ = w.shape
    p = k // 2
    dym = dy.reshape(-1, f)
    dw = (cols.T @ dym).T.reshape(f, k, k, c).transpose(0, 3, 1, 2)
    db = dym.sum(axis=0)
    if not need_dx:
        return None, dw, db
    wm = w.transpose(0, 2, 3, 1).reshape(f, -1)
    dwin = (dym @ wm).reshape(bsz, oh, ow, k, k, c)
    dxp = np.zeros((bsz, h + 2 * p, wd + 2 * p, c), dtype=dy.dtype)
    _scatter_windows(dxp, dwin, CONV_STRIDE)
    dx = dxp[:, p : p + h, p : p + wd, :]
    return dx, dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dy: np.ndarray, mask):
    return dy * mask


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def dense_backward(dy: np.ndarray, cache, w: np.ndarray):
    x = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


# --- network ------------------------------------------------------------------

def _run(params: NetworkParams, maps: np.ndarray, extras: np.ndarray, keep_cache: bool):
    dtype = params.dtype
    x = np.ascontiguousarray(maps, dtype=dtype)[:, :, :, None]
    extras = np.asarray(extras, dtype=dtype)
    if extras.ndim != 2:
        raise ShapeError("orientation features must be (batch, n) shaped")
    caches = []
    for i, (w, b) in enumerate(zip(params.conv_w, params.conv_b)):
        if x.shape[3] != w.shape[1]:
            raise ShapeError(
                f"conv{i + 1}: expected {w.shape[1]} input channels, got {x.shape[3]}"
            )
        x, conv_cache = conv2d_forward(x, w, b)
        x, relu_mask = relu_forward(x)
        if keep_cache:
            caches.append(("conv", conv_cache, relu_mask))
    flat = x.reshape(x.shape[0], -1)
    x = np.concatenate([flat, extras], axis=1)
    if keep_cache:
        caches.append(("join", flat.shape, extras.shape))
    n_dense = len(params.dense_w)
    for i, (w, b) in enumerate(zip(params.dense_w, params.dense_b)):
        if x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"dense{i + 1}: expected input width {w.shape[0]}, got {x.shape[1]}"
            )
        x, dense_cache = dense_forward(x, w, b)
        last = i == n_dense - 1
        relu_mask = None
        if not last:
            x, relu_mask = relu_forward(x)
        if keep_cache:
            caches.append(("dense", dense_cache, relu_mask))
    return x, caches


def forward_batch(params: NetworkParams, maps: np.ndarray, extras: np.ndarray) -> np.ndarray:
    """Pure batched forward pass; rows of (speed, rotation)."""
    out, _ = _run(params, maps, extras, keep_cache=False)
    return out


def forward(params: NetworkParams, map_values, orient) -> Prediction:
    """Single-example forward pass.

    map_values: the normalized occupancy grid (values in [0, 1]);
    orient: (sin, cos) of the goal-relative heading.
    """
    out = forward_batch(params, np.asarray(map_values)[None], np.asarray(orient)[None])
    if out.shape[1] != 2:
        raise ShapeError(f"dense{len(params.dense_w)}: expected 2 outputs, got {out.shape[1]}")
    return Prediction(speed=float(out[0, 0]), rotation=float(out[0, 1]))


def _backward(params: NetworkParams, caches, dout: np.ndarray) -> NetworkParams:
    """Gradients of a scalar loss given d(loss)/d(output)."""
    g_conv_w = [None] * len(params.conv_w)
    g_conv_b = [None] * len(params.conv_b)
    g_dense_w = [None] * len(params.dense_w)
    g_dense_b = [None] * len(params.dense_b)
    dy = dout
    ci = len(params.conv_w) - 1
    di = len(params.dense_w) - 1
    for entry in reversed(caches):
        kind = entry[0]
        if kind == "dense":
            _, cache, relu_mask = entry
            if relu_mask is not None:
                dy = relu_backward(dy, relu_mask)
            dy, g_dense_w[di], g_dense_b[di] = dense_backward(dy, cache, params.dense_w[di])
            di -= 1
        elif kind == "join":
            _, flat_shape, extras_shape = entry
            n_flat = flat_shape[1]
            dy = dy[:, :n_flat]
            b = flat_shape[0]
            if params.conv_w:
                f = params.conv_w[-1].shape[0]
                side = int(math.isqrt(n_flat // f))
                dy = dy.reshape(b, side, side, f)
        else:  # conv
            _, cache, relu_mask = entry
            dy = relu_backward(dy, relu_mask)
            # the first conv layer's input gradient is never consumed
            dy, g_conv_w[ci], g_conv_b[ci] = conv2d_backward(dy, cache, need_dx=ci > 0)
            ci -= 1
    return NetworkParams(g_conv_w, g_conv_b, g_dense_w, g_dense_b)


# --- loss ----------------------------------------------------------------------

def _as_rows(items) -> np.ndarray:
    rows = [
        (it.speed, it.rotation) if isinstance(it, Prediction) else it for it in items
    ]
    return np.asarray(rows, dtype=float)


def mse(pred, target) -> float:
    """Mean of squared residuals over every output scalar.

    Accepts Prediction lists (2 residuals each), coordinate pairs, or
    plain scalars; predictions and targets must have matching shapes.
    """
    p = _as_rows(pred)
    t = _as_rows(target)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} targets")
    if len(p) == 0:
        raise ValueError("mse needs at least one pair")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


# --- training -------------------------------------------------------------------

def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> list:
    """Index batches: a seeded permutation per epoch, consecutive chunks,
    reshuffled each time the data is exhausted."""
    rng = np.random.default_rng(seed)
    sched: list = []
    while len(sched) < steps:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            sched.append(perm[i : i + batch_size])
            if len(sched) == steps:
                break
    return sched


def train(
    params: NetworkParams,
    data: TrainData,
    cfg: TrainConfig,
    on_step: Callable[[int, float, float], None] | None = None,
    schedule: list | None = None,
) -> tuple[NetworkParams, list[LossPoint]]:
    """Mini-batch SGD with lr_t = lr0 / (1 + decay * t).

    Returns updated parameters (the input is untouched) and the per-step
    loss history (loss is measured on the batch before its update).
    Deterministic for a fixed seed; `schedule` overrides the seeded one.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    p = params.copy()
    dtype = p.dtype
    maps = np.ascontiguousarray(data.maps, dtype=dtype)
    extras = np.ascontiguousarray(data.extras, dtype=dtype)
    targets = np.ascontiguousarray(data.targets, dtype=dtype)
    if schedule is None:
        schedule = batch_schedule(len(data), cfg.batch_size, cfg.steps, cfg.seed)
    history: list[LossPoint] = []
    for t, idx in enumerate(schedule):
        lr = cfg.lr0 / (1.0 + cfg.decay * t)
        out, caches = _run(p, maps[idx], extras[idx], keep_cache=True)
        err = out - targets[idx]
        loss = float(np.mean(err.astype(np.float64) ** 2))
        if not math.isfinite(loss):
            raise DivergenceError(t)
        grads = _backward(p, caches, (2.0 * err / err.size).astype(dtype))
        for arr, g in zip(p.arrays(), grads.arrays()):
            arr -= dtype.type(lr) * g
        history.append(LossPoint(t, lr, loss))
        if on_step is not None:
            on_step(t, lr, loss)
    return p, history


def export_loss_history(history: list[LossPoint], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,lr,loss\n")
        for pt in history:
            f.write(f"{pt.step},{pt.lr!r},{pt.loss!r}\n")


# --- gradient checking ------------------------------------------------------------

def grad_check(params: NetworkParams, map_in, extra, target, eps: float = 1e-5) -> float:
    """Max relative disagreement between analytic gradients and central
    finite differences, over every parameter.

    Per element: |ga - gn| / max(|ga|, |gn|), treated as 0 when both are
    below 1e-6. Run with float64 parameters and a reduced architecture;
    full-size networks make the finite-difference loop impractical.
    Pre-activations exactly on a ReLU kink (e.g. zero biases with a zero
    input) make the one-sided difference disagree with the subgradient;
    check at generic parameter positions.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = params.astype(np.float64)
    maps = np.asarray(map_in, dtype=np.float64)[None]
    extras = np.asarray(extra, dtype=np.float64)[None]
    tgt = np.asarray(target, dtype=np.float64).reshape(1, -1)

    out, caches = _run(p, maps, extras, keep_cache=True)
    err = out - tgt
    analytic = _backward(p, caches, 2.0 * err / err.size)

    def loss_now() -> float:
        o = forward_batch(p, maps, extras)
        return float(np.mean((o - tgt) ** 2))

    worst = 0.0
    for arr, ga in zip(p.arrays(), analytic.arrays()):
        flat = arr.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_now()
            flat[i] = orig - eps
            lo = loss_now()
            flat[i] = orig
            gn = (hi - lo) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(gn))
            if denom > _GRAD_CHECK_FLOOR:
                worst = max(worst, abs(gflat[i] - gn) / denom)
    return worst


# --- parameter serialization --------------------------------------------------------

def save_params(params: NetworkParams, path) -> None:
    """Binary format: magic, u32 version, then each array in fixed order as
    u32 rank, u32 dims, little-endian float32 values."""
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<I", PARAMS_VERSION))
        for arr in params.arrays():
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> NetworkParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:8] != PARAMS_MAGIC:
        raise ParamsMagicError("not a parameter file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != PARAMS_VERSION:
        raise ParamsVersionError(f"unsupported parameter version {version}")
    off = 12
    arrays = []
    while off < len(blob):
        if off + 4 > len(blob):
            raise ParamsTruncatedError("file ends inside an array header")
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        if rank not in (1, 2, 4):
            raise ParamsShapeError(f"array rank {rank} is not one of 1, 2, 4")
        if off + 4 * rank > len(blob):
            raise ParamsTruncatedError("file ends inside array dimensions")
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = math.prod(dims)
        nbytes = 4 * count
        if off + nbytes > len(blob):
            raise ParamsTruncatedError("file ends inside array data")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        arrays.append(arr.copy())
        off += nbytes

    if len(arrays) % 2 != 0 or not arrays:
        raise ParamsShapeError("expected an even number of weight/bias arrays")
    conv_w, conv_b, dense_w, dense_b = [], [], [], []
    for i in range(0, len(arrays), 2):
        w, b = arrays[i], arrays[i + 1]
        if w.ndim == 4:
            if dense_w:
                raise ParamsShapeError("convolution arrays after dense arrays")
            conv_w.append(w)
            conv_b.append(b)
        elif w.ndim == 2:
            dense_w.append(w)
            dense_b.append(b)
        else:
            raise ParamsShapeError(f"array {i} has rank {w.ndim}, expected a weight")
        if b.ndim != 1:
            raise ParamsShapeError(f"array {i + 1} is not a bias vector")
    try:
        return NetworkParams(conv_w, conv_b, dense_w, dense_b)
    except ValueError as e:
        raise ParamsShapeError(str(e)) from None
