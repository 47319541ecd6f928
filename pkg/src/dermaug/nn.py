"""Small CNN core with exact reverse-mode gradients, in float64 numpy.

The model is deliberately tiny: a few conv stages, each
``conv 3x3 -> ReLU -> channel-attention (squeeze/excite) -> 2x2 avg pool``,
then global average pooling and a linear head. It trains in seconds while
still exercising the channel-attention mechanism that matters here.

Everything is functional: ``forward`` returns the activations cache that
``backward`` consumes, parameters live in a :class:`ParamSet`, and a
finite-difference checker (:func:`grad_check`) validates every analytic
gradient. 64-bit arithmetic throughout; gradient checks are meaningless at
32-bit tolerances.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, StaleCacheError
from .rng import RngStream
from .types import NUM_CLASSES, SoftLabel

_PARAMS_MAGIC = b"DAPS0001"


# ---------------------------------------------------------------------------
# Parameters


class ParamSet:
    """Named map of float64 parameter tensors.

    Mutating updates (SGD, EMA) bump ``version`` so that stale forward
    caches can be detected by ``backward``.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self._tensors = {
            str(k): np.ascontiguousarray(v, dtype=np.float64) for k, v in tensors.items()
        }
        self.version = 0

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._tensors.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._tensors.items()})

    def shape_compatible(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            self[k].shape == other[k].shape for k in self.names()
        )

    def touch(self) -> None:
        self.version += 1

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParamSet)
            and self.names() == other.names()
            and all(np.array_equal(self[k], other[k]) for k in self.names())
        )


def save_params(params: ParamSet, path: Path) -> None:
    """Write a flat binary container: name/shape table, then raw float64 LE."""
    head = bytearray(_PARAMS_MAGIC)
    head += struct.pack("<I", len(params))
    payload = bytearray()
    for name, tensor in params.items():
        enc = name.encode("utf-8")
        head += struct.pack("<H", len(enc)) + enc
        head += struct.pack("<B", tensor.ndim)
        head += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        payload += tensor.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(head) + bytes(payload))


def load_params(path: Path) -> ParamSet:
    data = Path(path).read_bytes()
    if data[:8] != _PARAMS_MAGIC:
        raise ShapeError(f"{path}: not a parameter container (bad magic)")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    metas: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        metas.append((name, tuple(shape)))
    tensors = {}
    for name, shape in metas:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
        tensors[name] = arr.copy()
        pos += 8 * n
    if pos != len(data):
        raise ShapeError(f"{path}: trailing bytes after parameter payload")
    return ParamSet(tensors)


# ---------------------------------------------------------------------------
# Model specification


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: input side length, conv stage widths,
    squeeze/excite reduction, and the (fixed) number of classes."""

    input_size: int = 32
    channels: tuple[int, ...] = (8, 16, 32)
    se_reduction: int = 4
    class_count: int = NUM_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2:
            raise ShapeError("model needs at least 2 conv stages")
        if self.se_reduction < 1:
            raise ShapeError("se_reduction must be >= 1")
        for c in self.channels:
            if c < 1 or c % self.se_reduction:
                raise ShapeError(
                    f"stage width {c} must be a positive multiple of "
                    f"se_reduction={self.se_reduction}"
                )
        down = 2 ** len(self.channels)
        if self.input_size < down or self.input_size % down:
            raise ShapeError(
                f"input_size {self.input_size} must be a multiple of {down} "
                f"(one 2x2 pool per stage)"
            )
        if self.class_count != NUM_CLASSES:
            raise ShapeError(f"class_count must be {NUM_CLASSES}")


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for i, cout in enumerate(spec.channels):
        shapes[f"stage{i}.conv_w"] = (cout, cin, 3, 3)
        shapes[f"stage{i}.conv_b"] = (cout,)
        shapes[f"stage{i}.se_reduce"] = (cout, cout // spec.se_reduction)
        shapes[f"stage{i}.se_expand"] = (cout // spec.se_reduction, cout)
        cin = cout
    shapes["head.fc_w"] = (cin, spec.class_count)
    shapes["head.fc_b"] = (spec.class_count,)
    return shapes


def init_params(spec: ModelSpec, rng: RngStream) -> ParamSet:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    tensors = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
            continue
        if len(shape) == 4:  # conv: (out, in, kh, kw)
            fan_in = shape[1] * shape[2] * shape[3]
            fan_out = shape[0] * shape[2] * shape[3]
        else:  # matrices applied as x @ w: (in, out)
            fan_in, fan_out = shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-bound, bound, shape)
    return ParamSet(tensors)


# ---------------------------------------------------------------------------
# Layers


def _conv3x3_forward(x, w, b):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    y = np.tensordot(win, w, axes=((1, 4, 5), (1, 2, 3)))  # (N, H, W, O)
    y = np.moveaxis(y, 3, 1) + b[None, :, None, None]
    return y, (xp, w)


def _conv3x3_backward(dy, cache):
    xp, w = cache
    n, o, h, wd = dy.shape
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    db = dy.sum(axis=(0, 2, 3))
    dw = np.tensordot(dy, win, axes=((0, 2, 3), (0, 2, 3)))  # (O, C, 3, 3)
    dxp = np.zeros_like(xp)
    for ky in range(3):
        for kx in range(3):
            contrib = np.tensordot(dy, w[:, :, ky, kx], axes=((1,), (0,)))  # (N,H,W,C)
            dxp[:, :, ky : ky + h, kx : kx + wd] += np.moveaxis(contrib, 3, 1)
    return dxp[:, :, 1 : 1 + h, 1 : 1 + wd], dw, db


def _se_forward(x, reduce_w, expand_w):
    n, c, h, w = x.shape
    z = x.mean(axis=(2, 3))  # squeeze: (N, C)
    pre_r = z @ reduce_w
    hidden = np.maximum(pre_r, 0.0)
    pre_e = hidden @ expand_w
    # sigmoid via tanh: stable for large |pre_e|, each entry in (0, 1)
    gate = 0.5 * (1.0 + np.tanh(0.5 * pre_e))
    y = x * gate[:, :, None, None]
    return y, (x, z, pre_r, hidden, gate, reduce_w, expand_w)


def _se_backward(dy, cache):
    x, z, pre_r, hidden, gate, reduce_w, expand_w = cache
    h, w = x.shape[2], x.shape[3]
    dgate = (dy * x).sum(axis=(2, 3))
    dx = dy * gate[:, :, None, None]
    dpre_e = dgate * gate * (1.0 - gate)
    dexpand = hidden.T @ dpre_e
    dhidden = dpre_e @ expand_w.T
    dpre_r = dhidden * (pre_r > 0)
    dreduce = z.T @ dpre_r
    dz = dpre_r @ reduce_w.T
    dx = dx + dz[:, :, None, None] / (h * w)
    return dx, dreduce, dexpand


def se_block_forward(features: np.ndarray, reduce_w: np.ndarray, expand_w: np.ndarray) -> np.ndarray:
    """Channel attention: per-channel gate in (0, 1) scaling the features.

    squeeze: spatial mean per channel; excite: bottleneck MLP with a
    sigmoid; output[n, c] = gate[n, c] * features[n, c].
    """
    c = features.shape[1]
    if reduce_w.shape[0] != c or expand_w.shape[1] != c or reduce_w.shape[1] != expand_w.shape[0]:
        raise ShapeError(
            f"se block: features have {c} channels but weights are "
            f"{reduce_w.shape} / {expand_w.shape}"
        )
    return _se_forward(features, reduce_w, expand_w)[0]


def _avgpool2_forward(x):
    n, c, h, w = x.shape
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return y, (h, w)


def _avgpool2_backward(dy, cache):
    h, w = cache
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


# ---------------------------------------------------------------------------
# Full model


def forward(params: ParamSet, spec: ModelSpec, batch: np.ndarray):
    """Run the model on a (N, 3, H, W) batch; returns (logits, cache).

    Deterministic in (params, batch). The cache holds every activation the
    backward pass needs plus the parameter version it was computed from.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeError(f"input: batch must be (N, 3, H, W), got {batch.shape}")
    if batch.shape[2] != spec.input_size or batch.shape[3] != spec.input_size:
        raise ShapeError(
            f"input: expected {spec.input_size}x{spec.input_size} images, "
            f"got {batch.shape[2]}x{batch.shape[3]}"
        )
    expected = param_shapes(spec)
    if set(params.names()) != set(expected):
        raise ShapeError("params do not match the model spec's tensor table")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(
                f"{name}: expected shape {shape}, got {params[name].shape}"
            )

    x = batch
    stage_caches = []
    for i in range(len(spec.channels)):
        y, conv_cache = _conv3x3_forward(x, params[f"stage{i}.conv_w"], params[f"stage{i}.conv_b"])
        relu_mask = y > 0
        a = y * relu_mask
        s, se_cache = _se_forward(a, params[f"stage{i}.se_reduce"], params[f"stage{i}.se_expand"])
        x, pool_cache = _avgpool2_forward(s)
        stage_caches.append((conv_cache, relu_mask, se_cache, pool_cache))
    n, c, h, w = x.shape
    z = x.mean(axis=(2, 3))  # global average pool: (N, C)
    logits = z @ params["head.fc_w"] + params["head.fc_b"]
    cache = {
        "spec": spec,
        "params": params,
        "version": params.version,
        "stages": stage_caches,
        "gap": (h, w),
        "z": z,
    }
    return logits, cache


def backward(cache: dict, dlogits: np.ndarray) -> ParamSet:
    """Exact gradients of every parameter given d(loss)/d(logits)."""
    params: ParamSet = cache["params"]
    if params.version != cache["version"]:
        raise StaleCacheError(
            "forward cache predates a parameter update; rerun forward"
        )
    spec: ModelSpec = cache["spec"]
    z = cache["z"]
    grads: dict[str, np.ndarray] = {}
    grads["head.fc_b"] = dlogits.sum(axis=0)
    grads["head.fc_w"] = z.T @ dlogits
    dz = dlogits @ params["head.fc_w"].T
    h, w = cache["gap"]
    dx = np.repeat((dz / (h * w))[:, :, None, None], h, axis=2).repeat(w, axis=3)
    for i in reversed(range(len(spec.channels))):
        conv_cache, relu_mask, se_cache, pool_cache = cache["stages"][i]
        ds = _avgpool2_backward(dx, pool_cache)
        da, dreduce, dexpand = _se_backward(ds, se_cache)
        grads[f"stage{i}.se_reduce"] = dreduce
        grads[f"stage{i}.se_expand"] = dexpand
        dy = da * relu_mask
        dx, dw, db = _conv3x3_backward(dy, conv_cache)
        grads[f"stage{i}.conv_w"] = dw
        grads[f"stage{i}.conv_b"] = db
    return ParamSet({name: grads[name] for name in params.names()})


# ---------------------------------------------------------------------------
# Losses


def as_label_matrix(targets) -> np.ndarray:
    """Stack SoftLabels (or pass through an (N, 7) array) as float64."""
    if isinstance(targets, np.ndarray):
        t = np.asarray(targets, dtype=np.float64)
    else:
        t = np.stack([lab.probs if isinstance(lab, SoftLabel) else lab for lab in targets])
    if t.ndim != 2 or t.shape[1] != NUM_CLASSES:
        raise ShapeError(f"targets must be (N, {NUM_CLASSES}), got {t.shape}")
    return t


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stabilized softmax; rows are valid probability vectors."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Chain dL/d(probs) through the softmax to dL/d(logits)."""
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def softmax_cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against soft targets, with its logit gradient.

    ``loss = -(1/N) sum_n sum_k t[n,k] * log softmax(logits[n])[k]`` and
    ``dlogits = (softmax(logits) - t) / N``, stabilized with log-sum-exp.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in cross entropy")
    t = as_label_matrix(targets)
    if t.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {t.shape}")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-(t * log_probs).sum() / n)
    dlogits = (np.exp(log_probs) - t) / n
    return loss, dlogits


def mse_consistency(student_probs: np.ndarray, teacher_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference between two prediction matrices.

    The teacher side is treated as constant: the returned gradient is with
    respect to ``student_probs`` only.
    """
    s = np.asarray(student_probs, dtype=np.float64)
    t = np.asarray(teacher_probs, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"student {s.shape} vs teacher {t.shape}")
    diff = s - t
    loss = float((diff**2).mean())
    dstudent = 2.0 * diff / diff.size
    return loss, dstudent


# ---------------------------------------------------------------------------
# Optimizer


def sgd_update(
    params: ParamSet,
    grads: ParamSet,
    lr: float,
    momentum: float,
    velocity: ParamSet,
) -> tuple[ParamSet, ParamSet]:
    """Heavy-ball SGD: v <- momentum*v + g; p <- p - lr*v. In place."""
    if not (params.shape_compatible(grads) and params.shape_compatible(velocity)):
        raise ShapeError("params, grads and velocity must be shape-compatible")
    for name, p in params.items():
        v = velocity[name]
        v *= momentum
        v += grads[name]
        p -= lr * v
    params.touch()
    velocity.touch()
    return params, velocity


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def _relu_signature(cache: dict) -> list[np.ndarray]:
    """Activation pattern of every ReLU in the network (stage and SE)."""
    sig = []
    for conv_cache, relu_mask, se_cache, _pool in cache["stages"]:
        sig.append(relu_mask)
        sig.append(se_cache[2] > 0)  # pre-activation of the SE bottleneck
    return sig


def _same_signature(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    spec: ModelSpec,
    seed: int,
    coords_per_tensor: int = 200,
    batch_size: int = 4,
    eps: float = 1e-4,
) -> float:
    """Compare analytic gradients against central finite differences.

    Builds random parameters, a random batch and random soft targets, then
    perturbs a random subsample of coordinates in every tensor (at least
    ``coords_per_tensor``, or the whole tensor if smaller) and returns the
    worst relative error observed. Deterministic in (spec, seed).

    Central differences are meaningful only where the loss is smooth
    across the probe interval, and this network is piecewise-smooth in its
    ReLUs. Probes that flip any ReLU activation pattern measure a kink,
    not the derivative, so such coordinates are skipped; random inputs
    leave the large majority of coordinates kink-free.
    """
    rng = RngStream(seed, 17)
    params = init_params(spec, rng.substream(0))
    batch = rng.substream(1).uniform(-1.0, 1.0, (batch_size, 3, spec.input_size, spec.input_size))
    raw = rng.substream(2).uniform(0.05, 1.0, (batch_size, NUM_CLASSES))
    targets = raw / raw.sum(axis=1, keepdims=True)

    def probe(p: ParamSet) -> tuple[float, list[np.ndarray]]:
        logits, cache = forward(p, spec, batch)
        return softmax_cross_entropy(logits, targets)[0], _relu_signature(cache)

    logits, cache = forward(params, spec, batch)
    _, dlogits = softmax_cross_entropy(logits, targets)
    analytic = backward(cache, dlogits)
    base_sig = _relu_signature(cache)

    worst = 0.0
    pick = rng.substream(3)
    for tensor_idx, (name, tensor) in enumerate(params.items()):
        flat = tensor.reshape(-1)
        size = flat.shape[0]
        k = min(coords_per_tensor, size)
        coords = pick.substream(tensor_idx).permutation(size)[:k]
        ana_flat = analytic[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi, sig_hi = probe(params)
            flat[c] = orig - eps
            lo, sig_lo = probe(params)
            flat[c] = orig
            if not (_same_signature(sig_hi, base_sig) and _same_signature(sig_lo, base_sig)):
                continue
            numeric = (hi - lo) / (2.0 * eps)
            a = ana_flat[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if rel > worst:
                worst = rel
    return worst
