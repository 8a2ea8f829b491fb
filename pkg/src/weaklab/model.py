"""The weak bag classifier, written directly in numpy.

An instance scorer (LeNet-style CNN for image/spectrogram tensors, a small MLP
for vectors) maps every instance to two logits and a penultimate embedding.
An aggregation layer turns the per-instance logits of a bag into one bag-level
distribution. Backpropagation is explicit; there is no autodiff dependency.

Class index 1 is the positive (target-present) class throughout.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-12
NUM_OUTPUTS = 2
MLP_HIDDEN = (64, 32)
CNN_CHANNELS = (6, 16)
CNN_KERNEL = 5
CNN_FC = (120, 84)

CKPT_MAGIC = b"WLCK"
CKPT_VERSION = 1


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss or parameter."""


class AggregationMode(str, Enum):
    MEAN_THEN_SOFTMAX = "mean_then_softmax"
    SOFTMAX_THEN_MEAN = "softmax_then_mean"
    SOFTMAX_THEN_MAX = "softmax_then_max"


DEFAULT_MODE = AggregationMode.MEAN_THEN_SOFTMAX


@dataclass
class ModelParams:
    """Ordered parameter tensors. FC weights are stored (out, in)."""

    arch: str
    input_shape: tuple[int, ...]
    tensors: dict[str, np.ndarray]
    init_seed: int = 0

    @property
    def theta_out(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors["fc_out.weight"], self.tensors["fc_out.bias"]

    @property
    def embedding_dim(self) -> int:
        return self.tensors["fc_out.weight"].shape[1]

    def copy(self) -> ModelParams:
        return ModelParams(self.arch, self.input_shape, {k: v.copy() for k, v in self.tensors.items()}, self.init_seed)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _cnn_geometry(input_shape: tuple[int, ...]) -> tuple[int, int, int]:
    if len(input_shape) == 2:
        c, h, w = 1, *input_shape
    elif len(input_shape) == 3:
        c, h, w = input_shape
    else:
        raise ModelError(f"cnn expects (C,H,W) or (H,W) input, got {input_shape}")
    for _ in CNN_CHANNELS:
        h, w = (h - CNN_KERNEL + 1) // 2, (w - CNN_KERNEL + 1) // 2
        if h < 1 or w < 1:
            raise ModelError(f"input {input_shape} too small for the cnn")
    return c, h, w


def default_arch(input_shape: tuple[int, ...]) -> str:
    return "mlp" if len(input_shape) == 1 else "cnn"


def init_params(input_shape: tuple[int, ...], arch: str | None = None, seed: int = 0) -> ModelParams:
    """Seeded uniform(+-sqrt(1/fan_in)) initialization for weights and biases."""
    input_shape = tuple(int(s) for s in input_shape)
    arch = arch or default_arch(input_shape)
    rng = np.random.default_rng(seed)
    t: dict[str, np.ndarray] = {}
    if arch == "mlp":
        widths = (int(np.prod(input_shape)), *MLP_HIDDEN)
        names = [f"fc{i + 1}" for i in range(len(MLP_HIDDEN))]
    elif arch == "cnn":
        c, h, w = _cnn_geometry(input_shape)
        in_ch = c
        for i, out_ch in enumerate(CNN_CHANNELS):
            fan_in = in_ch * CNN_KERNEL * CNN_KERNEL
            t[f"conv{i + 1}.weight"] = _uniform(rng, (out_ch, in_ch, CNN_KERNEL, CNN_KERNEL), fan_in)
            t[f"conv{i + 1}.bias"] = _uniform(rng, (out_ch,), fan_in)
            in_ch = out_ch
        widths = (CNN_CHANNELS[-1] * h * w, *CNN_FC)
        names = [f"fc{i + 1}" for i in range(len(CNN_FC))]
    else:
        raise ModelError(f"unknown arch {arch!r}")
    for name, fan_in, fan_out in zip(names, widths[:-1], widths[1:]):
        t[f"{name}.weight"] = _uniform(rng, (fan_out, fan_in), fan_in)
        t[f"{name}.bias"] = _uniform(rng, (fan_out,), fan_in)
    t["fc_out.weight"] = _uniform(rng, (NUM_OUTPUTS, widths[-1]), widths[-1])
    t["fc_out.bias"] = _uniform(rng, (NUM_OUTPUTS,), widths[-1])
    return ModelParams(arch, input_shape, t, seed)


# --- layers -----------------------------------------------------------------

def _conv_forward(x, w, b):
    k = w.shape[-1]
    cols = sliding_window_view(x, (k, k), axis=(2, 3))  # n, C, H', W', k, k
    out = np.einsum("nchwij,ocij->nohw", cols, w, optimize=True) + b[None, :, None, None]
    return out, cols


def _conv_backward(dout, x, cols, w):
    k = w.shape[-1]
    dw = np.einsum("nohw,nchwij->ocij", dout, cols, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    h, wd = dout.shape[2], dout.shape[3]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + h, j:j + wd] += np.einsum("nohw,oc->nchw", dout, w[:, :, i, j], optimize=True)
    return dx, dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, :, : 2 * h2, : 2 * w2]
    win = xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, in_shape):
    n, c, h, w = in_shape
    h2, w2 = dout.shape[2], dout.shape[3]
    dwin = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, :, : 2 * h2, : 2 * w2] = (
        dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    )
    return dx


def _fc_names(params: ModelParams) -> list[str]:
    return sorted(
        {k.split(".")[0] for k in params.tensors if k.startswith("fc") and not k.startswith("fc_out")},
        key=lambda s: int(s[2:]),
    )


def forward_instances(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict[str, Any]]:
    """Score a stack of instances (n, *input_shape) -> logits (n, 2), embeddings (n, E), cache."""
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:]) != params.input_shape:
        raise ModelError(f"input shape {tuple(x.shape[1:])} does not match model {params.input_shape}")
    t = params.tensors
    cache: dict[str, Any] = {"n": x.shape[0]}
    if params.arch == "cnn":
        h = x[:, None] if len(params.input_shape) == 2 else x
        for i in range(len(CNN_CHANNELS)):
            name = f"conv{i + 1}"
            z, cols = _conv_forward(h, t[f"{name}.weight"], t[f"{name}.bias"])
            a = np.maximum(z, 0.0)
            p, arg = _pool_forward(a)
            cache[name] = (h, cols, z, a.shape, arg)
            h = p
        cache["flat_shape"] = h.shape
        h = h.reshape(h.shape[0], -1)
    else:
        h = x.reshape(x.shape[0], -1)
    for name in _fc_names(params):
        z = h @ t[f"{name}.weight"].T + t[f"{name}.bias"]
        cache[name] = (h, z)
        h = np.maximum(z, 0.0)
    logits = h @ t["fc_out.weight"].T + t["fc_out.bias"]
    cache["embedding"] = h
    return logits, h, cache


def backward_instances(params: ModelParams, cache: dict[str, Any], dlogits: np.ndarray) -> dict[str, np.ndarray]:
    t = params.tensors
    grads: dict[str, np.ndarray] = {}
    emb = cache["embedding"]
    grads["fc_out.weight"] = dlogits.T @ emb
    grads["fc_out.bias"] = dlogits.sum(axis=0)
    dh = dlogits @ t["fc_out.weight"]
    for name in reversed(_fc_names(params)):
        h_in, z = cache[name]
        dz = dh * (z > 0)
        grads[f"{name}.weight"] = dz.T @ h_in
        grads[f"{name}.bias"] = dz.sum(axis=0)
        dh = dz @ t[f"{name}.weight"]
    if params.arch == "cnn":
        dh = dh.reshape(cache["flat_shape"])
        for i in reversed(range(len(CNN_CHANNELS))):
            name = f"conv{i + 1}"
            h_in, cols, z, a_shape, arg = cache[name]
            da = _pool_backward(dh, arg, a_shape)
            dz = da * (z > 0)
            dh, grads[f"{name}.weight"], grads[f"{name}.bias"] = _conv_backward(dz, h_in, cols, t[f"{name}.weight"])
    return {k: grads[k] for k in t}


def forward_instance(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits (2,) and embedding (E,) of one instance."""
    logits, emb, _ = forward_instances(params, np.asarray(x)[None])
    return logits[0], emb[0]


# --- aggregation ------------------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(p, dp):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def aggregate_batch(logits: np.ndarray, mode: AggregationMode | str) -> np.ndarray:
    """(bags, N_B, 2) instance logits -> (bags, 2) bag distributions."""
    mode = AggregationMode(mode)
    if logits.ndim != 3 or logits.shape[1] == 0:
        raise ModelError("aggregation needs at least one instance per bag")
    if mode is AggregationMode.MEAN_THEN_SOFTMAX:
        return softmax(logits.mean(axis=1))
    q = softmax(logits)
    if mode is AggregationMode.SOFTMAX_THEN_MEAN:
        return q.mean(axis=1)
    m = q.max(axis=1)
    return m / m.sum(axis=-1, keepdims=True)


def aggregate_backward(logits: np.ndarray, mode: AggregationMode | str, dprobs: np.ndarray) -> np.ndarray:
    """Gradient of a scalar through ``aggregate_batch`` back to the instance logits."""
    mode = AggregationMode(mode)
    nb = logits.shape[1]
    if mode is AggregationMode.MEAN_THEN_SOFTMAX:
        p = softmax(logits.mean(axis=1))
        dz = _softmax_backward(p, dprobs)
        return np.repeat(dz[:, None, :] / nb, nb, axis=1)
    q = softmax(logits)
    if mode is AggregationMode.SOFTMAX_THEN_MEAN:
        dq = np.repeat(dprobs[:, None, :] / nb, nb, axis=1)
    else:
        arg = q.argmax(axis=1)  # (bags, 2); ties go to the first instance
        m = np.take_along_axis(q, arg[:, None, :], axis=1)[:, 0]
        s = m.sum(axis=-1, keepdims=True)
        p = m / s
        dm = (dprobs - (dprobs * p).sum(axis=-1, keepdims=True)) / s
        dq = np.zeros_like(q)
        np.put_along_axis(dq, arg[:, None, :], dm[:, None, :], axis=1)
    return _softmax_backward(q, dq)


def aggregate(per_instance: np.ndarray, mode: AggregationMode | str = DEFAULT_MODE) -> np.ndarray:
    """Aggregate one bag's (N_B, 2) instance logits into a bag distribution."""
    per_instance = np.asarray(per_instance, dtype=np.float64)
    if per_instance.ndim != 2 or per_instance.shape[0] == 0:
        raise ModelError("empty input: aggregation needs at least one instance")
    return aggregate_batch(per_instance[None], mode)[0]


# --- bag level --------------------------------------------------------------

@dataclass
class BagOutput:
    """Forward result for one bag, or a batch of bags when arrays carry a leading axis."""

    instance_probs: np.ndarray
    bag_probs: np.ndarray
    embedding: np.ndarray
    mode: AggregationMode = DEFAULT_MODE
    logits: np.ndarray | None = field(default=None, repr=False)
    cache: dict[str, Any] | None = field(default=None, repr=False)

    def __getitem__(self, i: int) -> BagOutput:
        return BagOutput(
            self.instance_probs[i], self.bag_probs[i], self.embedding[i], self.mode,
            None if self.logits is None else self.logits[i],
        )

    def __len__(self) -> int:
        return self.bag_probs.shape[0] if self.bag_probs.ndim == 2 else 1


def forward_bags(params: ModelParams, bags: np.ndarray, mode: AggregationMode | str = DEFAULT_MODE, keep_cache: bool = False) -> BagOutput:
    """Forward a stack of bags (bags, N_B, *input_shape)."""
    mode = AggregationMode(mode)
    bags = np.asarray(bags, dtype=np.float64)
    nbags, nb = bags.shape[:2]
    logits, emb, cache = forward_instances(params, bags.reshape(nbags * nb, *bags.shape[2:]))
    logits = logits.reshape(nbags, nb, NUM_OUTPUTS)
    return BagOutput(
        instance_probs=softmax(logits),
        bag_probs=aggregate_batch(logits, mode),
        embedding=emb.reshape(nbags, nb, -1).mean(axis=1),
        mode=mode,
        logits=logits,
        cache=cache if keep_cache else None,
    )


def forward_bag(params: ModelParams, bag: np.ndarray, mode: AggregationMode | str = DEFAULT_MODE) -> BagOutput:
    """Forward one bag (N_B, *input_shape)."""
    bag = np.asarray(bag)
    if bag.ndim == 0 or bag.shape[0] == 0:
        raise ModelError("bag has no instances")
    return forward_bags(params, bag[None], mode)[0]


def predict_bags(params: ModelParams, bags: np.ndarray, mode: AggregationMode | str = DEFAULT_MODE, chunk: int = 256) -> BagOutput:
    """Chunked, cache-free forward over many bags."""
    parts = [forward_bags(params, bags[i:i + chunk], mode) for i in range(0, len(bags), chunk)]
    if not parts:
        raise ModelError("no bags to predict")
    return BagOutput(
        np.concatenate([p.instance_probs for p in parts]),
        np.concatenate([p.bag_probs for p in parts]),
        np.concatenate([p.embedding for p in parts]),
        AggregationMode(mode),
    )


def _check_target(target: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.shape[-1] != NUM_OUTPUTS or np.any(target < 0) or not np.allclose(target.sum(axis=-1), 1.0, atol=1e-6):
        raise ModelError(f"invalid soft target {target!r}: needs nonnegative length-2 rows summing to 1")
    return target


def bag_loss(output: BagOutput | np.ndarray, target: np.ndarray) -> float:
    """Cross-entropy -sum_c t_c log(p_c + 1e-12); mean over bags for batched input."""
    probs = output.bag_probs if isinstance(output, BagOutput) else np.asarray(output, dtype=np.float64)
    target = _check_target(target)
    per_bag = -(target * np.log(probs + EPS)).sum(axis=-1)
    return float(np.mean(per_bag))


def loss_and_grads(params: ModelParams, bags: np.ndarray, targets: np.ndarray, mode: AggregationMode | str = DEFAULT_MODE) -> tuple[float, dict[str, np.ndarray]]:
    """Mean bag cross-entropy over the batch and its gradient for every tensor."""
    targets = _check_target(targets)
    out = forward_bags(params, bags, mode, keep_cache=True)
    p = out.bag_probs
    loss = float(np.mean(-(targets * np.log(p + EPS)).sum(axis=-1)))
    dprobs = -targets / (p + EPS) / p.shape[0]
    dlogits = aggregate_backward(out.logits, mode, dprobs)
    grads = backward_instances(params, out.cache, dlogits.reshape(-1, NUM_OUTPUTS))
    return loss, grads


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def train_step(
    params: ModelParams,
    state: AdamState,
    bags: np.ndarray,
    targets: np.ndarray,
    lr: float = 1e-3,
    weight_decay: float = 5e-7,
    mode: AggregationMode | str = DEFAULT_MODE,
) -> float:
    """One Adam update in place; L2 weight decay is added to the gradient. Returns the mean loss."""
    if len(bags) == 0:
        raise ModelError("empty batch")
    # overflow shows up as a non-finite loss below, no need for numpy's warning too
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads = loss_and_grads(params, bags, targets, mode)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, w in params.tensors.items():
        g = grads[name] + weight_decay * w
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.step)
        v_hat = v / (1 - b2 ** state.step)
        w -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if not np.all(np.isfinite(w)):
            raise TrainingDiverged(f"parameter {name} became non-finite at step {state.step}")
    return loss


def last_layer_gradient(output: BagOutput) -> np.ndarray:
    """Cross-entropy gradient at the output layer under the model's own pseudo-label.

    Returns the flattened (weight block, bias block) of length 2*(E+1), or a
    (bags, 2*(E+1)) matrix for batched output. Only defined for
    mean_then_softmax, where bag logits are linear in the output layer.
    """
    if AggregationMode(output.mode) is not AggregationMode.MEAN_THEN_SOFTMAX:
        raise ModelError("gradient embedding defined for mean_then_softmax")
    probs = np.atleast_2d(output.bag_probs)
    emb = np.atleast_2d(output.embedding)
    pseudo = probs.argmax(axis=1)  # argmax returns the first index on ties -> class 0
    delta = probs - np.eye(NUM_OUTPUTS)[pseudo]
    weight = delta[:, :, None] * emb[:, None, :]
    g = np.concatenate([weight.reshape(len(probs), -1), delta], axis=1)
    return g[0] if output.bag_probs.ndim == 1 else g


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParams, mode: AggregationMode | str = DEFAULT_MODE, epoch: int = 0) -> None:
    """Header JSON plus raw little-endian float32 tensors, in tensor order."""
    header = {
        "arch": params.arch,
        "input_shape": list(params.input_shape),
        "init_seed": params.init_seed,
        "epoch": epoch,
        "aggregation": AggregationMode(mode).value,
        "tensors": [[name, list(t.shape)] for name, t in params.tensors.items()],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ModelError(f"{path} is not a weaklab checkpoint")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    offset = 10
    header = json.loads(data[offset:offset + hlen])
    offset += hlen
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * n
    if offset != len(data):
        raise ModelError(f"checkpoint {path} has {len(data) - offset} trailing bytes")
    params = ModelParams(header["arch"], tuple(header["input_shape"]), tensors, header["init_seed"])
    return params, header
