"""Small fixed-topology MLPs with hand-written backward passes, Adam and a Gaussian head.

All arrays are float64. Inputs are batched as ``(n, in_features)``; gradients
returned by :func:`backward` are summed over the batch in index order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError, NonFiniteLossError

ACTIVATIONS = ("relu", "tanh")
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class NetParams:
    layer_sizes: list
    activation: str
    weights: list
    biases: list

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise InvalidInputError("layer count mismatch")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[k], self.layer_sizes[k + 1]) or b.shape != (W.shape[1],):
                raise InvalidInputError(f"layer {k} has shape {W.shape}, bias {b.shape}")

    @property
    def arrays(self):
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self):
        return NetParams(list(self.layer_sizes), self.activation,
                         [W.copy() for W in self.weights], [b.copy() for b in self.biases])


def init_mlp(layer_sizes, activation, rng):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases."""
    layer_sizes = [int(s) for s in layer_sizes]
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetParams(layer_sizes, activation, weights, biases)


@dataclass
class Cache:
    params_id: int
    inputs: list
    pre: list
    squeeze: bool = False


def forward(params, x):
    """Affine layers with the hidden activation; the output layer is linear."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != params.layer_sizes[0]:
        raise InvalidInputError(f"expected {params.layer_sizes[0]} inputs, got {x.shape[-1]}")
    inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        if k < last:
            h = np.maximum(z, 0.0) if params.activation == "relu" else np.tanh(z)
        else:
            h = z
    cache = Cache(id(params), inputs, pre, squeeze)
    return (h[0] if squeeze else h), cache


def backward(params, cache, output_grad, param_grads=True):
    """Reverse-mode gradients of sum(output * output_grad).

    Returns ``(param_grads, input_grad)`` where ``param_grads`` follows
    :attr:`NetParams.arrays` ordering (``None`` when ``param_grads`` is false).
    """
    if cache.params_id != id(params) or len(cache.pre) != len(params.weights):
        raise InvalidInputError("cache does not belong to these parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise InvalidInputError(f"output_grad shape {g.shape} != output shape {cache.pre[-1].shape}")
    grads = [None] * (2 * len(params.weights))
    last = len(params.weights) - 1
    for k in range(last, -1, -1):
        if k < last:
            z = cache.pre[k]
            if params.activation == "relu":
                g = g * (z > 0)
            else:
                t = np.tanh(z)
                g = g * (1.0 - t * t)
        if param_grads:
            grads[2 * k] = cache.inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return (grads if param_grads else None), (g[0] if cache.squeeze else g)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def init_adam(params, lr):
    return AdamState([np.zeros_like(a) for a in params.arrays],
                     [np.zeros_like(a) for a in params.arrays], lr=float(lr))


def adam_step(state, params, grads):
    """One bias-corrected Adam update, in place. Refuses non-finite gradients."""
    arrays = params.arrays
    if len(grads) != len(arrays):
        raise InvalidInputError("gradient list does not match parameters")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != parameter shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError("non-finite gradient; Adam update refused")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_grad_norm(grads, max_norm):
    """Scale a list of gradient arrays so their global L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        grads = [g * scale for g in grads]
    return grads, total


def add_grads(acc, grads):
    if acc is None:
        return [g.copy() for g in grads]
    for a, g in zip(acc, grads):
        a += g
    return acc


# ---------------------------------------------------------------------------
# Gaussian head


@dataclass
class GaussianHead:
    mean: np.ndarray
    log_std: np.ndarray
    raw_log_std: np.ndarray = field(default=None, repr=False)

    @property
    def std(self):
        return np.exp(self.log_std)


def split_head(output):
    """Split an actor output ``(..., 2d)`` into mean and clamped log-std."""
    output = np.asarray(output, dtype=np.float64)
    d = output.shape[-1] // 2
    raw = output[..., d:]
    return GaussianHead(output[..., :d], np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw)


def sample_reparameterized(head, noise):
    """mean + exp(log_std) * noise with caller-supplied standard-normal noise."""
    return head.mean + np.exp(head.log_std) * noise


def reparameterized_grad(head, noise, x_grad):
    """Back-propagate ``x_grad`` through :func:`sample_reparameterized`.

    Returns the gradient with respect to the raw actor output (mean half and
    log-std half); the log-std clamp passes zero gradient outside its range.
    """
    g_mean = x_grad
    g_log_std = x_grad * np.exp(head.log_std) * noise
    if head.raw_log_std is not None:
        g_log_std = g_log_std * ((head.raw_log_std >= LOG_STD_MIN) & (head.raw_log_std <= LOG_STD_MAX))
    return np.concatenate([g_mean, g_log_std], axis=-1)


def log_prob(head, x):
    """Diagonal-Gaussian log density, summed over the last axis."""
    z = (np.asarray(x) - head.mean) * np.exp(-head.log_std)
    return (-0.5 * z * z - head.log_std - 0.5 * _LOG_2PI).sum(axis=-1)


def log_prob_grads(mean, std, x):
    """Gradients of the diagonal-Gaussian log density w.r.t. mean and std."""
    z = (x - mean) / std
    return z / std, (z * z - 1.0) / std


def gaussian_log_density(mean, std, x):
    z = (x - mean) / std
    return (-0.5 * z * z - np.log(std) - 0.5 * _LOG_2PI).sum(axis=-1)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MIDTREE\x00"
FORMAT_VERSION = 1


def _adam_entries(name, state):
    out = []
    for k, (m, v) in enumerate(zip(state.m, state.v)):
        out.append((f"adam/{name}/m/{k}", m))
        out.append((f"adam/{name}/v/{k}", v))
    return out


def save_checkpoint(path, nets, adams=None, d_rep=None, meta=None, extra_arrays=None):
    """Write networks, optimizer moments and metadata to one binary file.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header, then every array as row-major little-endian float64 in header order.
    """
    adams = adams or {}
    extra_arrays = extra_arrays or {}
    entries = []
    header = {"format_version": FORMAT_VERSION, "d_rep": d_rep, "networks": [], "adam": [],
              "meta": meta or {}, "arrays": []}
    for name in sorted(nets):
        p = nets[name]
        header["networks"].append({"name": name, "layer_sizes": list(p.layer_sizes),
                                   "activation": p.activation})
        for k, a in enumerate(p.arrays):
            entries.append((f"net/{name}/{k}", a))
    for name in sorted(adams):
        s = adams[name]
        header["adam"].append({"name": name, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2,
                               "eps": s.eps, "step": s.step})
        entries += _adam_entries(name, s)
    for name in sorted(extra_arrays):
        entries.append((f"extra/{name}", np.asarray(extra_arrays[name], dtype=np.float64)))
    header["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in entries]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (nets, adams, header, extra_arrays)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise InvalidInputError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(data[off: off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(data):
        raise InvalidInputError("trailing bytes in checkpoint")
    nets = {}
    for spec in header["networks"]:
        name = spec["name"]
        n_layers = len(spec["layer_sizes"]) - 1
        flat = [arrays[f"net/{name}/{k}"] for k in range(2 * n_layers)]
        nets[name] = NetParams(spec["layer_sizes"], spec["activation"], flat[0::2], flat[1::2])
    adams = {}
    for spec in header["adam"]:
        name = spec["name"]
        count = len(nets[name].arrays) if name in nets else sum(
            1 for k in arrays if k.startswith(f"adam/{name}/m/"))
        adams[name] = AdamState([arrays[f"adam/{name}/m/{k}"] for k in range(count)],
                                [arrays[f"adam/{name}/v/{k}"] for k in range(count)],
                                lr=spec["lr"], beta1=spec["beta1"], beta2=spec["beta2"],
                                eps=spec["eps"], step=spec["step"])
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return nets, adams, header, extra
