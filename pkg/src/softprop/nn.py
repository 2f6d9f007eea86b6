"""Small dense-network engine: MLP forward/backward, Adam, and checkpoints.

Only the primitives the pipeline needs gradients for live here: affine
layers with relu/tanh, max-pool over a set axis, and concatenation (which
needs no code, just slicing the upstream gradient). Everything is float64
and allocation order is fixed, so training is bitwise reproducible for a
given seed, architecture, and data stream.

The ReLU subgradient at exactly 0 is taken to be 0.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

_ACTIVATIONS = ("relu", "tanh", "linear")

_MAGIC = b"KSNN"
_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a feedforward net: layer widths plus one activation per layer."""

    sizes: tuple  # (d_in, h1, ..., d_out), len >= 2
    activations: tuple  # len(sizes) - 1 entries; the last must be "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        acts = tuple(str(a) for a in self.activations)
        if len(sizes) < 2:
            raise ValueError("MlpSpec: need at least input and output widths")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"MlpSpec: non-positive width in {sizes}")
        if len(acts) != len(sizes) - 1:
            raise ValueError(
                f"MlpSpec: {len(sizes) - 1} layers but {len(acts)} activations"
            )
        for a in acts:
            if a not in _ACTIVATIONS:
                raise ValueError(f"MlpSpec: unknown activation {a!r}")
        if acts[-1] != "linear":
            raise ValueError("MlpSpec: output layer must be linear")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "activations", acts)

    @staticmethod
    def dense(sizes, hidden="relu"):
        """Uniform hidden activation, linear output."""
        sizes = tuple(sizes)
        return MlpSpec(sizes, tuple([hidden] * (len(sizes) - 2)) + ("linear",))

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def d_in(self):
        return self.sizes[0]

    @property
    def d_out(self):
        return self.sizes[-1]

    @property
    def n_params(self):
        return sum(
            self.sizes[i] * self.sizes[i + 1] + self.sizes[i + 1]
            for i in range(self.n_layers)
        )

    def to_dict(self):
        return {"sizes": list(self.sizes), "activations": list(self.activations)}

    @staticmethod
    def from_dict(d):
        return MlpSpec(tuple(d["sizes"]), tuple(d["activations"]))

    def digest(self):
        """sha256 of the canonical JSON form; pins checkpoints to architectures."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()


def init_params(spec: MlpSpec, rng) -> np.ndarray:
    """He-style init (variance 2/fan_in for relu, 1/fan_in otherwise), zero biases.

    Returns one flat float64 vector; layout is per layer W (row-major,
    shape fan_in x fan_out) then b.
    """
    chunks = []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        gain = 2.0 if spec.activations[i] == "relu" else 1.0
        w = rng.normal(size=(fan_in, fan_out)) * np.sqrt(gain / fan_in)
        chunks.append(w.ravel())
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unpack_params(spec: MlpSpec, params):
    """Views (W, b) per layer into the flat parameter vector."""
    params = np.asarray(params)
    if params.shape != (spec.n_params,):
        raise ValueError(
            f"parameter vector has {params.shape}, spec needs ({spec.n_params},)"
        )
    out = []
    off = 0
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        w = params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off : off + fan_out]
        off += fan_out
        out.append((w, b))
    return out


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite values in {what}")


def forward(spec: MlpSpec, params, x):
    """Run the net; accepts (d_in,) or (batch, d_in) and matches the shape out."""
    y, _ = forward_cache(spec, params, x)
    return y


def forward_cache(spec: MlpSpec, params, x):
    """Forward pass keeping per-layer activations for backward.

    The cache holds the 2D input and every post-activation; `backward`
    consumes it together with the same params.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.ndim != 2 or a.shape[1] != spec.d_in:
        raise ValueError(f"input shape {x.shape} does not match d_in={spec.d_in}")
    _check_finite(a, "network input")
    layers = unpack_params(spec, params)
    acts = [a]
    for (w, b), kind in zip(layers, spec.activations):
        z = a @ w + b
        if kind == "relu":
            a = np.maximum(z, 0.0)
        elif kind == "tanh":
            a = np.tanh(z)
        else:
            a = z
        acts.append(a)
    _check_finite(a, "network output")
    y = a[0] if squeeze else a
    return y, (acts, squeeze)


def backward(spec: MlpSpec, params, cache, grad_y):
    """Reverse accumulation through the cached forward pass.

    Returns (grad_params flat, grad_x). Parameter gradients are summed over
    the batch; fold any 1/batch factor into grad_y.
    """
    acts, squeeze = cache
    g = np.asarray(grad_y, dtype=np.float64)
    if squeeze:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ValueError(
            f"upstream gradient shape {grad_y.shape} does not match output "
            f"{acts[-1].shape}"
        )
    layers = unpack_params(spec, params)
    grad_params = np.empty_like(np.asarray(params, dtype=np.float64))
    grads = unpack_params(spec, grad_params)
    for i in range(spec.n_layers - 1, -1, -1):
        kind = spec.activations[i]
        out = acts[i + 1]
        if kind == "relu":
            g = g * (out > 0.0)  # subgradient 0 at the kink
        elif kind == "tanh":
            g = g * (1.0 - out * out)
        w, _ = layers[i]
        gw, gb = grads[i]
        np.matmul(acts[i].T, g, out=gw)
        np.sum(g, axis=0, out=gb)
        g = g @ w.T
    _check_finite(grad_params, "parameter gradients")
    grad_x = g[0] if squeeze else g
    return grad_params, grad_x


def grad_check(spec: MlpSpec, seed=0, h=1e-5, batch=3):
    """Max relative mismatch between backward and central finite differences.

    Random params and inputs from the seed; the probe loss is a random
    linear functional of the outputs. The denominator is floored at 1 so
    near-zero gradients are compared absolutely.
    """
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    x = rng.normal(size=(batch, spec.d_in))
    probe = rng.normal(size=(batch, spec.d_out))

    def loss_at(p, xv):
        return float(np.sum(forward(spec, p, xv) * probe))

    _, cache = forward_cache(spec, params, x)
    g_params, g_x = backward(spec, params, cache, probe)

    worst = 0.0
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        up = loss_at(p, x)
        p[i] -= 2 * h
        dn = loss_at(p, x)
        num = (up - dn) / (2 * h)
        ana = g_params[i]
        worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    flat = x.ravel()
    for i in range(flat.size):
        xv = x.copy().ravel()
        xv[i] += h
        up = loss_at(params, xv.reshape(x.shape))
        xv[i] -= 2 * h
        dn = loss_at(params, xv.reshape(x.shape))
        num = (up - dn) / (2 * h)
        ana = g_x.ravel()[i]
        worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    return worst


# ---------------------------------------------------------------------------
# Set pooling (the only non-MLP primitive the point encoder needs).


def set_max_pool(h):
    """Channel-wise max over the second-to-last axis.

    (n, d) -> ((d,), argmax (d,)); (b, n, d) -> ((b, d), argmax (b, d)).
    Gradient flows only to the argmax row per channel (first index on ties).
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim not in (2, 3):
        raise ValueError(f"set_max_pool: expected 2D or 3D input, got {h.shape}")
    idx = h.argmax(axis=-2)
    pooled = np.take_along_axis(h, idx[..., None, :], axis=-2).squeeze(-2)
    return pooled, idx


def set_max_pool_grad(grad_pooled, argmax, n_points):
    """Scatter the pooled gradient back to the winning rows."""
    grad_pooled = np.asarray(grad_pooled, dtype=np.float64)
    if grad_pooled.shape != argmax.shape:
        raise ValueError("set_max_pool_grad: gradient/argmax shape mismatch")
    out = np.zeros(grad_pooled.shape[:-1] + (n_points, grad_pooled.shape[-1]))
    np.put_along_axis(out, argmax[..., None, :], grad_pooled[..., None, :], axis=-2)
    return out


# ---------------------------------------------------------------------------
# Losses (tiny helpers shared by the trainers).


def mse_loss(pred, target):
    """Mean squared error over every entry, with its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shapes {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


# ---------------------------------------------------------------------------
# Adam.


@dataclass
class AdamState:
    """Moment buffers and step counter for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float

    @staticmethod
    def for_params(n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if n_params <= 0:
            raise ValueError("AdamState: empty parameter vector")
        return AdamState(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; mutates state, returns new params."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != state.m.shape or grads.shape != state.m.shape:
        raise ValueError(
            f"adam_step: shapes params {params.shape} grads {grads.shape} "
            f"state {state.m.shape}"
        )
    _check_finite(grads, "gradients")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoints: 4-byte magic, u32 version, 32-byte architecture hash, then the
# flat float64 parameter vector, little-endian. A JSON sidecar at
# <path>.json carries the architecture itself plus caller metadata.


def save_checkpoint(path, spec: MlpSpec, params, meta=None):
    params = np.ascontiguousarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ValueError(
            f"checkpoint: {params.shape} does not match spec ({spec.n_params},)"
        )
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(spec.digest())
        fh.write(params.astype("<f8").tobytes())
    sidecar = {"spec": spec.to_dict(), "param_count": int(params.size)}
    if meta:
        sidecar["meta"] = meta
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (spec, params, meta). Verifies magic, version, and spec hash."""
    path = str(path)
    with open(path + ".json") as fh:
        sidecar = json.load(fh)
    spec = MlpSpec.from_dict(sidecar["spec"])
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if blob[8:40] != spec.digest():
        raise ValueError(f"{path}: architecture hash does not match sidecar")
    params = np.frombuffer(blob[40:], dtype="<f8").astype(np.float64)
    if params.size != spec.n_params:
        raise ValueError(
            f"{path}: {params.size} parameters on disk, spec needs {spec.n_params}"
        )
    return spec, params, sidecar.get("meta", {})
