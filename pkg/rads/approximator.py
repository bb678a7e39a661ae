"""
Feedforward approximators for the policy and the critics.

A Net is a stack of affine layers with ReLU between them and a linear
output. Gradients are computed by hand in reverse mode; there is no autodiff
graph, so every caller drives forward() / backward() explicitly and feeds
the gradients to adam_step().

Shapes follow the row-major batch convention used throughout the package:
inputs are (batch, in) or (in,), weights are (out, in), and layer outputs
are x @ W.T + b.

The checkpoint format lives here too because every persisted array in the
package is either a Net parameter or an optimizer moment.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rads.errors import CheckpointError, DimensionError, NumericError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RADSCKPT"
CHECKPOINT_VERSION = 1


# ── Networks ────────────────────────────────────────────────────────

@dataclass
class Net:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def copy(self) -> "Net":
        return Net([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_widths(input_dim: int, output_dim: int, hidden_width: int, hidden_layers: int) -> list[int]:
    return [input_dim] + [hidden_width] * hidden_layers + [output_dim]


def init_net(widths: list[int], rng: np.random.Generator) -> Net:
    """Uniform fan-in initialization: U(−1/√fan_in, 1/√fan_in) for weights and biases."""
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise DimensionError(f"invalid layer widths {widths}")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Net(weights, biases)


@dataclass
class ForwardCache:
    # activations[i] is the input to layer i; pre[i] is layer i's affine output
    activations: list[np.ndarray]
    pre: list[np.ndarray]


def _as_batch(net: Net, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise DimensionError(f"input shape {x.shape} does not match first layer width {net.input_dim}")
    return batch, single


def forward_cached(net: Net, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    h, single = _as_batch(net, x)
    activations, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        activations.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return (h[0] if single else h), ForwardCache(activations, pre)


def forward(net: Net, x: np.ndarray) -> np.ndarray:
    return forward_cached(net, x)[0]


def backward(
    net: Net,
    x: np.ndarray,
    upstream: np.ndarray,
    cache: ForwardCache | None = None,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients of ⟨upstream, net(x)⟩.

    Returns the parameter gradients in `Net.parameters()` order (summed over
    the batch) and the gradient with respect to x, shaped like x.
    """
    if cache is None:
        _, cache = forward_cached(net, x)
    single = np.asarray(x).ndim == 1
    g = np.asarray(upstream, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != cache.pre[-1].shape:
        raise DimensionError(f"upstream shape {np.shape(upstream)} does not match output {cache.pre[-1].shape}")

    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for i in reversed(range(len(net.weights))):
        if i != len(net.weights) - 1:
            g = g * (cache.pre[i] > 0.0)
        grads[2 * i] = g.T @ cache.activations[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i]
    return grads, (g[0] if single else g)


# ── Adam ────────────────────────────────────────────────────────────

@dataclass
class OptimState:
    lr: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float) -> "OptimState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])

    def copy(self) -> "OptimState":
        return OptimState(
            self.lr, [m.copy() for m in self.m], [v.copy() for v in self.v],
            self.step, self.beta1, self.beta2, self.eps,
        )


def adam_step(state: OptimState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected Adam update, applied to `params` in place."""
    if len(grads) != len(params) or len(params) != len(state.m):
        raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise DimensionError(f"gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericError(
                f"non-finite gradient in tensor {i}",
                detail={"tensor": i, "shape": list(g.shape), "non_finite": bad, "step": state.step},
            )

    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ── Checkpoints ─────────────────────────────────────────────────────
#
# Layout:  magic | uint32 version | uint32 header length | JSON header |
#          float64 little-endian arrays in header order.
# The header is dumped with sorted keys so identical contents give
# identical bytes.

@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)

    def add_net(self, prefix: str, net: Net) -> None:
        for i, p in enumerate(net.parameters()):
            self.arrays[f"{prefix}.{i}"] = p

    def get_net(self, prefix: str) -> Net:
        params = []
        i = 0
        while f"{prefix}.{i}" in self.arrays:
            params.append(self.arrays[f"{prefix}.{i}"].copy())
            i += 1
        if not params or len(params) % 2:
            raise CheckpointError(f"checkpoint has no complete network '{prefix}'")
        return Net(params[0::2], params[1::2])

    def add_optim(self, prefix: str, state: OptimState) -> None:
        for i, (m, v) in enumerate(zip(state.m, state.v)):
            self.arrays[f"{prefix}.m{i}"] = m
            self.arrays[f"{prefix}.v{i}"] = v
        self.scalars[f"{prefix}.step"] = state.step
        self.scalars[f"{prefix}.lr"] = state.lr

    def get_optim(self, prefix: str, n_params: int) -> OptimState:
        try:
            m = [self.arrays[f"{prefix}.m{i}"].copy() for i in range(n_params)]
            v = [self.arrays[f"{prefix}.v{i}"].copy() for i in range(n_params)]
            return OptimState(lr=float(self.scalars[f"{prefix}.lr"]), m=m, v=v, step=int(self.scalars[f"{prefix}.step"]))
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing optimizer entry {exc}") from exc


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"arrays": entries, "scalars": ckpt.scalars}, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(data) < prefix or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a RADS checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", data[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        header = json.loads(data[prefix:prefix + header_len])
    except ValueError as exc:
        raise CheckpointError("checkpoint header is not valid JSON") from exc

    offset = prefix + header_len
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"checkpoint truncated inside array '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError("checkpoint has trailing bytes")
    return Checkpoint(arrays=arrays, scalars=header["scalars"])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))
    logger.info("Wrote checkpoint %s (%d arrays)", path, len(ckpt.arrays))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return checkpoint_from_bytes(data)
