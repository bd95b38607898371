"""
Compact multi-layer perceptrons with exact reverse-mode gradients.

Seven networks make up θ: unary h_o, h_p and pairwise g_op, g_oo, g_og,
g_po, g_pg. Hidden layers use tanh, the output layer is linear, everything
is float64.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

NET_NAMES = ("h_o", "h_p", "g_op", "g_oo", "g_og", "g_po", "g_pg")

CHECKPOINT_MAGIC = b"IWSLCKPT"
CHECKPOINT_VERSION = 1


class Mlp:
    """Affine layers with tanh between them"""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if not weights or len(weights) != len(biases):
            raise DimensionError("an MLP needs matching, non-empty weight and bias lists")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {l}: weight {w.shape} and bias {b.shape} disagree")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise DimensionError(f"layer {l} expects width {w.shape[1]}, "
                                     f"previous layer produces {self.weights[l - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DimensionError(f"layer {l} has non-finite parameters")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> List[np.ndarray]:
        """Live parameter arrays, weights then biases per layer"""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params


class MlpGrads:
    """Parameter gradients laid out like Mlp"""

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray]):
        self.weights = weights
        self.biases = biases

    @classmethod
    def zeros_like(cls, net: Mlp) -> "MlpGrads":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def parameters(self) -> List[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> Mlp:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero biases"""
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise DimensionError(f"invalid layer sizes {list(sizes)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match input width {net.in_dim}")
    return x


def _activations(net: Mlp, x: np.ndarray) -> List[np.ndarray]:
    acts = [x]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        pre = acts[-1] @ w.T + b
        acts.append(pre if l == last else np.tanh(pre))
    return acts


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Output for a vector (in,) or a batch (B, in)"""
    return _activations(net, _check_input(net, x))[-1]


def backward(net: Mlp, x: np.ndarray, grad_out: np.ndarray) -> Tuple[MlpGrads, np.ndarray]:
    """
    Reverse-mode gradients of <grad_out, forward(net, x)>.

    For a batch the parameter gradients are summed over rows; the input
    gradient keeps the batch shape.
    """
    x = _check_input(net, x)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != x.shape[:-1] + (net.out_dim,):
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match output "
                             f"{x.shape[:-1] + (net.out_dim,)}")
    batched = x.ndim == 2
    acts = _activations(net, x if batched else x[None, :])
    g = grad_out if batched else grad_out[None, :]

    dws: List[Optional[np.ndarray]] = [None] * len(net.weights)
    dbs: List[Optional[np.ndarray]] = [None] * len(net.weights)
    for l in range(len(net.weights) - 1, -1, -1):
        dws[l] = g.T @ acts[l]
        dbs[l] = g.sum(axis=0)
        g = g @ net.weights[l]
        if l > 0:
            g = g * (1.0 - acts[l] ** 2)
    return MlpGrads(dws, dbs), (g if batched else g[0])


# --- THETA ---

class ThetaParams:
    """The seven feature networks, keyed by name"""

    def __init__(self, nets: Dict[str, Mlp]):
        missing = [name for name in NET_NAMES if name not in nets]
        if missing:
            raise DimensionError(f"theta is missing networks {missing}")
        self.nets = {name: nets[name] for name in NET_NAMES}

    def __getitem__(self, name: str) -> Mlp:
        return self.nets[name]

    def copy(self) -> "ThetaParams":
        return ThetaParams({name: net.copy() for name, net in self.nets.items()})

    def parameters(self) -> List[np.ndarray]:
        params = []
        for name in NET_NAMES:
            params.extend(self.nets[name].parameters())
        return params

    def check_widths(self, d: int, v_o: int, v_p: int) -> None:
        for name, (in_dim, out_dim) in net_shapes(d, v_o, v_p).items():
            net = self.nets[name]
            if (net.in_dim, net.out_dim) != (in_dim, out_dim):
                raise DimensionError(f"{name} maps {net.in_dim}->{net.out_dim}, "
                                     f"task needs {in_dim}->{out_dim}")


ThetaGrads = Dict[str, MlpGrads]


def net_shapes(d: int, v_o: int, v_p: int) -> Dict[str, Tuple[int, int]]:
    """(input width, output width) of every network"""
    return {
        "h_o": (d, v_o),
        "h_p": (d, v_p),
        "g_op": (2 * d, v_o),
        "g_oo": (2 * d, v_o),
        "g_og": (2 * d, v_o),
        "g_po": (2 * d, v_p),
        "g_pg": (2 * d, v_p),
    }


def init_theta(d: int, v_o: int, v_p: int, hidden_sizes: Sequence[int] = (64,), seed: int = 0) -> ThetaParams:
    rng = np.random.default_rng(seed)
    nets = {}
    for name, (in_dim, out_dim) in net_shapes(d, v_o, v_p).items():
        nets[name] = init_mlp([in_dim, *hidden_sizes, out_dim], rng)
    return ThetaParams(nets)


def zero_grads(theta: ThetaParams) -> ThetaGrads:
    return {name: MlpGrads.zeros_like(theta[name]) for name in NET_NAMES}


def add_grads(acc: ThetaGrads, name: str, grads: MlpGrads) -> None:
    """acc[name] += grads, in place"""
    for total, g in zip(acc[name].parameters(), grads.parameters()):
        total += g


def merge_grads(acc: ThetaGrads, other: ThetaGrads) -> None:
    for name in NET_NAMES:
        add_grads(acc, name, other[name])


def scale_grads(grads: ThetaGrads, factor: float) -> None:
    for name in NET_NAMES:
        for g in grads[name].parameters():
            g *= factor


def grad_norm(grads: ThetaGrads) -> float:
    return float(np.sqrt(sum(float(np.sum(g ** 2)) for name in NET_NAMES
                             for g in grads[name].parameters())))


def sgd_step(params: ThetaParams, grads: ThetaGrads, alpha: float) -> ThetaParams:
    """Plain SGD: every parameter p becomes p - alpha * g"""
    updated = params.copy()
    for name in NET_NAMES:
        net, g = updated[name], grads[name]
        if len(g.weights) != len(net.weights):
            raise DimensionError(f"{name}: gradient has {len(g.weights)} layers, net has {len(net.weights)}")
        for p, dp in zip(net.parameters(), g.parameters()):
            if p.shape != dp.shape:
                raise DimensionError(f"{name}: gradient shape {dp.shape} != parameter shape {p.shape}")
            p -= alpha * dp
    return updated


# --- CHECKPOINTS ---

def _tensors(theta: ThetaParams, tau: float) -> List[Tuple[str, np.ndarray]]:
    tensors = []
    for name in NET_NAMES:
        net = theta[name]
        for l, (w, b) in enumerate(zip(net.weights, net.biases)):
            tensors.append((f"{name}.weight.{l}", w))
            tensors.append((f"{name}.bias.{l}", b))
    tensors.append(("tau", np.array(tau, dtype=np.float64)))
    return tensors


def checkpoint_bytes(theta: ThetaParams, tau: float) -> bytes:
    """
    Serialize θ and τ.

    Layout (little-endian): magic b"IWSLCKPT", uint32 version, uint32 tensor
    count, then per tensor: uint16 name length, UTF-8 name, uint8 ndim,
    ndim x uint32 dims, float64 row-major payload.
    """
    tensors = _tensors(theta, tau)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, array in tensors:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path: Union[str, Path], theta: ThetaParams, tau: float) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(theta, tau))
    logger.info(f"Saved checkpoint to {path} (tau={tau:.6g})")


def load_checkpoint(path: Union[str, Path]) -> Tuple[ThetaParams, float]:
    """Inverse of save_checkpoint"""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    offset = 8
    try:
        version, count = struct.unpack_from("<II", data, offset)
        offset += 8
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            payload = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            tensors[name] = payload.astype(np.float64).reshape(shape)
    except struct.error as e:
        raise ConfigError(f"truncated checkpoint {path}: {e}") from e

    nets = {}
    for name in NET_NAMES:
        weights, biases = [], []
        l = 0
        while f"{name}.weight.{l}" in tensors:
            weights.append(tensors[f"{name}.weight.{l}"])
            biases.append(tensors[f"{name}.bias.{l}"])
            l += 1
        if not weights:
            raise ConfigError(f"checkpoint {path} has no tensors for {name}")
        nets[name] = Mlp(weights, biases)
    if "tau" not in tensors:
        raise ConfigError(f"checkpoint {path} has no tau tensor")
    return ThetaParams(nets), float(tensors["tau"])
