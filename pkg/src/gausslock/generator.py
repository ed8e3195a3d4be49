"""Toy feed-forward Gaussian generator: conditioning vector -> (N, 14) raw batch.

A softplus MLP whose last dense layer emits ``N * 14`` values. Hidden layers may
carry low-rank adapters (see :mod:`gausslock.lora`); the forward and backward
passes here handle both cases so the training loops only deal with one model
type.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .core import N_CHANNELS, sigmoid, softplus
from .errors import ShapeMismatch

D_IN = 32
HIDDEN = (128, 128, 128)
N_GAUSSIANS = 256

CKPT_MAGIC = b"GLCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class LoraAdapter:
    A: np.ndarray  # (out, r)
    B: np.ndarray  # (in, r)
    alpha: float
    dropout_p: float
    target_layer: int

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * self.A @ self.B.T


@dataclass(frozen=True)
class GeneratorWeights:
    layers: tuple  # ((W (out, in), b (out,)), ...)
    d_in: int
    hidden: tuple
    n_gaussians: int
    seed: int = 0
    adapters: tuple = field(default=())

    @property
    def out_dim(self) -> int:
        return self.n_gaussians * N_CHANNELS

    @property
    def n_hidden_layers(self) -> int:
        return len(self.hidden)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def adapter_params(self) -> dict[str, np.ndarray]:
        out = {}
        for ad in self.adapters:
            out[f"A{ad.target_layer}"] = ad.A
            out[f"B{ad.target_layer}"] = ad.B
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> GeneratorWeights:
        """Return a copy with any of W*/b*/A*/B* entries replaced."""
        layers = tuple(
            (params.get(f"W{i}", W), params.get(f"b{i}", b)) for i, (W, b) in enumerate(self.layers)
        )
        adapters = tuple(
            replace(ad, A=params.get(f"A{ad.target_layer}", ad.A), B=params.get(f"B{ad.target_layer}", ad.B))
            for ad in self.adapters
        )
        return replace(self, layers=layers, adapters=adapters)

    def without_adapters(self) -> GeneratorWeights:
        return replace(self, adapters=())

    def fingerprint(self) -> str:
        return hashlib.sha256(_weights_payload(self) + _lora_payload(self)).hexdigest()


def layer_dims(d_in: int, hidden, n_gaussians: int) -> list[tuple[int, int]]:
    sizes = [d_in, *hidden, n_gaussians * N_CHANNELS]
    return list(zip(sizes[:-1], sizes[1:]))


def init_weights(d_in: int = D_IN, hidden=HIDDEN, n_gaussians: int = N_GAUSSIANS, seed: int = 0) -> GeneratorWeights:
    """He-normal weights, zero biases; deterministic per seed."""
    if d_in < 1 or n_gaussians < 1 or any(h < 1 for h in hidden):
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in layer_dims(d_in, hidden, n_gaussians):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    return GeneratorWeights(tuple(layers), d_in, tuple(hidden), n_gaussians, seed)


# -- forward / backward -------------------------------------------------------


@dataclass
class _Cache:
    xs: list  # input to each layer
    pre: list  # pre-activation of each layer
    drop: dict  # layer -> dropout multiplier on the adapter input
    lowrank: dict  # layer -> (x_drop @ B)


def _as_batch(weights: GeneratorWeights, cond) -> tuple[np.ndarray, bool]:
    X = np.asarray(cond, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != weights.d_in:
        raise ShapeMismatch(f"conditioning must have {weights.d_in} features, got shape {np.shape(cond)}")
    return X, single


def _rows(h: np.ndarray, M: np.ndarray) -> np.ndarray:
    # one product per row: BLAS blocking would otherwise tie a sample's bits to its batch
    return np.stack([r @ M for r in h]) if h.shape[0] else h @ M


def forward_with_cache(weights: GeneratorWeights, X: np.ndarray, train_mode: bool = False, rng=None):
    """Batched forward on (B, d_in); returns flat (B, N*14) output and a backward cache."""
    adapters = {ad.target_layer: ad for ad in weights.adapters}
    cache = _Cache([], [], {}, {})
    h = X
    last = len(weights.layers) - 1
    for i, (W, b) in enumerate(weights.layers):
        cache.xs.append(h)
        a = _rows(h, W.T) + b
        ad = adapters.get(i)
        if ad is not None:
            xin = h
            if train_mode and ad.dropout_p > 0.0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an explicit rng")
                keep = rng.random(h.shape) >= ad.dropout_p
                mult = keep / (1.0 - ad.dropout_p)
                cache.drop[i] = mult
                xin = h * mult
            z = _rows(xin, ad.B)
            cache.lowrank[i] = z
            a = a + ad.scaling * _rows(z, ad.A.T)
        cache.pre.append(a)
        h = softplus(a) if i < last else a
    return h, cache


def backward(weights: GeneratorWeights, cache: _Cache, upstream: np.ndarray, want_base: bool = True,
             want_adapters: bool = True) -> dict[str, np.ndarray]:
    """Reverse pass for sum(upstream * output); upstream is (B, N*14)."""
    adapters = {ad.target_layer: ad for ad in weights.adapters}
    grads = {}
    g = upstream
    for i in range(len(weights.layers) - 1, -1, -1):
        W, _ = weights.layers[i]
        x = cache.xs[i]
        if want_base:
            grads[f"W{i}"] = g.T @ x
            grads[f"b{i}"] = g.sum(axis=0)
        ad = adapters.get(i)
        dx = None
        if i > 0:
            dx = g @ W
        if ad is not None:
            mult = cache.drop.get(i)
            xin = x if mult is None else x * mult
            dz = ad.scaling * (g @ ad.A)
            if want_adapters:
                grads[f"A{i}"] = ad.scaling * (g.T @ cache.lowrank[i])
                grads[f"B{i}"] = xin.T @ dz
            if i > 0:
                dxin = dz @ ad.B.T
                dx = dx + (dxin if mult is None else dxin * mult)
        if i > 0:
            g = dx * sigmoid(cache.pre[i - 1])
    return grads


def forward(weights: GeneratorWeights, cond) -> np.ndarray:
    """Raw batch (N, 14) for one conditioning vector, (B, N, 14) for a batch.

    Adapters attached to ``weights`` are applied in eval mode (no dropout).
    """
    X, single = _as_batch(weights, cond)
    out, _ = forward_with_cache(weights, X)
    out = out.reshape(X.shape[0], weights.n_gaussians, N_CHANNELS)
    return out[0] if single else out


# -- checkpoint container -----------------------------------------------------


def _dims_payload(w: GeneratorWeights) -> bytes:
    return struct.pack(f"<III{len(w.hidden)}IQ", w.d_in, w.n_gaussians, len(w.hidden), *w.hidden, w.seed)


def _weights_payload(w: GeneratorWeights) -> bytes:
    parts = []
    for W, b in w.layers:
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def _lora_payload(w: GeneratorWeights) -> bytes:
    if not w.adapters:
        return b""
    parts = [struct.pack("<I", len(w.adapters))]
    for ad in w.adapters:
        parts.append(struct.pack("<IIdd", ad.target_layer, ad.rank, ad.alpha, ad.dropout_p))
        parts.append(np.ascontiguousarray(ad.A, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(ad.B, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_bytes(weights: GeneratorWeights) -> bytes:
    sections = [(b"DIMS", _dims_payload(weights)), (b"WGTS", _weights_payload(weights))]
    if weights.adapters:
        sections.append((b"LORA", _lora_payload(weights)))
    return container.pack(CKPT_MAGIC, CKPT_VERSION, sections)


def checkpoint_from_bytes(data: bytes) -> GeneratorWeights:
    _, sections = container.unpack(data, CKPT_MAGIC, CKPT_VERSION)
    by_tag = dict(sections)
    dims = by_tag[b"DIMS"]
    d_in, n_gaussians, n_hidden = struct.unpack_from("<III", dims, 0)
    hidden = struct.unpack_from(f"<{n_hidden}I", dims, 12)
    (seed,) = struct.unpack_from("<Q", dims, 12 + 4 * n_hidden)

    flat = np.frombuffer(by_tag[b"WGTS"], dtype="<f8")
    layers, off = [], 0
    for fan_in, fan_out in layer_dims(d_in, hidden, n_gaussians):
        W = flat[off : off + fan_in * fan_out].reshape(fan_out, fan_in).astype(np.float64)
        off += fan_in * fan_out
        b = flat[off : off + fan_out].astype(np.float64)
        off += fan_out
        layers.append((W, b))
    if off != flat.size:
        raise ShapeMismatch("weight payload size does not match the dims header")

    adapters = []
    if b"LORA" in by_tag:
        payload = by_tag[b"LORA"]
        (count,) = struct.unpack_from("<I", payload, 0)
        off = 4
        dims_list = layer_dims(d_in, hidden, n_gaussians)
        for _ in range(count):
            layer, rank, alpha, p = struct.unpack_from("<IIdd", payload, off)
            off += struct.calcsize("<IIdd")
            fan_in, fan_out = dims_list[layer]
            A = np.frombuffer(payload, dtype="<f8", count=fan_out * rank, offset=off).reshape(fan_out, rank)
            off += 8 * fan_out * rank
            B = np.frombuffer(payload, dtype="<f8", count=fan_in * rank, offset=off).reshape(fan_in, rank)
            off += 8 * fan_in * rank
            adapters.append(LoraAdapter(A.astype(np.float64), B.astype(np.float64), alpha, p, layer))
    return GeneratorWeights(tuple(layers), d_in, tuple(hidden), n_gaussians, seed, tuple(adapters))


def save_checkpoint(weights: GeneratorWeights, path) -> None:
    container.write_file(path, checkpoint_bytes(weights))


def load_checkpoint(path) -> GeneratorWeights:
    return checkpoint_from_bytes(Path(path).read_bytes())
