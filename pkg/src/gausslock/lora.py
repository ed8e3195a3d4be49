"""Low-rank adapters for the fine-tuning threat model.

Every hidden dense layer ``W`` (out x in) gets ``A`` (out x r) and ``B``
(in x r); the layer computes ``W x + (alpha / r) * A (B^T x)``. ``A`` starts
Gaussian and ``B`` at zero, so a freshly injected model is output-identical to
its base.
"""

from __future__ import annotations

import numpy as np

from .core import N_CHANNELS
from .errors import RankTooLarge
from .generator import GeneratorWeights, LoraAdapter, _as_batch, forward_with_cache

__all__ = ["LoraAdapter", "inject", "adapted_forward", "trainable_count"]


def inject(weights: GeneratorWeights, rank: int = 16, alpha: float = 16.0, dropout_p: float = 0.1,
           seed: int = 0) -> GeneratorWeights:
    """Attach fresh adapters to every hidden layer; base weights are left as-is."""
    if rank < 1:
        raise RankTooLarge(f"rank must be >= 1, got {rank}")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout_p must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    adapters = []
    for i in range(weights.n_hidden_layers):
        W, _ = weights.layers[i]
        fan_out, fan_in = W.shape
        if rank > min(fan_out, fan_in):
            raise RankTooLarge(f"rank {rank} exceeds min dim {min(fan_out, fan_in)} of layer {i}")
        A = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(fan_out, rank))
        B = np.zeros((fan_in, rank))
        adapters.append(LoraAdapter(A, B, float(alpha), float(dropout_p), i))
    return GeneratorWeights(weights.layers, weights.d_in, weights.hidden, weights.n_gaussians, weights.seed,
                            tuple(adapters))


def adapted_forward(handle: GeneratorWeights, cond, train_mode: bool = False, rng=None) -> np.ndarray:
    X, single = _as_batch(handle, cond)
    out, _ = forward_with_cache(handle, X, train_mode=train_mode, rng=rng)
    out = out.reshape(X.shape[0], handle.n_gaussians, N_CHANNELS)
    return out[0] if single else out


def trainable_count(handle: GeneratorWeights) -> int:
    return sum(ad.A.size + ad.B.size for ad in handle.adapters)
