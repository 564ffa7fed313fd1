"""Gaussian sliding-window map from audio time steps onto visual time steps.

The map is a fixed row-stochastic matrix: row j holds a truncated,
renormalized Gaussian centered on the audio frame that corresponds to
visual frame j. It is recomputed from its four integers/reals and never
learned; no gradient flows into the weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

__all__ = ["AlignmentMap", "build_alignment_map", "apply_alignment", "center_index"]


def center_index(j: int, t_audio: int, n_visual: int) -> int:
    """Audio index matched to visual frame j: floor((j + 0.5) * T_a / J)."""
    return int(np.floor((j + 0.5) * t_audio / n_visual))


@dataclass(frozen=True)
class AlignmentMap:
    """Immutable row-stochastic weights [J x T_a]; shareable across threads."""

    weights: np.ndarray
    centers: tuple
    window: int
    sigma: float
    t_audio: int = field(init=False, default=0)

    def __post_init__(self):
        object.__setattr__(self, "t_audio", self.weights.shape[1])
        self.weights.setflags(write=False)

    @property
    def n_visual(self) -> int:
        return self.weights.shape[0]


def build_alignment_map(t_audio: int, n_visual: int, sigma: float = 3.0,
                        window: int = 7) -> AlignmentMap:
    """Build the [J x T_a] map.

    Row j puts weight exp(-k^2 / (2 sigma^2)) at audio index c_j + k for
    offsets k in [-(window-1)/2, +(window-1)/2]; offsets falling outside
    [0, T_a-1] are dropped and the remaining weights renormalized, so every
    row stays a convex combination.
    """
    if n_visual < 1:
        raise ValueError("need at least one visual frame")
    if t_audio < n_visual:
        raise ValueError(f"expected at least as many audio frames as visual frames, got {t_audio} < {n_visual}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    half = (window - 1) // 2
    offsets = np.arange(-half, half + 1)
    raw = np.exp(-(offsets.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    weights = np.zeros((n_visual, t_audio), dtype=np.float64)
    centers = []
    for j in range(n_visual):
        c = center_index(j, t_audio, n_visual)
        centers.append(c)
        idx = c + offsets
        keep = (idx >= 0) & (idx < t_audio)
        w = raw[keep]
        weights[j, idx[keep]] = w / w.sum()
    return AlignmentMap(weights=weights, centers=tuple(centers), window=window,
                        sigma=float(sigma))


def apply_alignment(amap: AlignmentMap, audio_states) -> T.Tensor:
    """Project audio hidden states onto the visual time axis.

    audio_states: Tensor [T_a x D] or [B x T_a x D]. Returns [J x D] or
    [B x J x D]; linear in the input, differentiable through the tape.
    """
    h = T.as_tensor(audio_states)
    if h.ndim not in (2, 3):
        raise ValueError(f"audio states must be 2-D or 3-D, got shape {h.shape}")
    t_axis = h.ndim - 2
    if h.shape[t_axis] != amap.t_audio:
        raise ValueError(f"audio states have {h.shape[t_axis]} frames, map expects {amap.t_audio}")
    w = T.Tensor(amap.weights)
    if h.ndim == 2:
        return T.matmul(w, h)
    b, ta, d = h.shape
    flat = T.reshape(T.transpose(h, (1, 0, 2)), (ta, b * d))
    out = T.matmul(w, flat)
    return T.transpose(T.reshape(out, (amap.n_visual, b, d)), (1, 0, 2))
