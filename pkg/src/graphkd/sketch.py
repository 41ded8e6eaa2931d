"""Count-sketch projection and compact bilinear pooling of feature pairs.

A frozen random sketch maps a flattened feature map to a length-e vector;
circular convolution of two such sketches (computed in the frequency domain)
approximates the flattened outer product of the original features. Pooled
pairs pass through a signed square root and L2 normalization to become the
vertex vectors consumed by the representation graph.

All functions here are forward-only: they run on frozen teacher features, so
inputs must be plain arrays or detached tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .tensor import Tensor, irfft, rfft


def _frozen_flat(x, name: str) -> np.ndarray:
    """Flatten ``x`` to 1-D (or 2-D batched) float64, rejecting live tensors."""
    if isinstance(x, Tensor):
        if x.requires_grad or x._parents:
            raise ValueError(
                f"{name} is on the autodiff tape; sketches are forward-only, "
                "detach() first"
            )
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim <= 1:
        return x.reshape(-1)
    # Leading axis is a batch; everything after it is flattened per sample.
    return x.reshape(x.shape[0], -1)


@dataclass(frozen=True)
class SketchParams:
    """One frozen random sketch: bucket indices and signs for each input slot.

    Attributes:
        h: int64 array of bucket indices in [0, e), one per input element.
        s: float64 array of signs in {-1, +1}, one per input element.
        e: output dimension.
    """

    h: np.ndarray
    s: np.ndarray
    e: int

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.int64)
        s = np.asarray(self.s, dtype=np.float64)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "s", s)
        if h.ndim != 1 or s.shape != h.shape:
            raise ValueError("h and s must be 1-D arrays of equal length")
        if self.e < 1:
            raise ValueError(f"output dimension must be positive, got {self.e}")
        if h.size and (h.min() < 0 or h.max() >= self.e):
            raise ValueError("bucket indices must lie in [0, e)")
        if s.size and not np.all(np.abs(s) == 1.0):
            raise ValueError("signs must be exactly -1 or +1")

    @property
    def input_len(self) -> int:
        return self.h.size

    @classmethod
    def draw(cls, input_len: int, e: int, rng: np.random.Generator) -> "SketchParams":
        h = rng.integers(0, e, size=input_len)
        s = rng.integers(0, 2, size=input_len) * 2.0 - 1.0
        return cls(h=h, s=s, e=e)


@dataclass(frozen=True)
class SketchBank:
    """The two frozen sketches used by every pooled pair in one run.

    ``p1`` sketches the first operand of a pair and ``p2`` the second. The
    estimator is unbiased only with independent draws; ``shared=True`` reuses
    one draw for both slots for comparison runs.
    """

    p1: SketchParams
    p2: SketchParams
    shared: bool = False

    @classmethod
    def draw(cls, input_len: int, e: int, rng: np.random.Generator,
             shared: bool = False) -> "SketchBank":
        p1 = SketchParams.draw(input_len, e, rng)
        p2 = p1 if shared else SketchParams.draw(input_len, e, rng)
        return cls(p1=p1, p2=p2, shared=shared)

    def state(self) -> dict:
        """Arrays and flags needed to rebuild the bank bit-exactly."""
        return {
            "h1": self.p1.h, "s1": self.p1.s,
            "h2": self.p2.h, "s2": self.p2.s,
            "e": self.p1.e, "shared": self.shared,
        }

    @classmethod
    def from_state(cls, state: dict) -> "SketchBank":
        p1 = SketchParams(h=state["h1"], s=state["s1"], e=int(state["e"]))
        p2 = SketchParams(h=state["h2"], s=state["s2"], e=int(state["e"]))
        return cls(p1=p1, p2=p2, shared=bool(state["shared"]))


def count_sketch(x, p: SketchParams) -> np.ndarray:
    """Project ``x`` to length ``p.e``: out[j] = sum over h[i]=j of s[i]*x[i].

    Accepts a flat vector or a batch with samples along the first axis.
    Linear in ``x``.
    """
    flat = _frozen_flat(x, "count_sketch input")
    if flat.shape[-1] != p.input_len:
        raise ValueError(
            f"input length {flat.shape[-1]} does not match sketch length "
            f"{p.input_len}"
        )
    if flat.ndim == 1:
        return np.bincount(p.h, weights=p.s * flat, minlength=p.e)
    out = np.empty((flat.shape[0], p.e))
    for i, row in enumerate(flat):
        out[i] = np.bincount(p.h, weights=p.s * row, minlength=p.e)
    return out


def compact_bilinear(r_m, r_n, p1: SketchParams, p2: SketchParams) -> np.ndarray:
    """Pool two feature maps: circular convolution of their sketches via FFT.

    Equivalent to sketching the flattened outer product of the two features,
    without ever forming it.
    """
    if p1.e != p2.e:
        raise ValueError(f"sketch output dims disagree: {p1.e} vs {p2.e}")
    sm = count_sketch(r_m, p1)
    sn = count_sketch(r_n, p2)
    return irfft(rfft(sm) * rfft(sn), p1.e)


def signed_sqrt(psi) -> np.ndarray:
    """Elementwise sign(x) * sqrt(|x|); compresses magnitudes, keeps signs."""
    psi = _frozen_flat(psi, "signed_sqrt input")
    return np.sign(psi) * np.sqrt(np.abs(psi))


def l2_normalize(z, eps: float = 1e-12) -> np.ndarray:
    """Scale to unit L2 norm; vectors with norm below ``eps`` pass through.

    The zero vector is reachable (dead features) and must not abort a run,
    so it is returned unchanged rather than raised on.
    """
    z = _frozen_flat(z, "l2_normalize input")
    norm = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    safe = np.where(norm > eps, norm, 1.0)
    return z / safe


@dataclass(frozen=True)
class BilinearVertex:
    """One pooled teacher pair: an id, the (m, n) source pair, and a vector.

    Teacher numbering in ``pair`` is 1-based, matching human-facing reports.
    ``vector`` has unit L2 norm per row (or is all-zero for dead features);
    shape (e,) for a single sample or (batch, e).
    """

    vertex_id: int
    pair: tuple
    vector: np.ndarray


def build_vertices(features, bank: SketchBank) -> list:
    """Pool every unordered teacher pair into a normalized vertex vector.

    Pairs are enumerated in lexicographic (m < n) order, so vertex ids and
    sources are stable across runs given the same teacher order. Each vertex
    is l2_normalize(signed_sqrt(compact_bilinear(...))).
    """
    if len(features) < 2:
        raise ValueError(f"need at least 2 teachers, got {len(features)}")
    vertices = []
    for k, (m, n) in enumerate(combinations(range(len(features)), 2), start=1):
        pooled = compact_bilinear(features[m], features[n], bank.p1, bank.p2)
        vector = l2_normalize(signed_sqrt(pooled))
        vertices.append(
            BilinearVertex(vertex_id=k, pair=(m + 1, n + 1), vector=vector)
        )
    return vertices
