"""Teacher weighting graphs and their two scalar distillation losses.

The logits graph holds one learnable weight per directed teacher-to-teacher
edge; the softmax over each receiving vertex's incoming edges decides how
much that teacher's softened distribution counts in the student's imitation
loss. The representation graph holds one learnable weight per pooled teacher
pair, softmaxed over all pairs, weighting per-vertex feature discrepancies.
"""

from __future__ import annotations

from math import comb

import numpy as np

from . import tensor as T
from .losses import em_distance_1d, median_heuristic_bandwidth, mmd_gaussian, soften
from .tensor import Tensor


def _temperature_vector(temperatures, n: int, what: str) -> np.ndarray:
    if temperatures is None:
        temperatures = 4.0
    t = np.asarray(
        np.full(n, temperatures) if np.isscalar(temperatures) else temperatures,
        dtype=np.float64,
    )
    if t.shape != (n,):
        raise ValueError(f"need one temperature per {what}, got shape {t.shape}")
    if np.any(t <= 0):
        raise ValueError("temperatures must be positive")
    return t


def _masked_softmax(raw: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over the allowed entries only.

    Masked entries come out exactly 0 and never enter the normalization.
    Rows with no allowed entries come out all-zero.
    """
    allowed = mask.astype(np.float64)
    shift = np.where(mask, raw.data, -np.inf).max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)  # constant wrt grad
    # Masked entries are pinned to the row max before exp so they can never
    # overflow; the mask multiplies them (and their gradient) back to zero.
    pinned = raw * allowed + shift * (1.0 - allowed)
    e = (pinned - shift).exp() * allowed
    denom = e.sum(axis=-1, keepdims=True)
    # Empty rows divide by 1 instead of 0 and stay all-zero.
    safe = denom + (1.0 - mask.any(axis=-1, keepdims=True))
    return e / safe


class LogitsGraph:
    """Directed graph over teachers with learnable edge weights.

    ``mask[m, n]`` marks the edge from sender ``n`` into receiver ``m``; the
    default topology is the complete digraph without self-loops, except for a
    single teacher where the self-loop is kept so the graph degenerates to
    vanilla distillation. ``raw`` is receiver-major: row ``m`` holds the
    unconstrained scores of receiver m's incoming edges.
    """

    def __init__(self, n_teachers: int, temperatures=4.0, mask=None):
        if n_teachers < 1:
            raise ValueError(f"need at least one teacher, got {n_teachers}")
        self.n_teachers = n_teachers
        self.temperatures = _temperature_vector(temperatures, n_teachers, "teacher")
        if mask is None:
            if n_teachers == 1:
                mask = np.ones((1, 1), dtype=bool)
            else:
                mask = ~np.eye(n_teachers, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n_teachers, n_teachers):
            raise ValueError(f"mask must be {n_teachers}x{n_teachers}")
        if not mask.any():
            raise ValueError("graph has no edges")
        self.mask = mask
        self.raw = Tensor(np.zeros((n_teachers, n_teachers)), requires_grad=True)

    def parameters(self) -> list:
        return [self.raw]

    def effective_weights(self) -> Tensor:
        """Receiver-major weight matrix: entry [m, n] is e_{n->m}.

        Each receiving row's allowed weights sum to 1.
        """
        return _masked_softmax(self.raw, self.mask)

    def adjacency(self) -> np.ndarray:
        """Weight matrix in sender-major layout: entry [m, n] is e_{m->n}."""
        return self.effective_weights().data.T.copy()


class ReprGraph:
    """Weighting over the C(n, 2) pooled teacher-pair vertices.

    One learnable scalar per vertex by default; ``vector_edges=b`` keeps b
    weights per vertex whose softmaxed values are averaged after weighting.
    The per-vertex temperatures serve double duty, softening both the edge
    softmax and each vertex's distribution.
    """

    def __init__(self, n_teachers: int, temperatures=4.0, vector_edges: int = 0):
        if n_teachers < 2:
            raise ValueError(f"need at least two teachers, got {n_teachers}")
        self.n_teachers = n_teachers
        self.n_vertices = comb(n_teachers, 2)
        self.temperatures = _temperature_vector(
            temperatures, self.n_vertices, "vertex")
        if vector_edges < 0:
            raise ValueError(f"vector_edges must be nonnegative, got {vector_edges}")
        self.vector_edges = vector_edges
        shape = (self.n_vertices,) if not vector_edges else (
            self.n_vertices, vector_edges)
        self.raw = Tensor(np.zeros(shape), requires_grad=True)

    def parameters(self) -> list:
        return [self.raw]

    def vertex_weights(self) -> Tensor:
        """Per-vertex weights: softmax over vertices of raw params over
        temperatures. Sums to 1 along the vertex axis."""
        t = self.temperatures
        if self.vector_edges:
            t = t[:, None]
        return T.softmax(self.raw * Tensor(1.0 / t), axis=0)


def logits_graph_loss(student_logits, teacher_logits, g: LogitsGraph) -> Tensor:
    """Edge-weighted Earth-Mover imitation loss over the sender teachers.

    Every edge n->m contributes its weight times the W1 distance between
    sender n's temperature-softened distribution and the student's (unsoftened)
    distribution. Per-sender distances are batch-averaged, then combined with
    the senders' edge mass normalized by the total mass, so the result is a
    convex combination and uniform weights reduce exactly to the plain mean of
    per-teacher losses. Accepts (c,) logits or batched (B, c); the batched
    form returns the batch mean. Differentiable wrt student logits and the
    graph's raw parameters.
    """
    if len(teacher_logits) != g.n_teachers:
        raise ValueError(
            f"graph has {g.n_teachers} teachers but got {len(teacher_logits)} "
            "logit sets"
        )
    student = student_logits if isinstance(student_logits, Tensor) else Tensor(
        student_logits)
    c = student.shape[-1]
    targets = []
    for k, t_logits in enumerate(teacher_logits):
        t_data = t_logits.data if isinstance(t_logits, Tensor) else np.asarray(
            t_logits, dtype=np.float64)
        if t_data.shape != student.shape:
            raise ValueError(
                f"teacher {k} logits shape {t_data.shape} does not match "
                f"student {student.shape}"
            )
        targets.append(soften(t_data, g.temperatures[k]))
    # (n, ..., c) stack of softened teacher targets, constant wrt gradients.
    mu = Tensor(np.stack(targets))
    eta = T.softmax(student, axis=-1)
    per_edge = em_distance_1d(mu, eta)  # (n,) or (n, B)
    if per_edge.ndim == 2:
        per_edge = per_edge.mean(axis=1)
    sender_totals = g.effective_weights().sum(axis=0)  # weight mass per sender
    total_mass = sender_totals.sum()
    if float(total_mass.data) == 0.0:
        raise ValueError("graph has no active edges")
    return (sender_totals / total_mass * per_edge).sum()


def _vertex_channels(vertex_vector, temperature: float, spatial: int) -> np.ndarray:
    """Soften a pooled vertex vector and reshape it into channels."""
    v = vertex_vector.data if isinstance(vertex_vector, Tensor) else np.asarray(
        vertex_vector, dtype=np.float64)
    e = v.shape[-1]
    if e % spatial != 0:
        raise ValueError(
            f"vertex length {e} does not reshape to channels of spatial "
            f"size {spatial}"
        )
    softened = soften(v, temperature)
    return softened.reshape(v.shape[:-1] + (e // spatial, spatial))


def repr_graph_loss(student_feature, vertices, g: ReprGraph,
                    bandwidth: float = None) -> Tensor:
    """Weighted sum of per-vertex feature discrepancies against the student.

    Each vertex vector is temperature-softened over its full length, reshaped
    into channels matching the student's spatial size, and compared to the
    student's tap feature with Gaussian-kernel MMD; the per-vertex losses are
    combined with the graph's softmaxed weights. When no bandwidth is given,
    the median heuristic is evaluated once over the pooled channel vectors of
    this call and frozen. The student feature is (C, S) for a single sample,
    or batched (B, C, S) / (B, C, H, W); the batched forms return the batch
    mean. Differentiable wrt the student feature and the graph's raw
    parameters.
    """
    if len(vertices) != g.n_vertices:
        raise ValueError(
            f"graph has {g.n_vertices} vertices but got {len(vertices)}")
    student = student_feature if isinstance(student_feature, Tensor) else Tensor(
        student_feature)
    if student.ndim not in (2, 3, 4):
        raise ValueError(f"student feature must be 2-D to 4-D, got {student.ndim}")
    if student.ndim == 4:  # (B, C, H, W) -> (B, C, S)
        b, ch, hh, ww = student.shape
        student = student.reshape(b, ch, hh * ww)
    spatial = student.shape[-1]
    batched = student.ndim == 3

    channel_sets = []
    for k, vertex in enumerate(vertices):
        d = _vertex_channels(vertex.vector, g.temperatures[k], spatial)
        if batched and d.ndim == 2:
            d = np.broadcast_to(d, (student.shape[0],) + d.shape)
        channel_sets.append(d)

    if bandwidth is None:
        pooled = [soften(student.data.reshape(-1, spatial))]
        pooled += [d.reshape(-1, spatial) for d in channel_sets]
        pooled = np.concatenate(pooled, axis=0)
        # Cap the pairwise-distance computation; stride keeps it deterministic.
        if pooled.shape[0] > 256:
            step = -(-pooled.shape[0] // 256)
            pooled = pooled[::step]
        bandwidth = median_heuristic_bandwidth(pooled)

    weights = g.vertex_weights()
    if g.vector_edges:
        weights = weights.mean(axis=1)
    total = None
    for k, d in enumerate(channel_sets):
        ell = mmd_gaussian(student, Tensor(d), bandwidth)
        if batched:
            ell = ell.mean()
        term = weights[k] * ell
        total = term if total is None else total + term
    return total


def edge_weight_report(g) -> dict:
    """Current effective weights of either graph as plain serializable lists.

    Logits graphs report the receiver-major matrix (row m holds the incoming
    weights e_{n->m}, summing to 1 over unmasked entries); representation
    graphs report the per-vertex weight vector.
    """
    if isinstance(g, LogitsGraph):
        return {
            "kind": "logits",
            "weights": g.effective_weights().data.tolist(),
            "mask": g.mask.astype(int).tolist(),
        }
    if isinstance(g, ReprGraph):
        weights = g.vertex_weights()
        if g.vector_edges:
            weights = weights.mean(axis=1)
        return {"kind": "repr", "weights": weights.data.tolist()}
    raise TypeError(f"not a graph: {type(g).__name__}")
