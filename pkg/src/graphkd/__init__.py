"""Graph-based multi-teacher knowledge distillation on synthetic video.

Subpackages:

- :mod:`graphkd.tensor` — minimal reverse-mode autodiff engine (float64/numpy).
- :mod:`graphkd.sketch` — count-sketch projections and compact bilinear pooling.
- :mod:`graphkd.losses` — cross-entropy, 1-D earth-mover distance, Sinkhorn
  transport, Gaussian-kernel MMD.
- :mod:`graphkd.graphs` — learnable teacher-weighting graphs over logits and
  pooled representations.
- :mod:`graphkd.data` — synthetic moving-shape clips and the four pretext-task
  samplers (frame sorting, temporal proximity, patch tracking, frame
  prediction).
- :mod:`graphkd.models` — tiny convolutional teachers and student.
- :mod:`graphkd.training` — distillation loop, metrics, ablation harness.
- :mod:`graphkd.checkpoint` — versioned binary checkpoints.
- :mod:`graphkd.cli` — command-line entry points.
"""

from graphkd.tensor import Tensor, NonFiniteError

__all__ = ["Tensor", "NonFiniteError"]
__version__ = "0.1.0"
