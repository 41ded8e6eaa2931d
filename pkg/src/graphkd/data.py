"""Synthetic moving-shape clips and the four self-supervised task samplers.

Each clip shows one bright geometric shape translating across a dark frame
at constant integer velocity; the class label encodes the (shape, direction)
pair. The generator records exact per-frame positions so task samplers and
tests can consult ground-truth motion instead of estimating it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

SHAPES = ("square", "disk", "triangle", "cross")
DIRECTIONS = ("right", "down")
FORMAT_VERSION = 1


@dataclass
class GeometryConfig:
    frame_size: int = 32
    n_frames: int = 4
    channels: int = 1
    shape_size: int = 8
    speeds: tuple = (1, 2)
    min_intensity: float = 0.6

    def validate(self):
        if self.shape_size > self.frame_size:
            raise ValueError(
                f"shape of size {self.shape_size} does not fit a "
                f"{self.frame_size}-pixel frame"
            )
        if self.n_frames < 4:
            raise ValueError(f"need at least 4 frames, got {self.n_frames}")
        travel = max(abs(s) for s in self.speeds) * (self.n_frames - 1)
        if self.shape_size + travel > self.frame_size:
            raise ValueError(
                f"shape of size {self.shape_size} moving {travel} pixels "
                f"leaves a {self.frame_size}-pixel frame"
            )


@dataclass
class VideoClip:
    frames: np.ndarray  # (F, ch, H, W), values in [0, 1]
    label: int
    metadata: dict = field(default_factory=dict)


@dataclass
class PretextSample:
    task: str  # one of "S", "M", "T", "P"
    inputs: tuple
    target: object
    info: dict = field(default_factory=dict)  # sampler bookkeeping for audits


def _shape_stencil(kind: str, k: int) -> np.ndarray:
    """Binary k x k stencil of one of the four shapes."""
    ii, jj = np.mgrid[0:k, 0:k]
    if kind == "square":
        return np.ones((k, k))
    if kind == "disk":
        c = (k - 1) / 2.0
        return ((ii - c) ** 2 + (jj - c) ** 2 <= (k / 2.0) ** 2).astype(float)
    if kind == "triangle":
        return (jj <= ii).astype(float)
    if kind == "cross":
        third = k // 3
        bar = (np.abs(ii - (k - 1) / 2.0) <= third / 2.0)
        return (bar | bar.T).astype(float)
    raise ValueError(f"unknown shape {kind!r}")


def class_names(n_classes: int) -> list:
    """Label names, cycling shapes fastest then directions."""
    names = [f"{s}_{d}" for d in DIRECTIONS for s in SHAPES]
    if not 2 <= n_classes <= len(names):
        raise ValueError(f"n_classes must be in [2, {len(names)}]")
    return names[:n_classes]


def _render_clip(label: int, geometry: GeometryConfig, rng) -> VideoClip:
    g = geometry
    names = [f"{s}_{d}" for d in DIRECTIONS for s in SHAPES]
    shape, direction = names[label].split("_")
    speed = int(rng.choice(g.speeds))
    velocity = (0, speed) if direction == "right" else (speed, 0)

    travel_y = abs(velocity[0]) * (g.n_frames - 1)
    travel_x = abs(velocity[1]) * (g.n_frames - 1)
    start_y = int(rng.integers(0, g.frame_size - g.shape_size - travel_y + 1))
    start_x = int(rng.integers(0, g.frame_size - g.shape_size - travel_x + 1))
    intensity = float(rng.uniform(g.min_intensity, 1.0))

    stencil = _shape_stencil(shape, g.shape_size) * intensity
    frames = np.zeros(
        (g.n_frames, g.channels, g.frame_size, g.frame_size), dtype=np.float64)
    positions = []
    for f in range(g.n_frames):
        y = start_y + velocity[0] * f
        x = start_x + velocity[1] * f
        frames[f, :, y:y + g.shape_size, x:x + g.shape_size] = stencil
        positions.append((y, x))

    return VideoClip(
        frames=frames,
        label=label,
        metadata={
            "shape": shape,
            "direction": direction,
            "speed": speed,
            "velocity": list(velocity),
            "positions": [list(p) for p in positions],
            "intensity": intensity,
            "shape_size": g.shape_size,
        },
    )


def generate_dataset(seed: int, n_clips: int, n_classes: int = 8,
                     geometry: GeometryConfig = None) -> list:
    """Deterministic list of labeled clips, classes balanced round-robin.

    Each clip draws from its own ``default_rng([seed, index])`` stream, so
    generation is order-independent and parallelizable per index.
    """
    geometry = geometry or GeometryConfig()
    geometry.validate()
    class_names(n_classes)  # validates the class count
    clips = []
    for index in range(n_clips):
        rng = np.random.default_rng([seed, index])
        clips.append(_render_clip(index % n_classes, geometry, rng))
    return clips


# -- sequence sorting (task S) --------------------------------------------------


def sorting_classes(n: int) -> list:
    """Canonical permutations of n frames, one per reversal pair.

    A shuffled tuple and its reverse are indistinguishable when played
    backwards, so both map to the lexicographically smaller of the two.
    """
    if n not in (3, 4):
        raise ValueError(f"sorting tuples must have 3 or 4 frames, got {n}")
    canon = sorted(
        {min(p, tuple(reversed(p))) for p in permutations(range(n))})
    return canon


def sorting_label(perm) -> int:
    perm = tuple(int(i) for i in perm)
    canon = min(perm, tuple(reversed(perm)))
    return sorting_classes(len(perm)).index(canon)


def decode_sorting_label(label: int, n: int) -> tuple:
    """Canonical permutation for a label (its reverse shares the label)."""
    return sorting_classes(n)[label]


def make_sorting_samples(clip: VideoClip, n: int, rng=None) -> PretextSample:
    """Shuffle a window of n grayscale frames; the label names the shuffle."""
    rng = rng or np.random.default_rng(0)
    frames = clip.frames
    if n > frames.shape[0]:
        raise ValueError(f"cannot sort {n} frames of a {frames.shape[0]}-frame clip")
    start = int(rng.integers(0, frames.shape[0] - n + 1))
    perm = tuple(int(i) for i in rng.permutation(n))
    gray = frames[start:start + n].mean(axis=1)  # (n, H, W)
    return PretextSample(
        task="S", inputs=(gray[list(perm)],), target=sorting_label(perm),
        info={"perm": perm, "window_start": start})


# -- egomotion / temporal closeness (task M) -----------------------------------


def make_egomotion_samples(clip: VideoClip, max_gap: int,
                           rng=None) -> PretextSample:
    """Frame pair labeled close (gap 1) or far (gap max_gap), fair coin.

    Gaps strictly between the two thresholds are ambiguous and never
    produced.
    """
    rng = rng or np.random.default_rng(0)
    n_frames = clip.frames.shape[0]
    if max_gap >= n_frames:
        raise ValueError(f"max_gap {max_gap} needs more than {n_frames} frames")
    if max_gap < 2:
        raise ValueError("far threshold collapses onto close; need max_gap >= 2")
    close = bool(rng.integers(0, 2))
    gap = 1 if close else max_gap
    t = int(rng.integers(0, n_frames - gap))
    return PretextSample(
        task="M",
        inputs=(clip.frames[t], clip.frames[t + gap]),
        target=int(close),
        info={"t": t, "gap": gap},
    )


# -- patch tracking (task T) ----------------------------------------------------


def _box_iou(a, b, size: int) -> float:
    inter_h = max(0, min(a[0], b[0]) + size - max(a[0], b[0]))
    inter_w = max(0, min(a[1], b[1]) + size - max(a[1], b[1]))
    inter = inter_h * inter_w
    return inter / (2 * size * size - inter)


def make_tracking_samples(clip: VideoClip, patch_size: int, rng=None,
                          delta: int = 1) -> PretextSample:
    """Triplet of patches: anchor at t, tracked positive at t+delta, distractor.

    Patches are centered on the object via generator metadata. Returns None
    when the centered patch would leave the frame, or when the patch is so
    large no distractor placement exists (sample skipped). The distractor
    patch overlaps the positive location by at most 25% IoU, uniform over
    the placements that satisfy the cap.
    """
    rng = rng or np.random.default_rng(0)
    frames = clip.frames
    n_frames, _, height, width = frames.shape
    if patch_size >= min(height, width):
        raise ValueError(f"patch size {patch_size} does not fit the frame")
    positions = clip.metadata["positions"]
    shape_size = clip.metadata["shape_size"]
    t = int(rng.integers(0, n_frames - delta))

    offset = (shape_size - patch_size) // 2
    boxes = []
    for frame_idx in (t, t + delta):
        y = positions[frame_idx][0] + offset
        x = positions[frame_idx][1] + offset
        if not (0 <= y <= height - patch_size and 0 <= x <= width - patch_size):
            return None  # object (plus patch margin) left the frame
        boxes.append((y, x))
    (ay, ax), (py, px) = boxes

    valid = [
        (y, x)
        for y in range(height - patch_size + 1)
        for x in range(width - patch_size + 1)
        if _box_iou((y, x), (py, px), patch_size) <= 0.25
    ]
    if not valid:
        return None  # patch so large every placement overlaps the positive
    ny, nx = valid[int(rng.integers(0, len(valid)))]

    cut = lambda f, y, x: frames[f, :, y:y + patch_size, x:x + patch_size]
    return PretextSample(
        task="T",
        inputs=(cut(t, ay, ax), cut(t + delta, py, px), cut(t + delta, ny, nx)),
        target=None,
        info={"t": t, "anchor": (ay, ax), "positive": (py, px),
              "negative": (ny, nx)},
    )


# -- next-frame prediction (task P) ----------------------------------------------


def make_prediction_samples(clip: VideoClip, context_len: int) -> PretextSample:
    """First context_len frames stacked along channels; next frame is target."""
    frames = clip.frames
    if not 1 <= context_len < frames.shape[0]:
        raise ValueError(
            f"context of {context_len} frames needs a longer clip than "
            f"{frames.shape[0]}"
        )
    _, ch, height, width = frames.shape
    context = frames[:context_len].reshape(context_len * ch, height, width)
    return PretextSample(
        task="P", inputs=(context,), target=frames[context_len].copy())


# -- persistence ------------------------------------------------------------------


def save_dataset(clips: list, directory: str, seed: int = None):
    """Write clips.bin (raw little-endian float64) plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    frames = np.stack([c.frames for c in clips]).astype("<f8")
    frames.tofile(os.path.join(directory, "clips.bin"))
    manifest = {
        "version": FORMAT_VERSION,
        "seed": seed,
        "n_clips": len(clips),
        "clip_shape": list(frames.shape[1:]),
        "dtype": "<f8",
        "labels": [int(c.label) for c in clips],
        "metadata": [c.metadata for c in clips],
    }
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(directory: str) -> list:
    with open(os.path.join(directory, "manifest.txt")) as fh:
        manifest = json.load(fh)
    if manifest["version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {manifest['version']}")
    shape = [manifest["n_clips"]] + manifest["clip_shape"]
    frames = np.fromfile(
        os.path.join(directory, "clips.bin"), dtype=manifest["dtype"]
    ).reshape(shape).astype(np.float64)
    return [
        VideoClip(frames=frames[i], label=manifest["labels"][i],
                  metadata=manifest["metadata"][i])
        for i in range(manifest["n_clips"])
    ]
