"""Synthetic moving-shape clips and the four pretext tasks built from them.

Every clip is a short grayscale video of one shape drifting across the
frame. The four self-supervised tasks (frame sorting, ego-motion gap
classification, patch tracking, next-frame prediction) each label the same
raw clips differently, giving four teachers four different things to learn.
"""

import numpy as np

from graphkd.data import (
    class_names,
    decode_sorting_label,
    generate_dataset,
    make_egomotion_samples,
    make_prediction_samples,
    make_sorting_samples,
    make_tracking_samples,
    sorting_classes,
)


def ascii_frame(frame, threshold=0.3):
    img = frame[0] if frame.ndim == 3 else frame
    rows = []
    for row in img[::2]:  # halve vertically so the aspect looks right
        rows.append("".join("#" if v > threshold else "." for v in row))
    return "\n".join(rows)


clips = generate_dataset(seed=4, n_clips=8)
names = class_names(8)
print("=== clip classes ===")
for clip in clips:
    meta = clip.metadata
    print(f"  label {clip.label} ({names[clip.label]:>14}): "
          f"velocity {meta['velocity']}, start {meta['positions'][0]}")

clip = clips[0]
print()
print(f"=== first and last frame of a '{names[clip.label]}' clip ===")
print(ascii_frame(clip.frames[0]))
print()
print(ascii_frame(clip.frames[-1]))

rng = np.random.default_rng(0)
print()
print("=== task S: frame sorting ===")
print(f"label space for 3-frame windows: {sorting_classes(3)}")
sample = make_sorting_samples(clip, 3, rng)
print(f"drawn permutation {sample.info['perm']} -> label {sample.target} "
      f"-> decodes to {decode_sorting_label(sample.target, 3)}")

print()
print("=== task M: ego-motion gap ===")
for _ in range(3):
    sample = make_egomotion_samples(clip, 3, rng)
    kind = "close" if sample.target == 1 else "far"
    print(f"  frames {sample.info['t']} and {sample.info['t'] + sample.info['gap']}"
          f" (gap {sample.info['gap']}) -> {kind}")

print()
print("=== task T: patch tracking ===")
sample = make_tracking_samples(clip, 8, rng)
print(f"anchor box {sample.info['anchor']}, positive {sample.info['positive']},"
      f" negative {sample.info['negative']}")
print(f"inputs: {len(sample.inputs)} patches of shape {sample.inputs[0].shape}")

print()
print("=== task P: next-frame prediction ===")
sample = make_prediction_samples(clip, 3)
print(f"context stack {sample.inputs[0].shape} -> target frame "
      f"{sample.target.shape}")
err = float(((sample.inputs[0][-1] - sample.target[0]) ** 2).mean())
print(f"copy-last-frame baseline MSE on this clip: {err:.5f}")
