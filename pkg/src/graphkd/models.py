"""Tiny convolutional teachers and the lighter student.

Teachers share one encoder skeleton (4 conv blocks) topped by a per-task
pretext head; after pretext training a linear classification head is added
so every teacher scores full frame-stacked clips in the same c-class space.
Single-frame pretext encoders score clips by encoding each frame and
concatenating the embeddings; the prediction teacher consumes its native
context stack. The student is a strictly smaller 3-block encoder with its
own linear head. The last encoder block is the designated feature tap;
teacher and student taps share spatial size by construction.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .losses import cross_entropy
from .optim import Adam
from .tensor import NonFiniteError, Tensor

TEACHER_CHANNELS = (16, 32, 64, 64)
TEACHER_STRIDES = (2, 2, 2, 1)
STUDENT_CHANNELS = (8, 16, 32)
STUDENT_STRIDES = (2, 2, 2)
TASKS = ("S", "M", "T", "P")


class Conv2dLayer:
    def __init__(self, in_ch, out_ch, ksize, stride, padding, rng):
        fan_in = in_ch * ksize * ksize
        self.weight = Tensor(
            rng.standard_normal((out_ch, in_ch, ksize, ksize))
            * np.sqrt(2.0 / fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class Linear:
    def __init__(self, in_features, out_features, rng):
        self.weight = Tensor(
            rng.standard_normal((in_features, out_features))
            * np.sqrt(1.0 / in_features),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class Encoder:
    """Stack of conv+ReLU blocks with a designated feature-tap block."""

    def __init__(self, in_channels, channels, strides, rng, tap_index=None):
        if len(channels) != len(strides):
            raise ValueError("need one stride per channel count")
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.tap_index = len(channels) - 1 if tap_index is None else tap_index
        if not 0 <= self.tap_index < len(channels):
            raise ValueError(f"tap index {tap_index} out of range")
        self.blocks = []
        prev = in_channels
        for ch, st in zip(channels, strides):
            self.blocks.append(Conv2dLayer(prev, ch, 3, st, 1, rng))
            prev = ch

    def forward(self, x: Tensor):
        """Returns (final feature map, tap feature map)."""
        tap = None
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h).relu()
            if i == self.tap_index:
                tap = h
        return h, tap

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]


# -- pretext heads ---------------------------------------------------------------


class ConcatClassifierHead:
    """Linear classifier over concatenated siamese embeddings (tasks S, M)."""

    def __init__(self, arity, embed_dim, n_classes, rng):
        self.arity = arity
        self.linear = Linear(arity * embed_dim, n_classes, rng)

    def parameters(self):
        return self.linear.parameters()


class TripletHead:
    """Linear projection scored with a squared-distance margin (task T)."""

    def __init__(self, embed_dim, proj_dim, rng, margin=1.0):
        self.linear = Linear(embed_dim, proj_dim, rng)
        self.margin = margin

    def parameters(self):
        return self.linear.parameters()


class DecoderHead:
    """Conv decoder from the (C, 4, 4) feature map back to one frame (task P)."""

    def __init__(self, in_ch, out_ch, rng):
        self.convs = [
            Conv2dLayer(in_ch, 32, 3, 1, 1, rng),
            Conv2dLayer(32, 16, 3, 1, 1, rng),
            Conv2dLayer(16, 8, 3, 1, 1, rng),
            Conv2dLayer(8, out_ch, 3, 1, 1, rng),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs[:-1]:
            h = T.upsample2x(conv(h).relu())
        return self.convs[-1](h)

    def parameters(self):
        return [p for c in self.convs for p in c.parameters()]


# -- models -----------------------------------------------------------------------


def _flatten(feature: Tensor) -> Tensor:
    return feature.reshape(feature.shape[0], -1)


class TeacherModel:
    def __init__(self, task, encoder, pretext_head):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.encoder = encoder
        self.pretext_head = pretext_head
        self.classifier = None
        self.frozen = False

    def parameters(self):
        params = self.encoder.parameters() + self.pretext_head.parameters()
        if self.classifier is not None:
            params += self.classifier.parameters()
        return params

    def embed(self, x: Tensor) -> Tensor:
        """Flattened final feature of raw (B, in_ch, H, W) pretext inputs."""
        final, _ = self.encoder.forward(x)
        return _flatten(final)

    def clip_features(self, clips: Tensor):
        """Clip-level embedding and tap, routed by the encoder's input arity.

        Single-frame encoders see each frame separately; their per-frame
        embeddings concatenate and their taps average over frames. Encoders
        with wider input (the prediction task's context stack) consume the
        leading frames as channels in one pass. Keeps pretext weights in the
        input regime they were trained on.
        """
        x = clips if isinstance(clips, Tensor) else Tensor(clips)
        b, f = x.shape[0], x.shape[1]
        enc_in = self.encoder.in_channels
        if enc_in == 1:
            frames = x.reshape(b * f, 1, *x.shape[2:])
            final, tap = self.encoder.forward(frames)
            embed = _flatten(final).reshape(b, -1)
            tap = tap.reshape(b, f, *tap.shape[1:]).mean(axis=1)
            return embed, tap
        if enc_in <= f:
            final, tap = self.encoder.forward(x[:, :enc_in])
            return _flatten(final), tap
        raise ValueError(
            f"encoder expects {enc_in} channels but clips have {f}")

    def forward_clip(self, clips: Tensor):
        """(logits, tap) for a frame-stacked (B, F*ch, H, W) clip batch."""
        if self.classifier is None:
            raise RuntimeError("teacher has no classifier; fine-tune it first")
        embed, tap = self.clip_features(clips)
        return self.classifier(embed), tap


class StudentModel:
    def __init__(self, clip_channels, n_classes, rng,
                 channels=STUDENT_CHANNELS, strides=STUDENT_STRIDES,
                 frame_size=32):
        self.encoder = Encoder(clip_channels, channels, strides, rng)
        spatial = _out_spatial(frame_size, strides)
        self.classifier = Linear(channels[-1] * spatial * spatial, n_classes, rng)
        self.n_classes = n_classes

    def parameters(self):
        return self.encoder.parameters() + self.classifier.parameters()

    def forward_clip(self, clips: Tensor):
        final, tap = self.encoder.forward(
            clips if isinstance(clips, Tensor) else Tensor(clips))
        return self.classifier(_flatten(final)), tap


def _out_spatial(size: int, strides) -> int:
    for s in strides:
        size = (size + 2 - 3) // s + 1  # ksize 3, padding 1
    return size


def param_count(model) -> int:
    return sum(p.data.size for p in model.parameters())


def checksum(model) -> str:
    """SHA-256 over every parameter's raw bytes, in definition order."""
    digest = hashlib.sha256()
    for p in model.parameters():
        digest.update(p.data.tobytes())
    return digest.hexdigest()


def stack_clips(clips) -> tuple:
    """(N, F*ch, H, W) array plus int label vector from a list of clips."""
    frames = np.stack([c.frames for c in clips])
    n, f, ch, h, w = frames.shape
    return frames.reshape(n, f * ch, h, w), np.array([c.label for c in clips])


def forward_with_tap(model, clip):
    """Logits and tap feature for one clip (F, ch, H, W) or a batch of them."""
    frames = clip.frames if hasattr(clip, "frames") else np.asarray(clip)
    single = frames.ndim == 4
    if single:
        frames = frames[None]
    n, f, ch, h, w = frames.shape
    logits, tap = model.forward_clip(Tensor(frames.reshape(n, f * ch, h, w)))
    if single:
        return logits.reshape(-1), tap.reshape(tap.shape[1:])
    return logits, tap


# -- pretext training -------------------------------------------------------------


def build_teacher(task, seed, sample_shapes, n_pretext_classes=None) -> TeacherModel:
    """Seeded teacher whose head dimensions follow the task's sample shapes.

    ``sample_shapes`` is the tuple of input-array shapes of one
    PretextSample of the task.
    """
    rng = np.random.default_rng([seed, TASKS.index(task)])
    if task == "S":
        n, hh, _ = sample_shapes[0]
        enc = Encoder(1, TEACHER_CHANNELS, TEACHER_STRIDES, rng)
        dim = TEACHER_CHANNELS[-1] * _out_spatial(hh, TEACHER_STRIDES) ** 2
        head = ConcatClassifierHead(n, dim, n_pretext_classes, rng)
    elif task == "M":
        ch, hh, _ = sample_shapes[0]
        enc = Encoder(ch, TEACHER_CHANNELS, TEACHER_STRIDES, rng)
        dim = TEACHER_CHANNELS[-1] * _out_spatial(hh, TEACHER_STRIDES) ** 2
        head = ConcatClassifierHead(2, dim, 2, rng)
    elif task == "T":
        ch, ps, _ = sample_shapes[0]
        enc = Encoder(ch, TEACHER_CHANNELS, TEACHER_STRIDES, rng)
        dim = TEACHER_CHANNELS[-1] * _out_spatial(ps, TEACHER_STRIDES) ** 2
        head = TripletHead(dim, 32, rng)
    elif task == "P":
        ctx_ch, hh, _ = sample_shapes[0]
        enc = Encoder(ctx_ch, TEACHER_CHANNELS, TEACHER_STRIDES, rng)
        head = DecoderHead(TEACHER_CHANNELS[-1], 1, rng)
    else:
        raise ValueError(f"unknown task {task!r}")
    return TeacherModel(task, enc, head)


def _collate(samples):
    inputs = [np.stack([s.inputs[i] for s in samples])
              for i in range(len(samples[0].inputs))]
    targets = None
    if samples[0].target is not None:
        targets = np.stack([np.asarray(s.target) for s in samples])
    return inputs, targets


def pretext_loss(model: TeacherModel, samples) -> tuple:
    """(loss Tensor, fraction correct or None) on a list of same-task samples."""
    inputs, targets = _collate(samples)
    task = model.task
    if task == "S":
        stack = inputs[0]  # (B, n, H, W)
        b, n, h, w = stack.shape
        emb = model.embed(Tensor(stack.reshape(b * n, 1, h, w)))
        logits = model.pretext_head.linear(emb.reshape(b, -1))
    elif task == "M":
        embs = [model.embed(Tensor(x[:, None] if x.ndim == 3 else x))
                for x in inputs]
        logits = model.pretext_head.linear(T.concatenate(embs, axis=1))
    elif task == "T":
        head = model.pretext_head
        a, p, n = (head.linear(model.embed(Tensor(x))) for x in inputs)
        d_ap = ((a - p) ** 2).sum(axis=1)
        d_an = ((a - n) ** 2).sum(axis=1)
        loss = (d_ap - d_an + head.margin).relu().mean()
        acc = float((d_ap.data < d_an.data).mean())
        return loss, acc
    elif task == "P":
        final, _ = model.encoder.forward(Tensor(inputs[0]))
        pred = model.pretext_head(final)
        return ((pred - Tensor(targets)) ** 2).mean(), None
    else:
        raise ValueError(f"unknown task {task!r}")
    loss = cross_entropy(logits, targets)
    acc = float((logits.data.argmax(axis=1) == targets).mean())
    return loss, acc


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def pretrain_teacher(task, train_samples, val_samples=None, seed=0,
                     epochs=30, plateau=10, batch_size=32, lr=1e-3,
                     n_pretext_classes=None) -> TeacherModel:
    """Train encoder + pretext head until the validation loss plateaus.

    Stops once the best validation loss has not improved for ``plateau``
    consecutive epochs (training loss stands in when no validation set is
    given), or at ``epochs``. A non-finite loss aborts with a diagnostic.
    """
    shapes = tuple(x.shape for x in train_samples[0].inputs)
    model = build_teacher(task, seed, shapes, n_pretext_classes)
    rng = np.random.default_rng([seed, 1000 + TASKS.index(task)])
    opt = Adam(model.parameters(), lr=lr)
    best, stale = np.inf, 0
    history = []
    try:
        for epoch in range(epochs):
            for idx in _epoch_batches(len(train_samples), batch_size, rng):
                loss, _ = pretext_loss(model, [train_samples[i] for i in idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
            probe = val_samples if val_samples else train_samples
            val_loss = pretext_loss(model, probe)[0].item()
            history.append(val_loss)
            if val_loss < best - 1e-6:
                best, stale = val_loss, 0
            else:
                stale += 1
                if stale >= plateau:
                    break
    except NonFiniteError as err:
        raise RuntimeError(
            f"pretext training of task {task} diverged at epoch "
            f"{len(history)}: {err}"
        ) from err
    model.pretrain_history = history
    return model


def finetune_classifier(model, clips, n_classes, policy="full", seed=0,
                        epochs=20, batch_size=32, lr=1e-3):
    """Attach a classification head and train it on labeled clips.

    ``policy="frozen"`` trains only the new head, leaving the encoder
    bitwise untouched; ``"full"`` fine-tunes everything. Returns the model.
    """
    if policy not in ("full", "frozen"):
        raise ValueError(f"unknown fine-tune policy {policy!r}")
    x, y = stack_clips(clips)
    rng = np.random.default_rng([seed, 2000])
    new_params = []
    if isinstance(model, TeacherModel):
        if model.classifier is None:
            probe, _ = model.clip_features(Tensor(x[:1]))
            model.classifier = Linear(probe.shape[1], n_classes, rng)
        new_params = model.classifier.parameters()
    trained = new_params + (model.encoder.parameters() if policy == "full" else [])
    if not trained:
        raise ValueError("nothing to train: frozen policy on a headless model")
    opt = Adam(trained, lr=lr)
    try:
        for _ in range(epochs):
            for idx in _epoch_batches(len(clips), batch_size, rng):
                logits, _ = model.forward_clip(Tensor(x[idx]))
                loss = cross_entropy(logits, y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
    except NonFiniteError as err:
        raise RuntimeError(f"fine-tuning diverged: {err}") from err
    return model


def save_teacher(path: str, model: TeacherModel, seed: int,
                 sample_shapes, n_pretext_classes=None):
    """Persist a teacher with enough structure metadata to rebuild it."""
    from .checkpoint import config_hash, save_checkpoint

    meta = {
        "task": model.task,
        "seed": seed,
        "sample_shapes": [list(s) for s in sample_shapes],
        "n_pretext_classes": n_pretext_classes,
        "finetuned": model.classifier is not None,
    }
    if model.classifier is not None:
        meta["classifier_in"] = model.classifier.weight.shape[0]
        meta["n_classes"] = model.classifier.weight.shape[1]
    arrays = {f"param.{i}": p.data for i, p in enumerate(model.parameters())}
    save_checkpoint(path, arrays, config_hash(meta), meta=meta)


def load_teacher(path: str) -> TeacherModel:
    from .checkpoint import load_checkpoint

    ck = load_checkpoint(path)
    meta = ck["meta"]
    shapes = tuple(tuple(s) for s in meta["sample_shapes"])
    model = build_teacher(meta["task"], meta["seed"], shapes,
                          meta["n_pretext_classes"])
    if meta["finetuned"]:
        rng = np.random.default_rng(0)  # overwritten below
        model.classifier = Linear(meta["classifier_in"], meta["n_classes"], rng)
    params = model.parameters()
    if len(params) != len(ck["arrays"]):
        raise ValueError("checkpoint does not match the rebuilt teacher")
    for i, p in enumerate(params):
        arr = ck["arrays"][f"param.{i}"]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ValueError(f"parameter {i} shape mismatch")
        p.data = arr.astype(np.float64)
    return model


def cka_linear(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Linear centered-kernel alignment between two (N, D) feature matrices."""
    a = features_a - features_a.mean(axis=0)
    b = features_b - features_b.mean(axis=0)
    cross = np.linalg.norm(b.T @ a) ** 2
    denom = np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b)
    return float(cross / denom) if denom > 0 else 0.0
