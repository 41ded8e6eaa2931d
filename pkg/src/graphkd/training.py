"""Distillation training loop, metrics, evaluation, and the ablation grid.

One run mixes three loss terms: hard-label cross-entropy, the edge-weighted
Earth-Mover imitation loss over the teacher logits graph, and the weighted
feature-discrepancy loss over the pooled-pair representation graph. Ablation
modes zero individual terms. Teachers stay frozen throughout; their logits
and pooled pair vertices are precomputed once per dataset.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .graphs import LogitsGraph, ReprGraph, edge_weight_report, logits_graph_loss, repr_graph_loss
from .losses import cross_entropy
from .models import StudentModel, checksum, stack_clips
from .optim import Adam
from .sketch import BilinearVertex, SketchBank, build_vertices
from .tensor import NonFiniteError, Tensor

MODES = ("scratch", "uniform_kd", "gl_only", "gr_only", "gl_gr")

CSV_COLUMNS = ("epoch", "lr", "train_ce", "train_soft", "train_repr",
               "train_total", "val_ce", "val_acc")


@dataclass
class DistillConfig:
    lambda_: float = 0.6  # weight between hard CE and the soft graph term
    beta: float = 0.5  # weight of the representation-graph term
    temperatures: float = 4.0
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.01
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.5
    beta1: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    mode: str = "gl_gr"
    sketch_dim: int = 256
    bandwidth: float = None  # fixed kernel bandwidth; None means per-batch median

    def __post_init__(self):
        if not 0 <= self.lambda_ < 1:
            raise ValueError(f"lambda must be in [0,1), got {self.lambda_}")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if np.any(np.asarray(self.temperatures, dtype=float) <= 0):
            raise ValueError("temperatures must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs or batch_size")
        if self.lr_decay_every < 1 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError("bad lr decay settings")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lambda_" else f.name
            value = getattr(self, f.name)
            out[key] = list(value) if isinstance(value, (tuple, np.ndarray)) else value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def paper_scale(config: DistillConfig) -> DistillConfig:
    """The full-size schedule: 350 epochs, batch 128, decay every 50."""
    return replace(config, epochs=350, batch_size=128, lr_decay_every=50)


def parse_config_file(path: str) -> dict:
    """key = value lines into a dict; '#' comments; numbers auto-coerced."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            for cast in (int, float):
                try:
                    value = cast(value)
                    break
                except ValueError:
                    continue
            out[key] = value
    return out


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_ce: float
    train_soft: float
    train_repr: float
    train_total: float
    val_ce: float
    val_acc: float
    edge_weights: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def csv_row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


class TeacherCache:
    """Frozen per-clip teacher logits and pooled pair vertices.

    Teachers never change during distillation, so one forward pass per split
    suffices; batches then slice arrays instead of re-running teachers.
    """

    def __init__(self, teachers, clips, bank: SketchBank = None,
                 chunk: int = 128):
        x, _ = stack_clips(clips)
        logit_chunks = [[] for _ in teachers]
        tap_chunks = [[] for _ in teachers]
        for start in range(0, x.shape[0], chunk):
            part = Tensor(x[start:start + chunk])
            for k, teacher in enumerate(teachers):
                logits, tap = teacher.forward_clip(part)
                logit_chunks[k].append(logits.data.copy())
                if bank is not None:
                    tap_chunks[k].append(
                        tap.data.reshape(tap.shape[0], -1).copy())
        self.logits = [np.concatenate(c) for c in logit_chunks]
        self.vertices = None
        if bank is not None:
            taps = [np.concatenate(c) for c in tap_chunks]
            self.vertices = build_vertices(taps, bank)

    def batch_logits(self, idx) -> list:
        return [l[idx] for l in self.logits]

    def batch_vertices(self, idx) -> list:
        return [BilinearVertex(v.vertex_id, v.pair, v.vector[idx])
                for v in self.vertices]


def total_loss(batch: dict, student, teachers, g_l, g_r,
               config: DistillConfig):
    """Batch objective and its logged parts, zeroed per ablation mode.

    ``batch`` carries the stacked clips under "x" and labels under "y";
    cached teacher outputs ride along under "teacher_logits" and
    "vertices" (computed on the fly from ``teachers`` when absent).
    Returns (total Tensor, {"ce", "soft", "repr"} floats).
    """
    mode = config.mode
    need_soft = mode in ("uniform_kd", "gl_only", "gl_gr")
    need_repr = mode in ("gr_only", "gl_gr")
    if (need_soft or need_repr) and not teachers and (
            batch.get("teacher_logits") is None):
        raise ValueError(f"mode {mode} needs teachers")

    logits, tap = student.forward_clip(Tensor(batch["x"]))
    ce = cross_entropy(logits, batch["y"])
    parts = {"ce": ce.item(), "soft": 0.0, "repr": 0.0}
    if mode == "scratch":
        return ce, parts

    total = ce * (1.0 - config.lambda_)
    if need_soft:
        t_logits = batch.get("teacher_logits")
        if t_logits is None:
            t_logits = [t.forward_clip(Tensor(batch["x"]))[0].data
                        for t in teachers]
        soft = logits_graph_loss(logits, t_logits, g_l)
        parts["soft"] = soft.item()
        total = total + soft * config.lambda_
    if need_repr:
        vertices = batch.get("vertices")
        if vertices is None:
            raise ValueError("representation modes need precomputed vertices")
        rep = repr_graph_loss(tap, vertices, g_r, bandwidth=config.bandwidth)
        parts["repr"] = rep.item()
        total = total + rep * config.beta
    return total, parts


def evaluate(model, clips, batch_size: int = 128) -> dict:
    """Top-1 accuracy with a per-class breakdown."""
    if not clips:
        raise ValueError("cannot evaluate an empty split")
    x, y = stack_clips(clips)
    predictions = []
    for start in range(0, x.shape[0], batch_size):
        logits, _ = model.forward_clip(Tensor(x[start:start + batch_size]))
        predictions.append(logits.data.argmax(axis=1))
    pred = np.concatenate(predictions)
    per_class = {}
    for k in sorted(set(int(label) for label in y)):
        mask = y == k
        per_class[k] = float((pred[mask] == k).mean())
    return {
        "accuracy": float((pred == y).mean()),
        "per_class": per_class,
        "n": int(y.size),
    }


def _training_parameters(student, g_l, g_r, mode: str) -> list:
    params = list(student.parameters())
    if mode in ("gl_only", "gl_gr"):
        params.append(g_l.raw)
    if mode in ("gr_only", "gl_gr"):
        params.append(g_r.raw)
    return params  # uniform_kd keeps g_l frozen at its uniform init


def _checkpoint_arrays(student, g_l, g_r, bank, opt) -> dict:
    arrays = {}
    for i, p in enumerate(student.parameters()):
        arrays[f"student.{i}"] = p.data
    if g_l is not None:
        arrays["g_l.raw"] = g_l.raw.data
    if g_r is not None:
        arrays["g_r.raw"] = g_r.raw.data
    if bank is not None:
        state = bank.state()
        for key in ("h1", "s1", "h2", "s2"):
            arrays[f"sketch.{key}"] = state[key]
        arrays["sketch.e"] = np.array([state["e"]])
        arrays["sketch.shared"] = np.array([int(state["shared"])])
    if opt is not None:
        arrays["adam.t"] = np.array([opt.t])
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"adam.m.{i}"] = m
            arrays[f"adam.v.{i}"] = v
    return arrays


def load_student_checkpoint(path: str, config: DistillConfig, student,
                            force: bool = False) -> dict:
    """Restore a student's parameters in place; returns the checkpoint meta."""
    ck = load_checkpoint(path, expected_hash=config.hash(), force=force)
    for i, p in enumerate(student.parameters()):
        arr = ck["arrays"][f"student.{i}"]
        if arr.shape != p.data.shape:
            raise ValueError(
                f"parameter {i} shape {arr.shape} does not match model "
                f"{p.data.shape}"
            )
        p.data = arr.astype(np.float64)
    return ck["meta"]


def write_metrics_csv(path: str, records: list):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(r.csv_row())


def train(config: DistillConfig, datasets: dict, teachers,
          run_dir: str = None):
    """Distill (or train from scratch) per config; returns (student, records).

    ``datasets`` maps split names to clip lists; "train" and "val" are
    required. When ``run_dir`` is given the loop writes metrics.csv,
    summary.txt, and a best-validation checkpoint there; on a non-finite
    loss it aborts with the last written checkpoint intact.
    """
    t_start = time.time()
    train_clips, val_clips = datasets["train"], datasets["val"]
    x, y = stack_clips(train_clips)
    n_classes = int(max(c.label for c in train_clips + val_clips)) + 1
    mode = config.mode

    need_soft = mode in ("uniform_kd", "gl_only", "gl_gr")
    need_repr = mode in ("gr_only", "gl_gr")
    if (need_soft or need_repr) and not teachers:
        raise ValueError(f"mode {mode} needs teachers")
    teachers = teachers or []
    before = [checksum(t) for t in teachers]

    rng = np.random.default_rng([config.seed, 314159])
    student = StudentModel(x.shape[1], n_classes,
                           np.random.default_rng([config.seed, 271828]))
    g_l = LogitsGraph(len(teachers), config.temperatures) if need_soft else None
    g_r, bank, cache, val_cache = None, None, None, None
    if need_soft or need_repr:
        if need_repr:
            probe = teachers[0].forward_clip(Tensor(x[:1]))[1]
            flat_dim = int(np.prod(probe.shape[1:]))
            bank = SketchBank.draw(flat_dim, config.sketch_dim,
                                   np.random.default_rng([config.seed, 161803]))
            g_r = ReprGraph(len(teachers), config.temperatures)
        cache = TeacherCache(teachers, train_clips, bank)

    opt = Adam(_training_parameters(student, g_l, g_r, mode),
               lr=config.lr, beta1=config.beta1,
               weight_decay=config.weight_decay)

    records = []
    best_acc, best_epoch = -1.0, -1
    ck_path = os.path.join(run_dir, "checkpoint.bin") if run_dir else None
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)

    def flush(abort_note=None):
        if not run_dir:
            return
        write_metrics_csv(os.path.join(run_dir, "metrics.csv"), records)
        summary = {
            "mode": mode,
            "seed": config.seed,
            "epochs_run": len(records),
            "best_val_acc": best_acc,
            "best_epoch": best_epoch,
            "final_val_acc": records[-1].val_acc if records else None,
            "wall_clock_s": time.time() - t_start,
            "config": config.to_dict(),
            "edge_weights": records[-1].edge_weights if records else {},
        }
        if abort_note:
            summary["aborted"] = abort_note
        with open(os.path.join(run_dir, "summary.txt"), "w") as fh:
            json.dump(summary, fh, indent=1)

    try:
        for epoch in range(config.epochs):
            opt.lr = config.lr * config.lr_decay_factor ** (
                epoch // config.lr_decay_every)
            sums = {"ce": 0.0, "soft": 0.0, "repr": 0.0, "total": 0.0}
            order = rng.permutation(len(train_clips))
            n_batches = 0
            for i in range(0, len(order), config.batch_size):
                idx = order[i:i + config.batch_size]
                batch = {"x": x[idx], "y": y[idx]}
                if need_soft:
                    batch["teacher_logits"] = cache.batch_logits(idx)
                if need_repr:
                    batch["vertices"] = cache.batch_vertices(idx)
                loss, parts = total_loss(batch, student, teachers, g_l, g_r,
                                         config)
                opt.zero_grad()
                loss.backward()
                opt.step()
                for key, value in parts.items():
                    sums[key] += value
                sums["total"] += loss.item()
                n_batches += 1

            val = evaluate(student, val_clips)
            val_x, val_y = stack_clips(val_clips)
            val_ce = cross_entropy(
                student.forward_clip(Tensor(val_x))[0], val_y).item()
            weights = {}
            if g_l is not None:
                weights["logits"] = edge_weight_report(g_l)
            if g_r is not None:
                weights["repr"] = edge_weight_report(g_r)
            records.append(MetricsRecord(
                epoch=epoch, lr=opt.lr,
                train_ce=sums["ce"] / n_batches,
                train_soft=sums["soft"] / n_batches,
                train_repr=sums["repr"] / n_batches,
                train_total=sums["total"] / n_batches,
                val_ce=val_ce, val_acc=val["accuracy"],
                edge_weights=weights,
                wall_clock=time.time() - t_start,
            ))
            if val["accuracy"] > best_acc:
                best_acc, best_epoch = val["accuracy"], epoch
                if ck_path:
                    save_checkpoint(
                        ck_path,
                        _checkpoint_arrays(student, g_l, g_r, bank, opt),
                        config.hash(),
                        meta={"epoch": epoch, "val_acc": best_acc,
                              "config": config.to_dict()},
                    )
    except NonFiniteError as err:
        flush(abort_note=str(err))
        raise RuntimeError(
            f"training diverged at epoch {len(records)}; last-good "
            f"checkpoint preserved: {err}"
        ) from err

    after = [checksum(t) for t in teachers]
    if before != after:
        raise RuntimeError("teacher parameters changed during distillation")
    flush()
    return student, records


def run_ablation(config: DistillConfig, datasets: dict, teachers,
                 modes=MODES, seeds=(0, 1, 2, 3, 4), out_dir: str = "ablation"):
    """Mode x seed grid sharing teachers and data; resumable per cell.

    Finished cells are recorded as JSON files keyed by the cell's config
    hash and reused on re-runs. Failures are reported per cell and do not
    stop the grid. Returns {"rows": per-mode summary, "cells": raw cells}.
    """
    os.makedirs(out_dir, exist_ok=True)
    cells = []
    for mode in modes:
        for seed in seeds:
            cell_cfg = replace(config, mode=mode, seed=seed)
            cell_path = os.path.join(out_dir, f"{mode}_seed{seed}.json")
            if os.path.exists(cell_path):
                with open(cell_path) as fh:
                    cell = json.load(fh)
                if cell.get("config_hash") == cell_cfg.hash():
                    cells.append(cell)
                    continue
            try:
                run_dir = os.path.join(out_dir, f"{mode}_seed{seed}")
                _, records = train(cell_cfg, datasets, teachers, run_dir)
                cell = {
                    "mode": mode, "seed": seed,
                    "accuracy": max(r.val_acc for r in records),
                    "config_hash": cell_cfg.hash(),
                }
            except Exception as err:  # partial failure: report, continue
                cell = {"mode": mode, "seed": seed, "error": str(err),
                        "config_hash": cell_cfg.hash()}
            with open(cell_path, "w") as fh:
                json.dump(cell, fh)
            cells.append(cell)

    rows = []
    for mode in modes:
        accs = [c["accuracy"] for c in cells
                if c["mode"] == mode and "accuracy" in c]
        errors = [c for c in cells if c["mode"] == mode and "error" in c]
        rows.append({
            "mode": mode,
            "n": len(accs),
            "mean": float(np.mean(accs)) if accs else None,
            "std": float(np.std(accs)) if accs else None,
            "errors": len(errors),
        })
    _write_ablation_outputs(out_dir, rows)
    return {"rows": rows, "cells": cells}


def _write_ablation_outputs(out_dir: str, rows: list):
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "n", "mean_acc", "std_acc", "errors"])
        for r in rows:
            writer.writerow([r["mode"], r["n"], r["mean"], r["std"],
                             r["errors"]])
    lines = [f"{'mode':<12} {'n':>3} {'mean':>8} {'std':>8} {'errors':>7}"]
    for r in rows:
        mean = "-" if r["mean"] is None else f"{r['mean']:.4f}"
        std = "-" if r["std"] is None else f"{r['std']:.4f}"
        lines.append(
            f"{r['mode']:<12} {r['n']:>3} {mean:>8} {std:>8} {r['errors']:>7}")
    table = "\n".join(lines)
    with open(os.path.join(out_dir, "table.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
