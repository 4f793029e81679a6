"""Synthetic marked-frame classification task and its training loop.

Every sample is a short clip of flat-coloured noisy frames. Exactly one
frame carries a white square; the label is that frame's colour class. The
model has to find the marked frame among merged, size-sorted tokens and
carry its colour through the recurrence to the end of the prompt.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .model import VideoClassifier
from .prompt import tokenize_stub
from .vision import EncoderConfig, preset

COLORS = np.array([[200, 40, 40], [40, 200, 40], [40, 40, 200], [200, 200, 40]], dtype=np.int16)
PREFIX = "Frames:"
SUFFIX = "Color of the marked frame?"


class TrainingDiverged(ArithmeticError):
    def __init__(self, message, checkpoint, epoch):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


@dataclass
class NeedleTask:
    n_frames: int = 8
    n_classes: int = 4
    marker_size: int = 8
    marker_aligned: bool = True
    noise: int = 20
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.n_classes <= len(COLORS)):
            raise ValueError(f"n_classes must be in [1, {len(COLORS)}]")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")

    def to_dict(self):
        return asdict(self)

    def generate(self, n_samples, image_side, patch_size, stream=0):
        """``(pixels, labels, marked_index)``; pixels are ``(N, F, S, S, 3)`` uint8."""
        rng = np.random.default_rng([self.seed, stream])
        S, Fn, m = image_side, self.n_frames, self.marker_size
        if m > S:
            raise ValueError(f"marker size {m} exceeds frame side {S}")
        colors = rng.integers(0, self.n_classes, size=(n_samples, Fn))
        marked = rng.integers(0, Fn, size=n_samples)
        noise = rng.integers(-self.noise, self.noise + 1, size=(n_samples, Fn, S, S, 3), dtype=np.int16)
        pix = COLORS[colors][:, :, None, None, :] + noise
        if self.marker_aligned:
            g = S // patch_size
            cell = rng.integers(0, g * g, size=n_samples)
            ys, xs = (cell // g) * patch_size, (cell % g) * patch_size
        else:
            ys = rng.integers(0, S - m + 1, size=n_samples)
            xs = rng.integers(0, S - m + 1, size=n_samples)
        for i in range(n_samples):
            pix[i, marked[i], ys[i] : ys[i] + m, xs[i] : xs[i] + m] = 255
        labels = colors[np.arange(n_samples), marked]
        return np.clip(pix, 0, 255).astype(np.uint8), labels, marked


@dataclass
class TrainConfig:
    train_samples: int = 5000
    test_samples: int = 1000
    epochs: int = 3
    batch_size: int = 50
    lr: float = 3e-3
    n_blocks: int = 2
    seed: int = 0
    precision: str = "single"

    def to_dict(self):
        return asdict(self)


def default_encoder():
    return preset("needle")


def _dtype(precision):
    return torch.float64 if precision == "double" else torch.float32


def build_model(enc: EncoderConfig, train: TrainConfig, task: NeedleTask):
    return VideoClassifier(enc, n_blocks=train.n_blocks, n_classes=task.n_classes, seed=train.seed,
                           dtype=_dtype(train.precision))


def prompt_ids():
    return tokenize_stub(PREFIX).ids, tokenize_stub(SUFFIX).ids


def evaluate(model, pixels, labels, removals, order, rng, batch_size=200):
    pre, suf = prompt_ids()
    correct = 0
    loss = 0.0
    with torch.no_grad():
        for s in range(0, len(labels), batch_size):
            logits = model(pixels[s : s + batch_size], pre, suf, removals, order, rng)
            y = torch.as_tensor(labels[s : s + batch_size])
            loss += F.cross_entropy(logits, y, reduction="sum").item()
            correct += int((logits.argmax(-1) == y).sum())
    return loss / len(labels), correct / len(labels)


def train_needle(task: NeedleTask, enc: EncoderConfig | None = None, train: TrainConfig | None = None,
                 log=None, timings=True):
    """Train end to end and return the training curve as a dict.

    Merging follows ``enc.keep_ratio``/``enc.sort_order``; with
    ``merge_policy="multi-frame-only"`` a single-frame task trains unmerged.
    """
    enc = enc or default_encoder()
    train = train or TrainConfig()
    torch.manual_seed(train.seed)
    model = build_model(enc, train, task)
    removals = enc.schedule().removals if (enc.merge_policy == "always" or task.n_frames > 1) else None
    order = enc.sort_order
    xtr, ytr, _ = task.generate(train.train_samples, enc.image_side, enc.patch_size, stream=0)
    xte, yte, _ = task.generate(train.test_samples, enc.image_side, enc.patch_size, stream=1)
    rng = np.random.default_rng([train.seed, 7])
    eval_rng_seed = [train.seed, 8]
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    steps_per_epoch = math.ceil(train.train_samples / train.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=train.lr, total_steps=train.epochs * steps_per_epoch,
                                                pct_start=0.15)
    pre, suf = prompt_ids()
    init_loss, init_acc = evaluate(model, xte, yte, removals, order, np.random.default_rng(eval_rng_seed))
    curve = [{"epoch": 0, "train_loss": None, "test_loss": init_loss, "test_accuracy": init_acc}]
    if log:
        log(f"epoch 0: test loss {init_loss:.4f} acc {init_acc:.3f}")
    checkpoint = copy.deepcopy(model.state_dict())
    t0 = time.perf_counter()
    for epoch in range(1, train.epochs + 1):
        perm = rng.permutation(train.train_samples)
        total = 0.0
        model.train()
        for s in range(0, train.train_samples, train.batch_size):
            idx = np.sort(perm[s : s + train.batch_size])
            logits = model(xtr[idx], pre, suf, removals, order, rng)
            loss = F.cross_entropy(logits, torch.as_tensor(ytr[idx]))
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", checkpoint, epoch - 1)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        model.eval()
        te_loss, te_acc = evaluate(model, xte, yte, removals, order, np.random.default_rng(eval_rng_seed))
        if not math.isfinite(te_loss):
            raise TrainingDiverged(f"non-finite held-out loss in epoch {epoch}", checkpoint, epoch - 1)
        checkpoint = copy.deepcopy(model.state_dict())
        curve.append({"epoch": epoch, "train_loss": total / train.train_samples, "test_loss": te_loss,
                      "test_accuracy": te_acc})
        if log:
            log(f"epoch {epoch}: train loss {total / train.train_samples:.4f} "
                f"test loss {te_loss:.4f} acc {te_acc:.3f} ({time.perf_counter() - t0:.1f}s)")
    result = {
        "task": task.to_dict(),
        "encoder": enc.to_dict(),
        "train": train.to_dict(),
        "tokens_per_frame": (enc.schedule().kept + 1) if removals is not None else enc.n_patches + 1,
        "curve": curve,
        "initial_loss": init_loss,
        "initial_accuracy": init_acc,
        "final_loss": curve[-1]["test_loss"],
        "final_accuracy": curve[-1]["test_accuracy"],
    }
    if timings:
        result["timing"] = {"train_seconds": time.perf_counter() - t0}
    result["model"] = model
    return result
