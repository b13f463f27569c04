"""Loss, Adam, synthetic tasks, the training loop and end-to-end gradient checks."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as mdl
from . import numerics as nx
from .errors import ConfigError, DivergenceError, InputError, NumericError, ShapeError
from .model import FastformerConfig, Model
from .numerics import Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, label: int) -> tuple[float, Tensor]:
    """``-log softmax(logits)[label]`` and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    C = logits.shape[-1]
    if not 0 <= int(label) < C:
        raise InputError(f"label {label} outside [0, {C})")
    shifted = logits - logits.max()
    log_z = math.log(float(np.exp(shifted).sum()))
    loss = log_z - float(shifted[label])
    d_logits = np.exp(shifted - log_z)
    d_logits[label] -= 1.0
    return max(loss, 0.0), d_logits


def batch_cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean cross-entropy over a batch; the gradient already carries the ``1/B``."""
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,) or np.any((labels < 0) | (labels >= C)):
        raise InputError(f"labels must be {B} class ids in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[np.arange(B), labels].mean())
    d_logits = np.exp(log_p)
    d_logits[np.arange(B), labels] -= 1.0
    return loss, d_logits / logits.dtype.type(B)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place.

    Parameters absent from ``grads`` are treated as having zero gradient.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name!r} has shape {m.shape}, parameter has {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    sequences: np.ndarray
    labels: np.ndarray
    name: str
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


def majority_label(seq) -> int:
    """Most frequent token id; ties go to the smallest id."""
    counts = np.bincount(np.asarray(seq))
    return int(np.argmax(counts))


def gen_majority(seed: int, count: int, seq_len: int, vocab: int, boost: float = 0.25) -> SyntheticDataset:
    """Uniform random tokens where one class token is oversampled.

    Each example picks a favoured token and overwrites each position with it
    at probability ``boost``. The label is recomputed from the actual counts.
    """
    if vocab < 2 or seq_len < 1:
        raise InputError("majority task needs vocab >= 2 and seq_len >= 1")
    rng = np.random.default_rng(seed)
    favoured = rng.integers(0, vocab, size=count)
    seqs = rng.integers(0, vocab, size=(count, seq_len))
    hit = rng.random((count, seq_len)) < boost
    seqs = np.where(hit, favoured[:, None], seqs)
    labels = np.array([majority_label(s) for s in seqs], dtype=np.int64)
    return SyntheticDataset(seqs.astype(np.int64), labels, "majority", seed)


def gen_probe(seed: int, count: int, seq_len: int, vocab: int) -> SyntheticDataset:
    """Key-recall task: the first token is a key that recurs exactly once later.

    The label is the token that immediately follows that later occurrence.
    """
    if vocab < 3 or seq_len < 3:
        raise InputError("probe task needs vocab >= 3 and seq_len >= 3")
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, vocab, size=count)
    # filler drawn from vocab minus the key: shift values at or above the key up by one
    filler = rng.integers(0, vocab - 1, size=(count, seq_len))
    seqs = filler + (filler >= keys[:, None])
    seqs[:, 0] = keys
    pos = rng.integers(1, seq_len - 1, size=count)
    rows = np.arange(count)
    seqs[rows, pos] = keys
    labels = seqs[rows, pos + 1].astype(np.int64)
    return SyntheticDataset(seqs.astype(np.int64), labels, "probe", seed)


TASKS = {"majority": gen_majority, "probe": gen_probe}


def make_task(name: str, seed: int, count: int, seq_len: int, vocab: int) -> SyntheticDataset:
    try:
        gen = TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; known tasks: {sorted(TASKS)}") from None
    return gen(seed, count, seq_len, vocab)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 64
    seed: int = 0
    task: str = "majority"
    eval_every: int = 100
    seq_len: int = 128
    num_examples: int = 20000
    threshold: float = 0.95
    stop_at_threshold: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def problems(self) -> list[str]:
        out = []
        for name in ("steps", "batch", "eval_every", "seq_len", "num_examples"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                out.append(f"train.{name} must be a positive integer")
        if self.lr < 0:
            out.append("train.lr must be non-negative")
        if self.task not in TASKS:
            out.append(f"train.task must be one of {sorted(TASKS)}")
        if self.num_examples < 10:
            out.append("train.num_examples must be at least 10")
        return out


@dataclass
class TrainResult:
    history: list
    model: Model
    steps_to_threshold: Optional[int] = None
    checkpoint: Optional[Path] = None
    metrics_csv: Optional[Path] = None

    @property
    def final_accuracy(self) -> float:
        return self.history[-1]["val_accuracy"]


def split_task(task: str, seed: int, num_examples: int, seq_len: int, vocab: int):
    """Train and validation sets from independent seed streams (validation = 10%)."""
    n_val = max(1, num_examples // 10)
    train = make_task(task, nx.name_seed("train", seed), num_examples - n_val, seq_len, vocab)
    val = make_task(task, nx.name_seed("val", seed), n_val, seq_len, vocab)
    return train, val


def evaluate(model: Model, data: SyntheticDataset, batch: int = 256) -> tuple[float, float]:
    """Mean loss and accuracy without dropout."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch):
        ids = data.sequences[start:start + batch]
        labels = data.labels[start:start + batch]
        logits, _ = mdl.forward(model, ids)
        loss, _ = batch_cross_entropy(logits, labels)
        total_loss += loss * len(labels)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    return total_loss / len(data), correct / len(data)


def write_metrics_csv(history: list, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "val_accuracy"])
        for row in history:
            writer.writerow([row["step"], f"{row['loss']:.6g}", f"{row['val_accuracy']:.6g}"])
    return path


def train_loop(
    config: FastformerConfig,
    train: TrainConfig,
    out_dir=None,
    model: Optional[Model] = None,
) -> TrainResult:
    """Train on a synthetic task with Adam.

    The ``loss`` column of the history is the dropout-free mean loss on a
    fixed slice of the training set, so it is comparable across eval points.
    Raises ``DivergenceError`` as soon as a step loss is non-finite.
    """
    problems = config.problems() + train.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    if config.num_classes < config.vocab_size:
        raise ConfigError("synthetic tasks label with token ids: num_classes must be >= vocab_size")
    if train.seq_len > config.max_len:
        raise ConfigError(f"train.seq_len {train.seq_len} exceeds model max_len {config.max_len}")

    train_set, val_set = split_task(train.task, train.seed, train.num_examples, train.seq_len, config.vocab_size)
    probe = SyntheticDataset(train_set.sequences[:512], train_set.labels[:512], train_set.name, train_set.seed)
    model = mdl.build_model(config, train.seed) if model is None else model
    state = AdamState()
    batch_rng = np.random.default_rng(nx.name_seed("batches", train.seed))
    dropout_rng = np.random.default_rng(nx.name_seed("dropout", train.seed))

    history: list = []
    steps_to_threshold = None
    order = batch_rng.permutation(len(train_set))
    cursor = 0
    last_finite = 0
    for step in range(1, train.steps + 1):
        if cursor + train.batch > len(order):
            order = batch_rng.permutation(len(train_set))
            cursor = 0
        idx = order[cursor:cursor + train.batch]
        cursor += train.batch
        logits, cache = mdl.forward(model, train_set.sequences[idx], rng=dropout_rng)
        loss, d_logits = batch_cross_entropy(logits, train_set.labels[idx])
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", last_finite_step=last_finite)
        last_finite = step
        grads = mdl.backward(model, cache, d_logits)
        adam_step(model.params, grads, state, train.lr, train.beta1, train.beta2, train.eps)

        if step % train.eval_every == 0 or step == train.steps:
            train_loss, _ = evaluate(model, probe)
            _, val_acc = evaluate(model, val_set)
            history.append({"step": step, "loss": train_loss, "val_accuracy": val_acc})
            log.info("step %d loss %.4f val_acc %.4f", step, train_loss, val_acc)
            if steps_to_threshold is None and val_acc >= train.threshold:
                steps_to_threshold = step
                if train.stop_at_threshold:
                    break

    result = TrainResult(history=history, model=model, steps_to_threshold=steps_to_threshold)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics_csv = write_metrics_csv(history, out_dir / "metrics.csv")
        result.checkpoint = mdl.save_checkpoint(model, out_dir / "final.ckpt")
    return result


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

GRAD_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    checked_scalars: int
    total_scalars: int
    kink_skipped: int = 0


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = GRAD_FLOOR) -> float:
    """Max over elements of ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _relu_pattern(cache: mdl.ModelCache) -> bytes:
    masks = [(lc.ffn_pre > 0).ravel() for lc in cache.layers if lc.ffn_pre is not None]
    return np.packbits(np.concatenate(masks)).tobytes() if masks else b""


def _loss_and_pattern(model: Model, ids, label) -> tuple[float, bytes]:
    logits, cache = mdl.forward(model, np.asarray(ids)[None, :])
    return cross_entropy(logits[0], int(label))[0], _relu_pattern(cache)


def grad_check(
    config: FastformerConfig,
    example=None,
    h: float = 1e-5,
    seed: int = 0,
    max_scalars: int = 10_000,
    model: Optional[Model] = None,
) -> GradCheckReport:
    """Compare backprop gradients of one example's loss with central differences.

    Runs in float64 with dropout off regardless of ``config``. When the model
    stores more than ``max_scalars`` scalars a uniform subsample of that size
    is drawn with a generator seeded at 0. Coordinates whose difference
    stencil flips the sign of any FFN pre-activation sit on a ReLU kink where
    central differences are meaningless; they are excluded and counted in
    ``kink_skipped``.
    """
    config = dataclasses.replace(config, precision="f64", dropout=0.0)
    model = mdl.build_model(config, seed) if model is None else model
    if model.dtype != np.float64:
        raise ConfigError("gradient checks need a float64 model")
    if example is None:
        data = gen_majority(seed, 1, min(config.max_len, 16), config.vocab_size)
        example = (data.sequences[0], int(data.labels[0]) % config.num_classes)
    ids, label = example

    logits, cache = mdl.forward(model, np.asarray(ids)[None, :])
    _, d_logits = cross_entropy(logits[0], int(label))
    grads = mdl.backward(model, cache, d_logits[None, :])
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    base_pattern = _relu_pattern(cache)

    names = list(model.params)
    sizes = np.array([model.params[n].size for n in names])
    total = int(sizes.sum())
    if total > max_scalars:
        chosen = np.sort(np.random.default_rng(0).choice(total, size=max_scalars, replace=False))
    else:
        chosen = np.arange(total)
    bounds = np.concatenate([[0], np.cumsum(sizes)])

    per_param, skipped = {}, 0
    for k, name in enumerate(names):
        local = chosen[(chosen >= bounds[k]) & (chosen < bounds[k + 1])] - bounds[k]
        if local.size == 0:
            continue
        original = model.params[name]
        patterns: list = []

        def f(p, name=name, patterns=patterns):
            model.params[name] = p
            loss, pattern = _loss_and_pattern(model, ids, label)
            patterns.append(pattern)
            return loss

        try:
            numeric = nx.finite_diff_grad(f, original, h, local).reshape(-1)[local]
        finally:
            model.params[name] = original
        smooth = np.array([patterns[2 * i] == base_pattern and patterns[2 * i + 1] == base_pattern for i in range(local.size)])
        skipped += int((~smooth).sum())
        if not smooth.any():
            continue
        analytic = grads.get(name, np.zeros_like(original)).reshape(-1)[local]
        per_param[name] = relative_error(analytic[smooth], numeric[smooth])
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(worst, per_param, int(chosen.size), total, skipped)
