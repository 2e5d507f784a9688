"""Incremental-learning state machine: strategy dispatch, training loops, freezing.

Strategies over a task sequence:

  san          task 1 trains backbone+adjustment+classifier jointly, then the
               backbone and classifier freeze; every later task trains only a
               fresh adjustment block slotted between them.
  baseline     task 1 trains the full stack, then backbone+adjustment freeze;
               every later task trains only a fresh classifier head.
  finetune     one network, every parameter trainable at every task, single
               shared head sized to the largest task.
  independent  a fresh full network per task; the non-incremental ceiling.

All four build the identical task-1 model from the same seed, which makes
the strategies directly comparable and is asserted by tests.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .layers import (
    ArchitectureSpec,
    Dense,
    HeadMap,
    ModelBlock,
    assert_frozen,
    build_block,
    extend_classifier,
    freeze,
    map_task_classes,
    model_size,
    snapshot_block,
)
from .optim import Adam
from .seeding import (
    COMPONENT_ADJUST,
    COMPONENT_BACKBONE,
    COMPONENT_CLASSIFIER,
    TAG_INIT,
    TAG_SHUFFLE,
    derive_seed,
)
from .tasks import Task, TaskSequence, task_arrays
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    flatten,
    orthogonality_penalty,
    reshape,
    scale,
    select_columns,
    slice_rows,
    softmax_cross_entropy,
)


class StrategyKind(str, Enum):
    SAN = "san"
    BASELINE = "baseline"
    FINETUNE = "finetune"
    INDEPENDENT = "independent"


class UnknownTaskError(LookupError):
    pass


class UntrainedTaskError(RuntimeError):
    pass


class TrainingOrderError(RuntimeError):
    pass


@dataclass
class TrainLog:
    task_index: int
    epochs: int
    best_epoch: int
    val_accuracy: float
    train_seconds: float
    trainable_params: int


class IncrementalState:
    """Per-strategy parameter store over one task sequence."""

    def __init__(
        self,
        strategy,
        arch: ArchitectureSpec,
        seq: TaskSequence,
        master_seed: int,
        ortho_alpha: float = 0.0,
    ):
        self.strategy = StrategyKind(strategy)
        self.arch = arch
        self.seq = seq
        self.master_seed = int(master_seed)
        self.ortho_alpha = float(ortho_alpha)
        arch.validate()

        first = seq.tasks[0]
        if self.strategy is not StrategyKind.FINETUNE and len(first.class_ids) > arch.base_classes:
            raise ValueError(
                f"first task brings {len(first.class_ids)} classes but the classifier head "
                f"is only {arch.base_classes} wide; widen base_classes"
            )
        # finetune keeps a single head wide enough for every task
        self._finetune_width = max(len(t.class_ids) for t in seq.tasks)

        self.shared: dict[str, ModelBlock] = {}
        self.per_task: dict[int, dict[str, ModelBlock]] = {}
        self.head_maps: dict[int, HeadMap] = {}
        self.shared_snapshot: dict[str, np.ndarray] | None = None
        self.task_snapshots: dict[int, dict[str, np.ndarray]] = {}
        self.head_width = arch.base_classes
        self.trained_upto = 0
        self._active_task = 0

    # -- forward ------------------------------------------------------------

    def _forward_blocks(self, task_index: int) -> list[ModelBlock]:
        s = self.strategy
        try:
            if s is StrategyKind.SAN:
                return [
                    self.shared["backbone"],
                    self.per_task[task_index]["adjust"],
                    self.shared["classifier"],
                ]
            if s is StrategyKind.BASELINE:
                return [
                    self.shared["backbone"],
                    self.shared["adjust"],
                    self.per_task[task_index]["classifier"],
                ]
            if s is StrategyKind.FINETUNE:
                if task_index not in self.head_maps:
                    raise KeyError(task_index)
                return [self.shared["backbone"], self.shared["adjust"], self.shared["classifier"]]
            return [
                self.per_task[task_index]["backbone"],
                self.per_task[task_index]["adjust"],
                self.per_task[task_index]["classifier"],
            ]
        except KeyError:
            raise UnknownTaskError(
                f"unknown task {task_index} for strategy {s.value}"
            ) from None

    def forward_logits(self, x: Tensor, task_index: int) -> Tensor:
        logits, _ = self.forward_parts(x, task_index)
        return logits

    def forward_parts(self, x: Tensor, task_index: int) -> tuple[Tensor, Tensor]:
        """(logits, pre-classifier features) for the task's network."""
        blocks = self._forward_blocks(task_index)
        feats = x
        for blk in blocks[:-1]:
            feats = blk.forward(feats)
        return blocks[-1].forward(feats), feats

    def classifier_width(self, task_index: int) -> int:
        return self._forward_blocks(task_index)[-1].output_shape[0]

    def embed(self, images: np.ndarray, task_index: int) -> np.ndarray:
        """Flattened pre-classifier feature embedding, one row per sample."""
        self._check_trained(task_index)
        blocks = self._forward_blocks(task_index)
        out = Tensor(images)
        for blk in blocks[:-1]:
            out = blk.forward(out)
        return out.data.reshape(out.data.shape[0], -1)

    def model_blocks(self) -> list[ModelBlock]:
        blocks = list(self.shared.values())
        for t in sorted(self.per_task):
            blocks.extend(self.per_task[t].values())
        return blocks

    def _check_trained(self, task_index: int) -> None:
        if not (1 <= task_index <= len(self.seq.tasks)):
            raise UnknownTaskError(f"task {task_index} not in sequence of {len(self.seq.tasks)}")
        if task_index > self.trained_upto and task_index != self._active_task:
            raise UntrainedTaskError(f"task {task_index} has not been trained yet")

    def verify_shared_frozen(self) -> tuple[bool, str | None]:
        """Bitwise check of frozen shared blocks against their post-task-1 snapshot.

        A classifier extended after task 1 is compared on the original row
        slice; the appended rows are new parameters by design.
        """
        if self.shared_snapshot is None:
            return True, None
        for block in self.shared.values():
            for p in block.parameters():
                ref = self.shared_snapshot.get(p.name)
                if ref is None:
                    return False, p.name
                cur = p.data
                if cur.shape != ref.shape:
                    cur = cur[tuple(slice(0, s) for s in ref.shape)]
                if cur.dtype != ref.dtype or cur.tobytes() != ref.tobytes():
                    return False, p.name
        return True, None

    def verify_task_frozen(self, task_index: int) -> tuple[bool, str | None]:
        """Bitwise check of a task's blocks against their post-training snapshot."""
        snapshot = self.task_snapshots.get(task_index)
        if snapshot is None:
            return True, None
        for block in self.per_task.get(task_index, {}).values():
            ok, path = assert_frozen(block, snapshot)
            if not ok:
                return False, path
        return True, None


# ---------------------------------------------------------------------------
# block construction per task


def _classifier_specs(arch: ArchitectureSpec, width: int):
    return arch.classifier[:-1] + (Dense(width),)


def prepare_task_blocks(state: IncrementalState, task: Task) -> list[ModelBlock]:
    """Create the task's blocks and head map; returns blocks that train now."""
    t = task.index
    s = state.strategy
    arch = state.arch
    m = state.master_seed
    seed_b = derive_seed(m, TAG_INIT, t, COMPONENT_BACKBONE)
    seed_a = derive_seed(m, TAG_INIT, t, COMPONENT_ADJUST)
    seed_c = derive_seed(m, TAG_INIT, t, COMPONENT_CLASSIFIER)

    if t == 1:
        width = state._finetune_width if s is StrategyKind.FINETUNE else arch.base_classes
        backbone = build_block(arch.backbone, arch.input_shape, seed_b, "backbone")
        adjust_name = f"task{t}.adjust" if s in (StrategyKind.SAN, StrategyKind.INDEPENDENT) else "adjust"
        adjust = build_block(arch.adjustment, backbone.output_shape, seed_a, adjust_name)
        clf_name = (
            f"task{t}.classifier"
            if s in (StrategyKind.BASELINE, StrategyKind.INDEPENDENT)
            else "classifier"
        )
        classifier = build_block(
            _classifier_specs(arch, width), adjust.output_shape, seed_c, clf_name
        )
        if s is StrategyKind.SAN:
            state.shared = {"backbone": backbone, "classifier": classifier}
            state.per_task[1] = {"adjust": adjust}
        elif s is StrategyKind.BASELINE:
            state.shared = {"backbone": backbone, "adjust": adjust}
            state.per_task[1] = {"classifier": classifier}
        elif s is StrategyKind.FINETUNE:
            state.shared = {"backbone": backbone, "adjust": adjust, "classifier": classifier}
        else:
            state.per_task[1] = {
                "backbone": backbone,
                "adjust": adjust,
                "classifier": classifier,
            }
        state.head_width = width
        state.head_maps[1] = map_task_classes(task.class_ids, width)
        return [backbone, adjust, classifier]

    if s is StrategyKind.SAN:
        trainable: list[ModelBlock] = []
        head = map_task_classes(task.class_ids, state.head_width)
        if head.extra_needed:
            extended = extend_classifier(state.shared["classifier"], head.extra_needed, seed_c)
            state.shared["classifier"] = extended
            state.head_width = extended.output_shape[0]
            head = map_task_classes(task.class_ids, state.head_width)
            trainable.append(extended)
        adjust = build_block(
            arch.adjustment, state.shared["backbone"].output_shape, seed_a, f"task{t}.adjust"
        )
        state.per_task[t] = {"adjust": adjust}
        state.head_maps[t] = head
        return [adjust] + trainable

    if s is StrategyKind.BASELINE:
        width = len(task.class_ids)
        classifier = build_block(
            _classifier_specs(arch, width),
            state.shared["adjust"].output_shape,
            seed_c,
            f"task{t}.classifier",
        )
        state.per_task[t] = {"classifier": classifier}
        state.head_maps[t] = map_task_classes(task.class_ids, width)
        return [classifier]

    if s is StrategyKind.FINETUNE:
        state.head_maps[t] = map_task_classes(task.class_ids, state.head_width)
        return [state.shared["backbone"], state.shared["adjust"], state.shared["classifier"]]

    width = max(arch.base_classes, len(task.class_ids))
    backbone = build_block(arch.backbone, arch.input_shape, seed_b, f"task{t}.backbone")
    adjust = build_block(arch.adjustment, backbone.output_shape, seed_a, f"task{t}.adjust")
    classifier = build_block(
        _classifier_specs(arch, width), adjust.output_shape, seed_c, f"task{t}.classifier"
    )
    state.per_task[t] = {"backbone": backbone, "adjust": adjust, "classifier": classifier}
    state.head_maps[t] = map_task_classes(task.class_ids, width)
    return [backbone, adjust, classifier]


def _apply_freeze_rules(state: IncrementalState, task_index: int) -> None:
    s = state.strategy
    if s is StrategyKind.SAN:
        if task_index == 1:
            freeze(state.shared["backbone"])
            freeze(state.shared["classifier"])
            state.shared_snapshot = {
                **snapshot_block(state.shared["backbone"]),
                **snapshot_block(state.shared["classifier"]),
            }
        else:
            # extension rows, if any, are fixed once their task is done
            freeze(state.shared["classifier"])
        freeze(state.per_task[task_index]["adjust"])
    elif s is StrategyKind.BASELINE:
        if task_index == 1:
            freeze(state.shared["backbone"])
            freeze(state.shared["adjust"])
            state.shared_snapshot = {
                **snapshot_block(state.shared["backbone"]),
                **snapshot_block(state.shared["adjust"]),
            }
        freeze(state.per_task[task_index]["classifier"])
    elif s is StrategyKind.INDEPENDENT:
        for block in state.per_task[task_index].values():
            freeze(block)
    # finetune never freezes anything
    snapshot: dict[str, np.ndarray] = {}
    for block in state.per_task.get(task_index, {}).values():
        snapshot.update(snapshot_block(block))
    if snapshot:
        state.task_snapshots[task_index] = snapshot


# ---------------------------------------------------------------------------
# losses


def _mean_square_feature_penalty(flat: Tensor) -> Tensor:
    """Mean orthogonality penalty over per-sample square views of the embedding."""
    n, d2 = flat.data.shape
    d = math.isqrt(d2)
    if d * d != d2:
        raise ValueError(
            f"feature width {d2} is not a perfect square; the orthogonality term "
            "needs a square-viewable embedding"
        )
    total = None
    for i in range(n):
        a = reshape(slice_rows(flat, i, i + 1), (d, d))
        p = orthogonality_penalty(a)
        total = p if total is None else add(total, p)
    return scale(total, 1.0 / n)


# ---------------------------------------------------------------------------
# training and evaluation


def train_task(
    state: IncrementalState,
    task_index: int,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 0.001,
    selection: str = "best-val",
) -> TrainLog:
    """Train one task in sequence order, then apply the strategy's freeze rules.

    Model selection: "best-val" restores the epoch with the highest
    validation accuracy on this task (ties go to the earliest epoch);
    "last" keeps the final epoch.
    """
    if task_index != state.trained_upto + 1:
        raise TrainingOrderError(
            f"task {task_index} out of order; next trainable task is {state.trained_upto + 1}"
        )
    if selection not in ("best-val", "last"):
        raise ValueError(f"selection must be 'best-val' or 'last', got {selection!r}")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")

    task = state.seq.tasks[task_index - 1]
    start = time.perf_counter()
    state._active_task = task_index

    trainable_blocks = prepare_task_blocks(state, task)
    params = [p for blk in trainable_blocks for p in blk.parameters() if not p.frozen]
    trainable_count = sum(p.trainable_count() for p in params)
    head = state.head_maps[task_index]
    needs_mask = not head.covers_width(state.classifier_width(task_index))

    images, raw_labels = task_arrays(state.seq, task, "train")
    labels = head.local_labels(raw_labels)
    n = images.shape[0]
    opt = Adam(params, lr=lr)
    shuffle_rng = np.random.default_rng(derive_seed(state.master_seed, TAG_SHUFFLE, task_index))

    best_acc = -1.0
    best_epoch = 0
    best_params: list[np.ndarray] | None = None
    val_acc = 0.0
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            x = Tensor(images[idx])
            with Tape():
                logits, feats = state.forward_parts(x, task_index)
                if needs_mask:
                    logits = select_columns(logits, head.neurons)
                loss = softmax_cross_entropy(logits, labels[idx])
                if state.ortho_alpha > 0.0:
                    penalty = _mean_square_feature_penalty(flatten(feats))
                    loss = add(loss, scale(penalty, state.ortho_alpha))
                backward(loss)
            opt.step()
            opt.zero_grad()
        val_acc = evaluate(state, task_index, "val")
        if selection == "best-val" and val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_params = [p.data.copy() for p in params]

    if selection == "best-val" and best_params is not None:
        for p, saved in zip(params, best_params):
            p.value.data = saved
        val_acc = best_acc
    else:
        best_epoch = epochs

    _apply_freeze_rules(state, task_index)
    state.trained_upto = task_index
    state._active_task = 0
    return TrainLog(
        task_index=task_index,
        epochs=epochs,
        best_epoch=best_epoch,
        val_accuracy=float(val_acc),
        train_seconds=time.perf_counter() - start,
        trainable_params=trainable_count,
    )


def evaluate(state: IncrementalState, task_index: int, split: str = "test", batch_size: int = 512) -> float:
    """Fraction of correctly argmax-classified samples under the task's head mask."""
    state._check_trained(task_index)
    task = state.seq.tasks[task_index - 1]
    head = state.head_maps[task_index]
    images, raw_labels = task_arrays(state.seq, task, split)
    labels = head.local_labels(raw_labels)
    neurons = np.asarray(head.neurons)
    correct = 0
    for lo in range(0, images.shape[0], batch_size):
        x = Tensor(images[lo : lo + batch_size])
        logits = state.forward_logits(x, task_index).data
        pred = logits[:, neurons].argmax(axis=1)
        correct += int((pred == labels[lo : lo + batch_size]).sum())
    return correct / images.shape[0]


def predict_logits(
    state: IncrementalState, task_index: int, images: np.ndarray, batch_size: int = 512
) -> np.ndarray:
    """Head-masked logits for arbitrary inputs through the task's network."""
    state._check_trained(task_index)
    head = state.head_maps[task_index]
    neurons = np.asarray(head.neurons)
    chunks = []
    for lo in range(0, images.shape[0], batch_size):
        logits = state.forward_logits(Tensor(images[lo : lo + batch_size]), task_index).data
        chunks.append(logits[:, neurons])
    return np.concatenate(chunks) if chunks else np.empty((0, neurons.size), dtype=np.float32)


# ---------------------------------------------------------------------------
# whole-sequence driver


@dataclass
class SeedRunResult:
    seed: int
    strategy: str
    forgetting: list[list[float]] = field(default_factory=list)
    final_per_task: list[float] = field(default_factory=list)
    mean_final: float = 0.0
    per_task: list[dict] = field(default_factory=list)
    wall_clock_sec: float = 0.0


def run_sequence(
    strategy,
    arch: ArchitectureSpec,
    seq: TaskSequence,
    seed: int,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 0.001,
    selection: str = "best-val",
    ortho_alpha: float = 0.0,
) -> tuple[SeedRunResult, IncrementalState]:
    """Train every task in order, scoring all earlier tasks after each one."""
    state = IncrementalState(strategy, arch, seq, seed, ortho_alpha=ortho_alpha)
    result = SeedRunResult(seed=int(seed), strategy=StrategyKind(strategy).value)
    start = time.perf_counter()
    for t in range(1, seq.num_tasks + 1):
        log = train_task(state, t, epochs=epochs, batch_size=batch_size, lr=lr, selection=selection)
        ok, path = state.verify_shared_frozen()
        if not ok:
            raise RuntimeError(f"frozen shared parameter {path!r} changed during task {t}")
        row = [evaluate(state, s, "test") for s in range(1, t + 1)]
        result.forgetting.append(row)
        count, megabytes = model_size(state.model_blocks())
        result.per_task.append(
            {
                "task": t,
                "classes": list(seq.tasks[t - 1].class_ids),
                "best_epoch": log.best_epoch,
                "val_accuracy": log.val_accuracy,
                "trainable_params": log.trainable_params,
                "param_count": count,
                "megabytes": megabytes,
                "train_seconds": log.train_seconds,
            }
        )
    result.final_per_task = list(result.forgetting[-1])
    result.mean_final = sum(result.final_per_task) / len(result.final_per_task)
    result.wall_clock_sec = time.perf_counter() - start
    return result, state


def task_order_ablation(
    strategy,
    arch: ArchitectureSpec,
    sequences: Sequence[TaskSequence],
    seed: int,
    **train_kwargs,
) -> list[SeedRunResult]:
    """One full run per reordered sequence, same seed, results side by side."""
    results = []
    for seq in sequences:
        result, _ = run_sequence(strategy, arch, seq, seed, **train_kwargs)
        results.append(result)
    return results
