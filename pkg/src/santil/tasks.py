"""Task partitioning and sequence construction over loaded datasets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, make_permutations, split_indices
from .seeding import TAG_PERM, TAG_SPLIT, derive_seed


@dataclass(frozen=True)
class Task:
    """One task: a class subset with train/val/test index lists into the pools."""

    index: int  # 1-based position in the training order
    name: str
    class_ids: tuple[int, ...]
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    pixel_permutation: np.ndarray | None = None


@dataclass
class TaskSequence:
    """Ordered tasks over a train pool (train/val indices) and a test pool.

    For kind="split" the class sets are pairwise disjoint. For
    kind="permuted" every task shares the label set and differs by a fixed
    pixel permutation; the task identity disambiguates.
    """

    train_pool: Dataset
    test_pool: Dataset
    tasks: list[Task]
    kind: str = "split"

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)


def partition_classes(num_classes: int, num_tasks: int, order="default") -> list[tuple[int, ...]]:
    """Contiguous equal-size class groups over the given order.

    "default" means ascending class id. When num_classes is not divisible
    by num_tasks the last task absorbs the remainder.
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if num_tasks > num_classes:
        raise ValueError(f"num_tasks {num_tasks} exceeds num_classes {num_classes}")
    if isinstance(order, str):
        if order != "default":
            raise ValueError(f"unknown class order {order!r}")
        ids = list(range(num_classes))
    else:
        ids = [int(c) for c in order]
        if sorted(ids) != list(range(num_classes)):
            raise ValueError("class order must be a permutation of 0..num_classes-1")
    size = num_classes // num_tasks
    groups = []
    for t in range(num_tasks):
        lo = t * size
        hi = (t + 1) * size if t < num_tasks - 1 else num_classes
        groups.append(tuple(ids[lo:hi]))
    return groups


def reorder_groups(groups: Sequence[Sequence[int]], order: Sequence[int]) -> list[tuple[int, ...]]:
    """Reorder task groups by a permutation of task positions."""
    if sorted(int(i) for i in order) != list(range(len(groups))):
        raise ValueError(
            f"order must be a permutation of 0..{len(groups) - 1}, got {list(order)}"
        )
    return [tuple(groups[int(i)]) for i in order]


def build_split_sequence(
    train_pool: Dataset,
    test_pool: Dataset,
    groups: Sequence[Sequence[int]],
    master_seed: int,
    val_fraction: float = 0.85,
) -> TaskSequence:
    """Per-task train/val/test index lists for disjoint class groups."""
    seen: set[int] = set()
    for g in groups:
        overlap = seen.intersection(g)
        if overlap:
            raise ValueError(f"class sets must be disjoint; {sorted(overlap)} repeated")
        seen.update(g)

    tasks = []
    for t, group in enumerate(groups, start=1):
        classes = tuple(int(c) for c in group)
        train_candidates = np.flatnonzero(np.isin(train_pool.labels, classes))
        test_idx = np.flatnonzero(np.isin(test_pool.labels, classes))
        if train_candidates.size < 2:
            raise ValueError(f"task {t}: classes {classes} have too few training samples")
        rel_train, rel_val = split_indices(
            train_candidates.size, val_fraction, derive_seed(master_seed, TAG_SPLIT, t)
        )
        tasks.append(
            Task(
                index=t,
                name=f"task{t}",
                class_ids=classes,
                train_idx=train_candidates[rel_train],
                val_idx=train_candidates[rel_val],
                test_idx=test_idx,
            )
        )
    return TaskSequence(train_pool, test_pool, tasks, kind="split")


def build_permuted_sequence(
    train_pool: Dataset,
    test_pool: Dataset,
    num_tasks: int,
    master_seed: int,
    val_fraction: float = 0.85,
) -> TaskSequence:
    """Permuted-pixel tasks: full label set each, task 1 unpermuted."""
    c, h, w = train_pool.image_shape
    perms = make_permutations(num_tasks, derive_seed(master_seed, TAG_PERM), num_pixels=h * w)
    classes = tuple(range(train_pool.num_classes))
    n_train = train_pool.num_samples
    all_test = np.arange(test_pool.num_samples)

    tasks = []
    for t in range(1, num_tasks + 1):
        rel_train, rel_val = split_indices(
            n_train, val_fraction, derive_seed(master_seed, TAG_SPLIT, t)
        )
        tasks.append(
            Task(
                index=t,
                name=f"task{t}",
                class_ids=classes,
                train_idx=rel_train,
                val_idx=rel_val,
                test_idx=all_test,
                pixel_permutation=perms.perms[t - 1],
            )
        )
    return TaskSequence(train_pool, test_pool, tasks, kind="permuted")


def task_arrays(seq: TaskSequence, task: Task, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Materialize (images, dataset labels) for one split of one task."""
    if split in ("train", "val"):
        pool = seq.train_pool
        idx = task.train_idx if split == "train" else task.val_idx
    elif split == "test":
        pool = seq.test_pool
        idx = task.test_idx
    else:
        raise ValueError(f"split must be train/val/test, got {split!r}")
    images = pool.images[idx]
    if task.pixel_permutation is not None:
        n, c, h, w = images.shape
        images = images.reshape(n, c, h * w)[:, :, task.pixel_permutation].reshape(n, c, h, w)
    return images, pool.labels[idx]
