"""Task-stream containers and the train-data access auditor.

A stream is an ordered list of tasks; each task carries its own normal-only
train samples and a cumulative test set (every earlier task's test samples
plus the new categories'). The auditor wraps train sample lists so the
protocol can prove it never touched another task's training data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .pointcloud import LABEL_ANOMALOUS, LABEL_NORMAL, PointCloud


@dataclass
class Sample:
    cloud: PointCloud
    category: str
    uid: str
    origin_task: int
    defect: Optional[dict] = None  # kind/amplitude/extent/seed record, if any


@dataclass
class Task:
    task_id: int
    categories: list[str]
    train: list[Sample]
    test: list[Sample]  # cumulative over tasks 1..task_id


@dataclass
class TaskStream:
    tasks: list[Task]

    def __len__(self):
        return len(self.tasks)


def verify_stream(stream: TaskStream) -> None:
    """Assert the structural contract: disjoint normal-only train sets and
    nested test sets. Raises ValueError on violation."""
    seen_train = set()
    prev_test: set[str] = set()
    for task in stream.tasks:
        for s in task.train:
            if s.cloud.label != LABEL_NORMAL:
                raise ValueError(f"anomalous sample {s.uid} in train set of task {task.task_id}")
            if s.uid in seen_train:
                raise ValueError(f"train sample {s.uid} appears in more than one task")
            seen_train.add(s.uid)
        test_ids = {s.uid for s in task.test}
        if not prev_test <= test_ids:
            raise ValueError(f"test set of task {task.task_id} is not a superset of its predecessor")
        labels = {s.cloud.label for s in task.test}
        if labels - {LABEL_NORMAL, LABEL_ANOMALOUS}:
            raise ValueError("unknown label in test set")
        prev_test = test_ids


class AccessAuditor:
    """Records every train-sample read together with the task being trained.

    `begin_task(t)` opens a training window; reads of samples whose origin
    task differs from the window's task are counted as foreign.
    """

    def __init__(self):
        self.current_task: Optional[int] = None
        self.reads: list[tuple[Optional[int], int, str]] = []

    def begin_task(self, task_id: int) -> None:
        self.current_task = task_id

    def end_task(self) -> None:
        self.current_task = None

    def record(self, origin_task: int, uid: str) -> None:
        self.reads.append((self.current_task, origin_task, uid))

    def foreign_reads(self) -> list[tuple[Optional[int], int, str]]:
        return [r for r in self.reads if r[0] is not None and r[0] != r[1]]


class AuditedSamples(Sequence):
    """Sequence of train samples that reports every access to an auditor."""

    def __init__(self, samples: Sequence[Sample], auditor: AccessAuditor):
        self._samples = list(samples)
        self._auditor = auditor

    def __len__(self):
        return len(self._samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            raise TypeError("audited samples do not support slicing")
        s = self._samples[i]
        self._auditor.record(s.origin_task, s.uid)
        return s
