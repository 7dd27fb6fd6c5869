"""Worker pool and memory-budget plumbing shared by the per-tensor operations."""

from __future__ import annotations

import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, TypeVar

from .tensorstore import DEFAULT_TENSOR_BUDGET

T = TypeVar("T")
R = TypeVar("R")

MIN_TENSOR_BUDGET = 16 * 1024 * 1024


class MismatchError(ValueError):
    """Checkpoints do not line up the way the active policy requires."""

    def __init__(self, msg: str, diff: list[str] | None = None):
        self.diff = list(diff or [])
        super().__init__(msg if not self.diff else msg + ":\n  " + "\n  ".join(self.diff))


@dataclass(frozen=True)
class Runtime:
    """How much parallelism and memory an operation may use.

    ``tensor_budget`` bounds the bytes of tensor data held at once across all
    workers; each worker gets an equal share.
    """

    workers: int = 1
    tensor_budget: int = DEFAULT_TENSOR_BUDGET

    @classmethod
    def auto(cls, tensor_budget: int = DEFAULT_TENSOR_BUDGET, memory_ceiling: int | None = None) -> "Runtime":
        workers = os.cpu_count() or 1
        if memory_ceiling:
            workers = max(1, min(workers, memory_ceiling // tensor_budget))
        return cls(workers=workers, tensor_budget=tensor_budget)

    def chunk_elements(self, bytes_per_element: int) -> int:
        share = self.tensor_budget // max(1, self.workers)
        return max(1, share // bytes_per_element)

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> Iterator[R]:
        """``map`` with at most ``workers`` tasks in flight; results come back in input order."""
        if self.workers <= 1:
            yield from map(fn, items)
            return
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            pending: deque = deque()
            for item in items:
                pending.append(pool.submit(fn, item))
                if len(pending) >= self.workers:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()


def exact_sum(values: Iterable[float]) -> float:
    return math.fsum(values)
