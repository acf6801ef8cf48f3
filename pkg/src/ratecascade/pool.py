"""Dependency-ordered execution of a generation tree on a thread pool.

A node is dispatched once all of its parents have finished. Ready nodes are
taken coarsest stage first, then by segment, so ``workers=1`` reproduces the
level-by-level order.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable

from .errors import ContractError, SchedulerError
from .planning import GenerationTree, TreeNode


@dataclass
class TaskRecord:
    node_id: int
    start_seq: int
    end_seq: int
    start: float
    end: float
    thread: str


@dataclass
class ExecutionTrace:
    records: dict[int, TaskRecord] = field(default_factory=dict)
    peak_concurrency: int = 0

    @property
    def order(self) -> list[int]:
        return sorted(self.records, key=lambda i: self.records[i].start_seq)

    def check(self, tree: GenerationTree) -> None:
        """Raise SchedulerError if any node started before a parent finished."""
        missing = set(range(len(tree.nodes))) - set(self.records)
        if missing:
            raise SchedulerError(f"nodes never ran: {sorted(missing)}")
        for node in tree.nodes:
            for p in node.parents:
                if self.records[node.node_id].start_seq < self.records[p].end_seq:
                    raise SchedulerError(f"node {node.node_id} started before parent {p} finished")


def worker_pool_execute(tree: GenerationTree, workers: int,
                        task: Callable[[TreeNode], object] | None = None) -> ExecutionTrace:
    if workers < 1:
        raise ContractError(f"workers must be >= 1, got {workers}")
    task = task or (lambda node: None)
    trace = ExecutionTrace()
    lock = threading.Lock()
    clock = itertools.count()
    active = 0

    def run(node: TreeNode) -> int:
        nonlocal active
        with lock:
            active += 1
            trace.peak_concurrency = max(trace.peak_concurrency, active)
            start_seq, start = next(clock), time.perf_counter()
        try:
            task(node)
        finally:
            with lock:
                active -= 1
                trace.records[node.node_id] = TaskRecord(
                    node.node_id, start_seq, next(clock), start, time.perf_counter(),
                    threading.current_thread().name)
        return node.node_id

    waiting = {n.node_id: len(n.parents) for n in tree.nodes}
    ready = [(n.stage, n.segment, n.node_id) for n in tree.nodes if not n.parents]
    heapq.heapify(ready)

    def release(done: int) -> None:
        for child in tree.children[done]:
            waiting[child] -= 1
            if waiting[child] == 0:
                c = tree.nodes[child]
                heapq.heappush(ready, (c.stage, c.segment, child))

    if workers == 1:
        while ready:
            node_id = heapq.heappop(ready)[2]
            run(tree.nodes[node_id])
            release(node_id)
    else:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="node") as pool:
            pending = set()
            while ready or pending:
                while ready and len(pending) < workers:
                    pending.add(pool.submit(run, tree.nodes[heapq.heappop(ready)[2]]))
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                for fut in done:
                    exc = fut.exception()
                    if exc is not None:
                        for other in pending:
                            other.cancel()
                        raise exc
                    release(fut.result())
    trace.check(tree)
    return trace
