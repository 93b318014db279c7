"""Job status trees: per-node states, group rollup, and the ready set.

The status tree mirrors the job group recursion. Task nodes carry their
own state plus execution results (exit code, output references); group
nodes carry a rolled-up aggregate recomputed from their children.

State order (transitions never move backwards)::

    Pending -> Ready -> Staged -> Submitted -> Running -> {Done, Failed, Aborted}

``NotRun`` is the terminal state of nodes that were never executed:
branches not taken and tasks whose predecessors failed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .ajo import AbstractJob, JobGroup, child_id


class JobState(str, Enum):
    PENDING = "Pending"
    READY = "Ready"
    STAGED = "Staged"
    SUBMITTED = "Submitted"
    RUNNING = "Running"
    DONE = "Done"
    FAILED = "Failed"
    ABORTED = "Aborted"
    NOT_RUN = "NotRun"

    @property
    def terminal(self) -> bool:
        return self in _TERMINAL

    @property
    def order(self) -> int:
        return _ORDER[self]


_TERMINAL = frozenset({JobState.DONE, JobState.FAILED, JobState.ABORTED, JobState.NOT_RUN})

_ORDER = {
    JobState.PENDING: 0,
    JobState.READY: 1,
    JobState.STAGED: 2,
    JobState.SUBMITTED: 3,
    JobState.RUNNING: 4,
    JobState.DONE: 5,
    JobState.FAILED: 5,
    JobState.ABORTED: 5,
    JobState.NOT_RUN: 5,
}

# Progress contributed to a parent's aggregate while the group is still
# live. Finished children count as full progress; NotRun as none.
_PROGRESS = {
    JobState.PENDING: 0,
    JobState.READY: 1,
    JobState.STAGED: 2,
    JobState.SUBMITTED: 3,
    JobState.RUNNING: 4,
    JobState.DONE: 4,
    JobState.FAILED: 4,
    JobState.ABORTED: 4,
    JobState.NOT_RUN: 0,
}

_BY_PROGRESS = [JobState.PENDING, JobState.READY, JobState.STAGED, JobState.SUBMITTED, JobState.RUNNING]


class StatusShapeError(ValueError):
    """Status tree does not match the job structure."""


@dataclass
class StatusNode:
    node_id: str
    kind: str  # "group" or a TaskKind value
    state: JobState = JobState.PENDING
    exit_code: Optional[int] = None
    detail: Optional[str] = None
    stdout_ref: Optional[str] = None
    stderr_ref: Optional[str] = None
    children: list["StatusNode"] = field(default_factory=list)
    started: bool = False  # groups: body activated by the engine
    dispatch_seq: Optional[int] = None
    started_at: Optional[float] = None
    finished_at: Optional[float] = None

    def child(self, cid: str) -> "StatusNode":
        for c in self.children:
            if c.node_id == cid:
                return c
        raise StatusShapeError(f"status node {self.node_id!r} has no child {cid!r}")

    def maybe_child(self, cid: str) -> Optional["StatusNode"]:
        for c in self.children:
            if c.node_id == cid:
                return c
        return None

    def find(self, path: str) -> "StatusNode":
        node = self
        for part in path.split("/"):
            if part:
                node = node.child(part)
        return node

    def walk(self, path: str = "") -> "list[tuple[str, StatusNode]]":
        out = [(path, self)]
        for c in self.children:
            cpath = f"{path}/{c.node_id}" if path else c.node_id
            out.extend(c.walk(cpath))
        return out

    def set_state(self, state: JobState, detail: Optional[str] = None, now: Optional[float] = None) -> None:
        if state.order < self.state.order:
            raise ValueError(f"{self.node_id}: state may not regress {self.state.value} -> {state.value}")
        now = now if now is not None else time.time()
        if self.state is JobState.PENDING and state is not JobState.PENDING and self.started_at is None:
            self.started_at = now
        self.state = state
        if detail is not None:
            self.detail = detail
        if state.terminal and self.finished_at is None:
            self.finished_at = now

    def to_dict(self) -> dict:
        d: dict = {"id": self.node_id, "kind": self.kind, "state": self.state.value}
        for key, val in (
            ("exit_code", self.exit_code),
            ("detail", self.detail),
            ("stdout_ref", self.stdout_ref),
            ("stderr_ref", self.stderr_ref),
            ("dispatch_seq", self.dispatch_seq),
            ("started_at", self.started_at),
            ("finished_at", self.finished_at),
        ):
            if val is not None:
                d[key] = val
        if self.kind == "group":
            d["children"] = [c.to_dict() for c in self.children]
            if self.started:
                d["started"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StatusNode":
        node = cls(
            node_id=d["id"],
            kind=d["kind"],
            state=JobState(d["state"]),
            exit_code=d.get("exit_code"),
            detail=d.get("detail"),
            stdout_ref=d.get("stdout_ref"),
            stderr_ref=d.get("stderr_ref"),
            started=d.get("started", False),
            dispatch_seq=d.get("dispatch_seq"),
            started_at=d.get("started_at"),
            finished_at=d.get("finished_at"),
        )
        node.children = [cls.from_dict(c) for c in d.get("children", ())]
        return node


def new_status_tree(job: Union[AbstractJob, JobGroup]) -> StatusNode:
    """Build the all-Pending status tree mirroring a job.

    Repeat groups start with no children: iteration instances are added
    as they are expanded.
    """
    group = job.root if isinstance(job, AbstractJob) else job
    return _new_group_node(group)


def _new_group_node(group: JobGroup) -> StatusNode:
    node = StatusNode(node_id=group.group_id, kind="group")
    if group.control.kind != "repeat":
        for c in group.children:
            if isinstance(c, JobGroup):
                node.children.append(_new_group_node(c))
            else:
                node.children.append(StatusNode(node_id=c.task_id, kind=c.kind.value))
    return node


def rollup(node: StatusNode) -> JobState:
    """Recompute group aggregates bottom-up and return the node's state.

    Idempotent: a second pass over an unchanged tree is a no-op. Rules -
    a group with all children terminal is Failed if any child Failed,
    else Aborted if any child Aborted, else NotRun if nothing executed,
    else Done; a live group reflects the furthest progress among its
    children.
    """
    if node.kind != "group":
        return node.state
    if not node.children:
        return node.state  # empty groups keep their engine-assigned state
    states = [rollup(c) for c in node.children]
    if all(s.terminal for s in states):
        if any(s is JobState.FAILED for s in states):
            agg = JobState.FAILED
        elif any(s is JobState.ABORTED for s in states):
            agg = JobState.ABORTED
        elif all(s is JobState.NOT_RUN for s in states):
            agg = JobState.NOT_RUN
        else:
            agg = JobState.DONE
    else:
        agg = _BY_PROGRESS[max(_PROGRESS[s] for s in states)]
    if agg is not node.state:
        node.set_state(agg)
    return node.state


def aggregate_state(node: StatusNode) -> JobState:
    return rollup(node)


def _check_shape(group: JobGroup, gstatus: StatusNode) -> None:
    if gstatus.kind != "group":
        raise StatusShapeError(f"expected group status for {group.group_id!r}")
    if group.control.kind == "repeat":
        return
    want = group.child_ids()
    have = [c.node_id for c in gstatus.children]
    if want != have:
        raise StatusShapeError(f"group {group.group_id!r}: status children {have} != job children {want}")


def ready_set(group: JobGroup, gstatus: StatusNode) -> set[str]:
    """Children eligible for dispatch right now.

    A child is ready when it is Pending and every predecessor rolled up
    Done. Conditional groups yield nothing until the guard child is Done
    and the predicate holds on its exit code (the guard itself is
    dispatched by the engine, never returned here). Repeat groups manage
    their own iteration expansion and always yield the empty set.
    """
    _check_shape(group, gstatus)
    if group.control.kind == "repeat":
        return set()

    guard_id = None
    if group.control.kind == "conditional":
        pred = group.control.predicate
        guard_id = pred.child_id
        guard = gstatus.child(guard_id)
        if aggregate_state(guard) is not JobState.DONE:
            return set()
        if guard.exit_code is None or not pred.holds(guard.exit_code):
            return set()

    ready: set[str] = set()
    for c in group.children:
        cid = child_id(c)
        if cid == guard_id:
            continue
        cnode = gstatus.child(cid)
        if cnode.state is not JobState.PENDING:
            continue
        if all(aggregate_state(gstatus.child(p)) is JobState.DONE for p in group.predecessors(cid)):
            ready.add(cid)
    return ready


def mark_subtree(node: StatusNode, state: JobState, detail: Optional[str] = None) -> None:
    """Force *state* onto every non-terminal node of a subtree (used for
    NotRun branch pruning and Aborted sweeps)."""
    for c in node.children:
        mark_subtree(c, state, detail)
    if not node.state.terminal:
        # bypass monotonicity: NotRun/Aborted may hit nodes at any stage
        node.state = state
        if detail is not None:
            node.detail = detail
        if node.finished_at is None:
            node.finished_at = time.time()


def prune_unrunnable(group: JobGroup, gstatus: StatusNode) -> bool:
    """Mark Pending children NotRun when a predecessor ended non-Done.

    Returns True when anything changed. Also resolves conditional groups
    whose guard finished: predicate false (or guard failed) prunes the
    gated branch.
    """
    changed = False
    if group.control.kind == "repeat":
        return False
    guard_id = None
    if group.control.kind == "conditional":
        pred = group.control.predicate
        guard_id = pred.child_id
        guard = gstatus.child(guard_id)
        gstate = aggregate_state(guard)
        branch_dead = (
            gstate in (JobState.FAILED, JobState.ABORTED, JobState.NOT_RUN)
            or (gstate is JobState.DONE and (guard.exit_code is None or not pred.holds(guard.exit_code)))
        )
        if branch_dead:
            for c in gstatus.children:
                if c.node_id != guard_id and not c.state.terminal and c.state is JobState.PENDING:
                    mark_subtree(c, JobState.NOT_RUN, "branch not taken")
                    changed = True
    for c in group.children:
        cid = child_id(c)
        if cid == guard_id:
            continue
        cnode = gstatus.child(cid)
        if cnode.state is not JobState.PENDING:
            continue
        pred_states = [aggregate_state(gstatus.child(p)) for p in group.predecessors(cid)]
        if any(s.terminal and s is not JobState.DONE for s in pred_states):
            mark_subtree(cnode, JobState.NOT_RUN, "predecessor did not finish")
            changed = True
    return changed
