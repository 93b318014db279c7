"""Abstract job objects: the unit of work that travels the grid.

A job is a recursive group of tasks and sub-groups. Sibling dependency
edges form a DAG per group; groups can execute conditionally (gated on
a guard task's exit status) or repeatedly (bounded loop). The canonical
serialization is schema-versioned JSON with sorted keys so that equal
jobs always produce identical bytes: signatures are computed over
exactly these bytes.

Canonical root document::

    {"ajo_version": 1, "job": {...group...}, "project": ..., "agreement_id": ...}
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Union

AJO_VERSION = 1

# Node ids become filesystem path segments and get "#<i>" suffixes for
# loop iterations, so the charset is deliberately narrow.
_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")

MAX_NESTING_DEPTH = 32


class TaskKind(str, Enum):
    EXECUTE = "execute"
    IMPORT = "import"
    EXPORT = "export"
    TRANSFER = "transfer"


class PredicateOp(str, Enum):
    EQ = "=="
    NE = "!="
    LT = "<"


class InvalidJobError(ValueError):
    """Raised when an operation requires a validating job and got none."""

    def __init__(self, report: "ValidationReport"):
        super().__init__("job does not validate: " + "; ".join(str(v) for v in report.violations))
        self.report = report


@dataclass(frozen=True)
class ResourceRequest:
    processors: int
    runtime_limit: int  # seconds
    memory: int  # bytes
    required_software: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = {
            "processors": self.processors,
            "runtime_limit": self.runtime_limit,
            "memory": self.memory,
        }
        if self.required_software:
            d["required_software"] = list(self.required_software)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceRequest":
        return cls(
            processors=int(d["processors"]),
            runtime_limit=int(d["runtime_limit"]),
            memory=int(d["memory"]),
            required_software=tuple(d.get("required_software", ())),
        )


@dataclass(frozen=True)
class TaskSpec:
    """One leaf of a job group.

    Field use by kind:
      execute   command, args, resources
      import    endpoint (absolute local path), workspace_path
      export    workspace_path, endpoint
      transfer  source, dest  (both "vsite:workspace-relative-path")
    """

    task_id: str
    kind: TaskKind
    command: Optional[str] = None
    args: tuple[str, ...] = ()
    resources: Optional[ResourceRequest] = None
    endpoint: Optional[str] = None
    workspace_path: Optional[str] = None
    source: Optional[str] = None
    dest: Optional[str] = None

    def to_dict(self) -> dict:
        d: dict = {"task_id": self.task_id, "kind": self.kind.value}
        if self.kind is TaskKind.EXECUTE:
            d["command"] = self.command
            d["args"] = list(self.args)
            d["resources"] = self.resources.to_dict() if self.resources else None
        elif self.kind is TaskKind.IMPORT:
            d["endpoint"] = self.endpoint
            d["workspace_path"] = self.workspace_path
        elif self.kind is TaskKind.EXPORT:
            d["workspace_path"] = self.workspace_path
            d["endpoint"] = self.endpoint
        else:
            d["source"] = self.source
            d["dest"] = self.dest
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        kind = TaskKind(d["kind"])
        if kind is TaskKind.EXECUTE:
            res = d.get("resources")
            return cls(
                task_id=d["task_id"],
                kind=kind,
                command=d.get("command"),
                args=tuple(d.get("args", ())),
                resources=ResourceRequest.from_dict(res) if res else None,
            )
        if kind in (TaskKind.IMPORT, TaskKind.EXPORT):
            return cls(
                task_id=d["task_id"],
                kind=kind,
                endpoint=d.get("endpoint"),
                workspace_path=d.get("workspace_path"),
            )
        return cls(task_id=d["task_id"], kind=kind, source=d.get("source"), dest=d.get("dest"))


@dataclass(frozen=True)
class Predicate:
    """Exit-status comparison against a named sibling-scope task."""

    child_id: str
    op: PredicateOp
    value: int

    def holds(self, exit_code: int) -> bool:
        if self.op is PredicateOp.EQ:
            return exit_code == self.value
        if self.op is PredicateOp.NE:
            return exit_code != self.value
        return exit_code < self.value

    def to_dict(self) -> dict:
        return {"child_id": self.child_id, "op": self.op.value, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Predicate":
        return cls(child_id=d["child_id"], op=PredicateOp(d["op"]), value=int(d["value"]))


@dataclass(frozen=True)
class Control:
    """Group execution mode: plain, conditional (guard task + predicate),
    or repeat (fixed count, or predicate-continued up to max_iterations)."""

    kind: str = "plain"  # plain | conditional | repeat
    predicate: Optional[Predicate] = None
    count: Optional[int] = None
    max_iterations: Optional[int] = None

    PLAIN: "Control" = None  # type: ignore[assignment]

    @property
    def iteration_bound(self) -> int:
        if self.count is not None:
            return self.count
        return self.max_iterations or 0

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.predicate is not None:
            d["predicate"] = self.predicate.to_dict()
        if self.count is not None:
            d["count"] = self.count
        if self.max_iterations is not None:
            d["max_iterations"] = self.max_iterations
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Control":
        pred = d.get("predicate")
        return cls(
            kind=d.get("kind", "plain"),
            predicate=Predicate.from_dict(pred) if pred else None,
            count=d.get("count"),
            max_iterations=d.get("max_iterations"),
        )


Control.PLAIN = Control()

Child = Union["JobGroup", TaskSpec]


@dataclass(frozen=True)
class JobGroup:
    group_id: str
    children: tuple[Child, ...] = ()
    dependencies: tuple[tuple[str, str], ...] = ()
    control: Control = Control.PLAIN
    target_vsite: Optional[str] = None
    # Workspace-relative paths that must exist before this group's body
    # runs; set for forwarded sub-jobs that consume transferred files.
    await_inputs: tuple[str, ...] = ()

    def child_ids(self) -> list[str]:
        return [child_id(c) for c in self.children]

    def child(self, cid: str) -> Child:
        for c in self.children:
            if child_id(c) == cid:
                return c
        raise KeyError(cid)

    def predecessors(self, cid: str) -> list[str]:
        return [a for (a, b) in self.dependencies if b == cid]

    def to_dict(self) -> dict:
        d: dict = {
            "group_id": self.group_id,
            "children": [c.to_dict() for c in self.children],
            "dependencies": [list(e) for e in self.dependencies],
            "control": self.control.to_dict(),
        }
        if self.target_vsite is not None:
            d["target_vsite"] = self.target_vsite
        if self.await_inputs:
            d["await_inputs"] = list(self.await_inputs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JobGroup":
        children: list[Child] = []
        for c in d.get("children", ()):
            if "group_id" in c:
                children.append(JobGroup.from_dict(c))
            else:
                children.append(TaskSpec.from_dict(c))
        return cls(
            group_id=d["group_id"],
            children=tuple(children),
            dependencies=tuple((e[0], e[1]) for e in d.get("dependencies", ())),
            control=Control.from_dict(d.get("control", {"kind": "plain"})),
            target_vsite=d.get("target_vsite"),
            await_inputs=tuple(d.get("await_inputs", ())),
        )


def child_id(c: Child) -> str:
    return c.group_id if isinstance(c, JobGroup) else c.task_id


@dataclass(frozen=True)
class AbstractJob:
    """Root document: a job group plus submission metadata."""

    root: JobGroup
    project: Optional[str] = None
    agreement_id: Optional[str] = None

    def to_dict(self) -> dict:
        d: dict = {"ajo_version": AJO_VERSION, "job": self.root.to_dict()}
        if self.project is not None:
            d["project"] = self.project
        if self.agreement_id is not None:
            d["agreement_id"] = self.agreement_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AbstractJob":
        if d.get("ajo_version") != AJO_VERSION:
            raise ValueError(f"unsupported ajo_version: {d.get('ajo_version')!r}")
        return cls(
            root=JobGroup.from_dict(d["job"]),
            project=d.get("project"),
            agreement_id=d.get("agreement_id"),
        )


@dataclass(frozen=True)
class Violation:
    path: str  # slash-joined node ids from the root group
    message: str

    def __str__(self) -> str:
        return f"{self.path or '/'}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, path: str, message: str) -> None:
        self.violations.append(Violation(path, message))

    def __str__(self) -> str:
        return "ok" if self.ok else "\n".join(str(v) for v in self.violations)


def parse_vsite_path(qualified: str) -> tuple[str, str]:
    """Split "vsite:path" into its two parts."""
    vsite, sep, path = qualified.partition(":")
    if not sep or not vsite or not path:
        raise ValueError(f"not a vsite-qualified path: {qualified!r}")
    return vsite, path


def is_contained_path(path: str) -> bool:
    """True when *path* stays inside a workspace: relative, no parent escapes."""
    if not path or path.startswith("/") or path.startswith("\\"):
        return False
    parts = path.replace("\\", "/").split("/")
    return all(p not in ("", "..") for p in parts)


def find_cycle(node_ids: list[str], edges: list[tuple[str, str]]) -> Optional[list[str]]:
    """Return the members of one dependency cycle, or None if acyclic."""
    succ: dict[str, list[str]] = {n: [] for n in node_ids}
    for a, b in edges:
        if a in succ and b in succ:
            succ[a].append(b)
    WHITE, GREY, BLACK = 0, 1, 2
    color = {n: WHITE for n in node_ids}
    stack: list[str] = []

    def visit(n: str) -> Optional[list[str]]:
        color[n] = GREY
        stack.append(n)
        for m in succ[n]:
            if color[m] == GREY:
                return stack[stack.index(m):]
            if color[m] == WHITE:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        color[n] = BLACK
        return None

    for n in node_ids:
        if color[n] == WHITE:
            cycle = visit(n)
            if cycle:
                return cycle
    return None


def _contains_remote_group(group: JobGroup) -> bool:
    for c in group.children:
        if isinstance(c, JobGroup):
            if c.target_vsite is not None or _contains_remote_group(c):
                return True
    return False


def _validate_group(group: JobGroup, path: str, depth: int, report: ValidationReport) -> None:
    here = path or "/"
    if depth > MAX_NESTING_DEPTH:
        report.add(here, f"nesting deeper than {MAX_NESTING_DEPTH} levels")
        return
    if not group.group_id or not _ID_RE.match(group.group_id):
        report.add(here, f"bad group id {group.group_id!r}")

    ids = group.child_ids()
    seen: set[str] = set()
    for cid in ids:
        if not cid or not _ID_RE.match(cid):
            report.add(here, f"bad child id {cid!r}")
        if cid in seen:
            report.add(here, f"duplicate child id {cid!r}")
        seen.add(cid)

    for a, b in group.dependencies:
        for end in (a, b):
            if end not in seen:
                report.add(here, f"dependency references unknown child {end!r}")
        if a == b:
            report.add(here, f"self-dependency on {a!r}")

    cycle = find_cycle(ids, [e for e in group.dependencies if e[0] in seen and e[1] in seen and e[0] != e[1]])
    if cycle:
        report.add(here, "cycle at [" + ",".join(sorted(cycle)) + "]")

    ctl = group.control
    if ctl.kind == "conditional":
        if ctl.predicate is None:
            report.add(here, "conditional group without predicate")
        else:
            _validate_guard(group, ctl.predicate, here, report, forbid_incoming=True)
    elif ctl.kind == "repeat":
        if ctl.count is not None:
            if ctl.count < 1:
                report.add(here, f"repeat count must be >= 1, got {ctl.count}")
            if ctl.predicate is not None:
                report.add(here, "repeat group has both count and predicate")
        elif ctl.predicate is not None:
            if not ctl.max_iterations or ctl.max_iterations < 1:
                report.add(here, "repeat predicate requires max_iterations >= 1")
            _validate_guard(group, ctl.predicate, here, report, forbid_incoming=False)
        else:
            report.add(here, "repeat group needs a count or a predicate with max_iterations")
        if _contains_remote_group(group):
            report.add(here, "repeat group may not contain remote-targeted sub-groups")
    elif ctl.kind != "plain":
        report.add(here, f"unknown control kind {ctl.kind!r}")

    for inp in group.await_inputs:
        if not is_contained_path(inp):
            report.add(here, f"await_inputs path escapes workspace: {inp!r}")

    for c in group.children:
        cid = child_id(c)
        cpath = f"{path}/{cid}" if path else cid
        if isinstance(c, JobGroup):
            _validate_group(c, cpath, depth + 1, report)
        else:
            _validate_task(c, cpath, report)


def _validate_guard(
    group: JobGroup, pred: Predicate, here: str, report: ValidationReport, forbid_incoming: bool
) -> None:
    ids = set(group.child_ids())
    if pred.child_id not in ids:
        report.add(here, f"predicate references unknown child {pred.child_id!r}")
        return
    guard = group.child(pred.child_id)
    if not isinstance(guard, TaskSpec) or guard.kind is not TaskKind.EXECUTE:
        report.add(here, f"predicate child {pred.child_id!r} must be an execute task")
    if forbid_incoming and group.predecessors(pred.child_id):
        report.add(here, f"guard {pred.child_id!r} may not have incoming dependencies")


def _validate_task(task: TaskSpec, path: str, report: ValidationReport) -> None:
    if task.kind is TaskKind.EXECUTE:
        if not task.command:
            report.add(path, "execute task without abstract command")
        if task.resources is None:
            report.add(path, "execute task without resource request")
        else:
            r = task.resources
            for name, val in (("processors", r.processors), ("runtime_limit", r.runtime_limit), ("memory", r.memory)):
                if not isinstance(val, int) or val <= 0:
                    report.add(path, f"resource {name} must be a positive integer, got {val!r}")
    elif task.kind in (TaskKind.IMPORT, TaskKind.EXPORT):
        if not task.endpoint or not task.endpoint.startswith("/"):
            report.add(path, f"{task.kind.value} endpoint must be an absolute path")
        if not task.workspace_path or not is_contained_path(task.workspace_path):
            report.add(path, f"{task.kind.value} workspace path must stay inside the workspace")
    else:  # transfer
        for label, val in (("source", task.source), ("dest", task.dest)):
            if not val:
                report.add(path, f"transfer task missing {label}")
                continue
            try:
                _, p = parse_vsite_path(val)
            except ValueError as exc:
                report.add(path, str(exc))
                continue
            if not is_contained_path(p):
                report.add(path, f"transfer {label} path escapes workspace: {p!r}")
        if task.source and task.dest and task.source == task.dest:
            report.add(path, "transfer endpoints must be distinct")


def validate(job: Union[JobGroup, AbstractJob]) -> ValidationReport:
    """Check every structural invariant; violations carry the node path."""
    group = job.root if isinstance(job, AbstractJob) else job
    report = ValidationReport()
    _validate_group(group, "", 1, report)
    return report


def canonical_json(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def canonical_bytes(job: Union[JobGroup, AbstractJob]) -> bytes:
    """Deterministic signing form. Refuses jobs that do not validate."""
    ajo = job if isinstance(job, AbstractJob) else AbstractJob(root=job)
    report = validate(ajo)
    if not report.ok:
        raise InvalidJobError(report)
    return canonical_json(ajo.to_dict())


def from_canonical(data: bytes) -> AbstractJob:
    return AbstractJob.from_dict(json.loads(data.decode("utf-8")))


def iter_remote_groups(group: JobGroup, path: str = "") -> Iterator[tuple[str, "JobGroup"]]:
    """Yield (path, group) for every descendant group carrying a target vsite.

    Does not descend into a remote group: its interior belongs to the
    remote site.
    """
    for c in group.children:
        if not isinstance(c, JobGroup):
            continue
        cpath = f"{path}/{c.group_id}" if path else c.group_id
        if c.target_vsite is not None:
            yield cpath, c
        else:
            yield from iter_remote_groups(c, cpath)


def iter_execute_tasks(group: JobGroup) -> Iterator[TaskSpec]:
    """All execute tasks in the tree, including inside remote sub-groups."""
    for c in group.children:
        if isinstance(c, JobGroup):
            yield from iter_execute_tasks(c)
        elif c.kind is TaskKind.EXECUTE:
            yield c


def instantiate_iteration(group: JobGroup, index: int) -> JobGroup:
    """Clone a repeat group's body for one loop pass.

    Child ids get an ``#<index>`` suffix (and edges are remapped) so every
    instantiated node keeps a unique id; the clone itself runs as a plain
    group.
    """
    mapping = {cid: f"{cid}#{index}" for cid in group.child_ids()}

    def rename(c: Child) -> Child:
        if isinstance(c, JobGroup):
            return JobGroup(
                group_id=mapping[c.group_id],
                children=c.children,
                dependencies=c.dependencies,
                control=c.control,
                target_vsite=c.target_vsite,
                await_inputs=c.await_inputs,
            )
        d = c.to_dict()
        d["task_id"] = mapping[c.task_id]
        return TaskSpec.from_dict(d)

    return JobGroup(
        group_id=f"{group.group_id}#{index}",
        children=tuple(rename(c) for c in group.children),
        dependencies=tuple((mapping[a], mapping[b]) for a, b in group.dependencies),
        control=Control.PLAIN if group.control.kind == "repeat" else group.control,
    )
