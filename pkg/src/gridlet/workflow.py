"""Workflow documents: the declarative job description the client compiles
into an abstract job.

JSON is the primary dialect; the same structure is accepted as XML. A
document names the submission vsite, a flat task list, dependencies, and
optional explicit groups (for conditional, repeat, or remote execution).
Tasks may declare what files they produce and consume; a consumer on a
different vsite gets an automatically inserted transfer task plus the
dependencies that make it safe, and the remote sub-job holds until the
transferred inputs exist in its workspace.

Minimal document::

    {
      "workflow_version": 1,
      "name": "demo",
      "vsite": "v1",
      "tasks": [
        {"id": "hello", "kind": "execute", "command": "echo", "args": ["hi"]}
      ]
    }

Execute tasks default to 1 processor / 300 s / 256M when ``resources``
is omitted. Memory accepts integers (bytes) or "64M" / "2G" suffixes.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .ajo import (
    AbstractJob,
    Control,
    JobGroup,
    ResourceRequest,
    TaskKind,
    TaskSpec,
    validate,
)

WORKFLOW_VERSION = 1

DEFAULT_RESOURCES = {"processors": 1, "runtime": 300, "memory": "256M"}

_SUFFIXES = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30, "T": 1 << 40}


class CompileError(ValueError):
    """Document rejected; ``location`` points into the document."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location
        self.reason = message


def parse_memory(value: Union[int, str], location: str) -> int:
    if isinstance(value, int):
        return value
    text = str(value).strip()
    if text and text[-1].upper() in _SUFFIXES:
        try:
            return int(float(text[:-1]) * _SUFFIXES[text[-1].upper()])
        except ValueError:
            pass
    try:
        return int(text)
    except ValueError:
        raise CompileError(location, f"cannot parse memory {value!r}") from None


def load_document(source: Union[str, Path, dict]) -> dict:
    """Accept a dict, a JSON/XML file path, or raw JSON/XML text."""
    if isinstance(source, dict):
        return source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).is_file()):
        text = Path(source).read_text()
    else:
        text = str(source)
    stripped = text.lstrip()
    if stripped.startswith("<"):
        return _document_from_xml(stripped)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CompileError("document", f"neither JSON nor XML: {exc}") from exc
    if not isinstance(doc, dict):
        raise CompileError("document", "top level must be an object")
    return doc


def _document_from_xml(text: str) -> dict:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise CompileError("document", f"bad XML: {exc}") from exc
    if root.tag != "workflow":
        raise CompileError("document", f"root element must be <workflow>, got <{root.tag}>")
    doc: dict = {
        "workflow_version": int(root.get("version", WORKFLOW_VERSION)),
        "name": root.get("name", "workflow"),
        "vsite": root.get("vsite"),
        "tasks": [],
        "dependencies": [],
        "groups": [],
    }
    if root.get("project"):
        doc["project"] = root.get("project")
    for el in root:
        if el.tag == "task":
            task = {k: v for k, v in el.attrib.items()}
            args = [a.text or "" for a in el.findall("arg")]
            if args:
                task["args"] = args
            res = el.find("resources")
            if res is not None:
                task["resources"] = {
                    "processors": int(res.get("processors", 1)),
                    "runtime": int(res.get("runtime", 300)),
                    "memory": res.get("memory", "256M"),
                    "software": [s.text for s in res.findall("software")],
                }
            produces = [p.text for p in el.findall("produces") if p.text]
            if produces:
                task["produces"] = produces
            consumes = [{"task": c.get("task"), "path": c.get("path")} for c in el.findall("consumes")]
            if consumes:
                task["consumes"] = consumes
            doc["tasks"].append(task)
        elif el.tag == "dependency":
            doc["dependencies"].append([el.get("from"), el.get("to")])
        elif el.tag == "group":
            group: dict = {
                "id": el.get("id"),
                "members": (el.get("members") or "").split(),
            }
            if el.get("vsite"):
                group["vsite"] = el.get("vsite")
            ctl = el.find("control")
            if ctl is not None:
                control: dict = {"kind": ctl.get("kind", "plain")}
                pred = ctl.find("predicate")
                if pred is not None:
                    control["predicate"] = {
                        "child_id": pred.get("child"),
                        "op": pred.get("op", "=="),
                        "value": int(pred.get("value", 0)),
                    }
                if ctl.get("count"):
                    control["count"] = int(ctl.get("count"))
                if ctl.get("max_iterations"):
                    control["max_iterations"] = int(ctl.get("max_iterations"))
                group["control"] = control
            doc["groups"].append(group)
        else:
            raise CompileError("document", f"unknown element <{el.tag}>")
    return doc


@dataclass
class _TaskInfo:
    spec: TaskSpec
    vsite: str
    produces: list
    consumes: list
    group: Optional[str]  # explicit or auto group id, None when top-level


def _build_task(doc_task: dict, index: int, root_vsite: str) -> _TaskInfo:
    loc = f"tasks[{index}]"
    if not isinstance(doc_task, dict):
        raise CompileError(loc, "task must be an object")
    task_id = doc_task.get("id")
    if not task_id:
        raise CompileError(loc, "task needs an id")
    loc = f"tasks[{index}]({task_id})"
    kind_name = doc_task.get("kind", "execute")
    try:
        kind = TaskKind(kind_name)
    except ValueError:
        raise CompileError(loc, f"unknown kind {kind_name!r}") from None

    if kind is TaskKind.EXECUTE:
        if not doc_task.get("command"):
            raise CompileError(loc, "execute task needs a command")
        res = doc_task.get("resources", DEFAULT_RESOURCES)
        resources = ResourceRequest(
            processors=int(res.get("processors", 1)),
            runtime_limit=int(res.get("runtime", res.get("runtime_limit", 300))),
            memory=parse_memory(res.get("memory", "256M"), loc),
            required_software=tuple(res.get("software", ())),
        )
        spec = TaskSpec(task_id=task_id, kind=kind, command=doc_task["command"],
                        args=tuple(str(a) for a in doc_task.get("args", ())), resources=resources)
    elif kind is TaskKind.IMPORT:
        spec = TaskSpec(task_id=task_id, kind=kind, endpoint=doc_task.get("endpoint"),
                        workspace_path=doc_task.get("workspace"))
    elif kind is TaskKind.EXPORT:
        spec = TaskSpec(task_id=task_id, kind=kind, workspace_path=doc_task.get("workspace"),
                        endpoint=doc_task.get("endpoint"))
    else:
        spec = TaskSpec(task_id=task_id, kind=kind, source=doc_task.get("source"),
                        dest=doc_task.get("dest"))
    return _TaskInfo(
        spec=spec,
        vsite=doc_task.get("vsite", root_vsite),
        produces=list(doc_task.get("produces", ())),
        consumes=list(doc_task.get("consumes", ())),
        group=None,
    )


def compile_document(source: Union[str, Path, dict]) -> AbstractJob:
    """Compile a workflow document into a validating abstract job."""
    doc = load_document(source)
    if doc.get("workflow_version", WORKFLOW_VERSION) != WORKFLOW_VERSION:
        raise CompileError("workflow_version", f"unsupported version {doc.get('workflow_version')!r}")
    root_vsite = doc.get("vsite")
    if not root_vsite:
        raise CompileError("vsite", "document must name the submission vsite")

    tasks: dict[str, _TaskInfo] = {}
    for i, doc_task in enumerate(doc.get("tasks", ())):
        info = _build_task(doc_task, i, root_vsite)
        if info.spec.task_id in tasks:
            raise CompileError(f"tasks[{i}]", f"duplicate task id {info.spec.task_id!r}")
        tasks[info.spec.task_id] = info
    if not tasks:
        raise CompileError("tasks", "document has no tasks")

    # explicit groups claim their members
    groups: dict[str, dict] = {}
    for i, doc_group in enumerate(doc.get("groups", ())):
        gid = doc_group.get("id")
        if not gid:
            raise CompileError(f"groups[{i}]", "group needs an id")
        if gid in groups or gid in tasks:
            raise CompileError(f"groups[{i}]", f"duplicate id {gid!r}")
        members = list(doc_group.get("members", ()))
        if not members:
            raise CompileError(f"groups[{i}]({gid})", "group has no members")
        for m in members:
            if m not in tasks:
                raise CompileError(f"groups[{i}]({gid})", f"member {m!r} is not a task")
            if tasks[m].group is not None:
                raise CompileError(f"groups[{i}]({gid})", f"task {m!r} already grouped")
            tasks[m].group = gid
        gvsite = doc_group.get("vsite")
        if gvsite:
            for m in members:
                tasks[m].vsite = gvsite
        for m in members:
            if tasks[m].vsite != tasks[members[0]].vsite:
                raise CompileError(f"groups[{i}]({gid})", "group members must share one vsite")
        groups[gid] = {
            "members": members,
            "vsite": gvsite or tasks[members[0]].vsite,
            "control": Control.from_dict(doc_group.get("control", {"kind": "plain"})),
            "await_inputs": [],
        }

    # ungrouped foreign-vsite tasks get one auto group per vsite
    for info in tasks.values():
        if info.group is None and info.vsite != root_vsite:
            gid = f"at-{info.vsite}"
            if gid not in groups:
                groups[gid] = {"members": [], "vsite": info.vsite,
                               "control": Control.PLAIN, "await_inputs": []}
            groups[gid]["members"].append(info.spec.task_id)
            info.group = gid

    def effective(task_id: str) -> str:
        g = tasks[task_id].group
        return g if g is not None else task_id

    top_edges: list[tuple[str, str]] = []
    group_edges: dict[str, list] = {gid: [] for gid in groups}

    def add_edge(a: str, b: str, loc: str) -> None:
        for t in (a, b):
            if t not in tasks:
                raise CompileError(loc, f"dependency references unknown task {t!r}")
        ga, gb = tasks[a].group, tasks[b].group
        if ga is not None and ga == gb:
            edge = (a, b)
            if edge not in group_edges[ga]:
                group_edges[ga].append(edge)
            return
        ea, eb = effective(a), effective(b)
        if ea == eb:
            return
        edge = (ea, eb)
        if edge not in top_edges:
            top_edges.append(edge)

    for i, dep in enumerate(doc.get("dependencies", ())):
        if not isinstance(dep, (list, tuple)) or len(dep) != 2:
            raise CompileError(f"dependencies[{i}]", "dependency must be a [from, to] pair")
        add_edge(dep[0], dep[1], f"dependencies[{i}]")

    # consumes: same-vsite -> plain edge; cross-vsite -> inserted transfer
    transfers: dict[tuple, TaskSpec] = {}
    for info in tasks.values():
        consumer = info.spec.task_id
        loc = f"task {consumer!r} consumes"
        for ref in info.consumes:
            producer = ref.get("task")
            path = ref.get("path")
            if producer not in tasks:
                raise CompileError(loc, f"unknown producer task {producer!r}")
            if not path:
                raise CompileError(loc, "consumes entry needs a path")
            if path not in tasks[producer].produces:
                raise CompileError(loc, f"task {producer!r} does not produce {path!r}")
            pv, cv = tasks[producer].vsite, info.vsite
            if pv == cv:
                add_edge(producer, consumer, loc)
                continue
            key = (producer, path, cv)
            if key not in transfers:
                xfer = TaskSpec(
                    task_id=f"xfer-{producer}-{len(transfers)}",
                    kind=TaskKind.TRANSFER,
                    source=f"{pv}:{path}",
                    dest=f"{cv}:{path}",
                )
                transfers[key] = xfer
                top_edges.append((effective(producer), xfer.task_id))
                top_edges.append((xfer.task_id, effective(consumer)))
                if info.group is not None and path not in groups[info.group]["await_inputs"]:
                    groups[info.group]["await_inputs"].append(path)
            else:
                edge = (transfers[key].task_id, effective(consumer))
                if edge not in top_edges:
                    top_edges.append(edge)

    # assemble: top-level children keep document order, transfers appended
    children: list = []
    emitted_groups: set[str] = set()
    for info in tasks.values():
        if info.group is None:
            children.append(info.spec)
        elif info.group not in emitted_groups:
            gid = info.group
            g = groups[gid]
            target = g["vsite"] if g["vsite"] != root_vsite else None
            children.append(JobGroup(
                group_id=gid,
                children=tuple(tasks[m].spec for m in g["members"]),
                dependencies=tuple(group_edges[gid]),
                control=g["control"],
                target_vsite=target,
                await_inputs=tuple(g["await_inputs"]),
            ))
            emitted_groups.add(gid)
    children.extend(transfers.values())

    name = str(doc.get("name", "workflow"))
    root_id = "".join(ch if ch.isalnum() or ch in "._-" else "-" for ch in name) or "workflow"
    root = JobGroup(group_id=root_id, children=tuple(children), dependencies=tuple(top_edges))
    job = AbstractJob(root=root, project=doc.get("project"), agreement_id=doc.get("agreement_id"))

    report = validate(job)
    if not report.ok:
        raise CompileError("document", f"compiled job does not validate: {report}")
    return job
