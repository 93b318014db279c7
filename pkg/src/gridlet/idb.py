"""Per-Vsite site databases: incarnation (IDB) and user mapping (UUDB).

The IDB turns abstract tasks into concrete submission scripts: it maps
abstract command names to executables, declares what the site offers
(processors, runtime, memory, software), carries the script template the
supervisor fills in, and the cost rate the broker bills with.

The UUDB maps certificate distinguished names to local accounts; an
unmapped DN is a hard authorization failure.

IDB file (TOML)::

    [vsite]
    name = "v1"

    [resources]
    processors = 8
    max_runtime = 3600          # seconds
    memory = 1073741824         # bytes
    software = ["blas 3", "fftw 3.3"]

    [commands]
    echo = "/bin/echo"
    sh = "/bin/sh"

    [admin]
    cost_rate = 0.002           # currency units per processor-second

    [template]
    script = '''...'''          # optional; placeholders {command} {args}
                                # {workdir} {task_id} {processors}
                                # {runtime_limit} {memory}

UUDB file: one mapping per line, ``<DN> -> <account>:<project>``.
"""

from __future__ import annotations

import re
import shlex
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ajo import ResourceRequest, TaskSpec, TaskKind
from .pki import canonical_dn

DEFAULT_TEMPLATE = """#!/bin/sh
# incarnated submission script
# task: {task_id}
# limits: processors={processors} runtime={runtime_limit}s memory={memory}
cd {workdir}
exec {command} {args}
"""

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


class IdbError(Exception):
    pass


class IncarnationError(IdbError):
    pass


class UnsatisfiableError(IdbError):
    """Job asks for something the site does not offer."""


@dataclass(frozen=True)
class ResourceOffer:
    vsite_name: str
    processors: int
    max_runtime: int
    memory: int
    software: tuple[str, ...]
    cost_rate: float

    def satisfies(self, request: ResourceRequest) -> bool:
        return (
            request.processors <= self.processors
            and request.runtime_limit <= self.max_runtime
            and request.memory <= self.memory
            and all(s in self.software for s in request.required_software)
        )

    def to_dict(self) -> dict:
        return {
            "vsite_name": self.vsite_name,
            "processors": self.processors,
            "max_runtime": self.max_runtime,
            "memory": self.memory,
            "software": list(self.software),
            "cost_rate": self.cost_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceOffer":
        return cls(
            vsite_name=d["vsite_name"],
            processors=int(d["processors"]),
            max_runtime=int(d["max_runtime"]),
            memory=int(d["memory"]),
            software=tuple(d.get("software", ())),
            cost_rate=float(d["cost_rate"]),
        )


@dataclass(frozen=True)
class IncarnationDatabase:
    vsite_name: str
    command_table: dict
    offer: ResourceOffer
    submit_template: str = DEFAULT_TEMPLATE

    @classmethod
    def load(cls, path: str | Path) -> "IncarnationDatabase":
        with open(path, "rb") as f:
            doc = tomllib.load(f)
        try:
            name = doc["vsite"]["name"]
            res = doc["resources"]
            offer = ResourceOffer(
                vsite_name=name,
                processors=int(res["processors"]),
                max_runtime=int(res["max_runtime"]),
                memory=int(res["memory"]),
                software=tuple(res.get("software", ())),
                cost_rate=float(doc.get("admin", {}).get("cost_rate", 0.0)),
            )
            commands = dict(doc.get("commands", {}))
        except KeyError as exc:
            raise IdbError(f"{path}: missing IDB key {exc}") from exc
        if offer.processors <= 0 or offer.max_runtime <= 0 or offer.memory <= 0:
            raise IdbError(f"{path}: resource offer quantities must be positive")
        template = doc.get("template", {}).get("script", DEFAULT_TEMPLATE)
        return cls(vsite_name=name, command_table=commands, offer=offer, submit_template=template)

    def resolve_command(self, abstract: str) -> str:
        if abstract not in self.command_table:
            raise UnsatisfiableError(f"abstract command not in IDB: {abstract!r}")
        return self.command_table[abstract]

    def check_request(self, request: ResourceRequest) -> None:
        if request.processors > self.offer.processors:
            raise UnsatisfiableError(
                f"requested {request.processors} processors, offer is {self.offer.processors}")
        if request.runtime_limit > self.offer.max_runtime:
            raise UnsatisfiableError(
                f"requested {request.runtime_limit}s runtime, offer is {self.offer.max_runtime}s")
        if request.memory > self.offer.memory:
            raise UnsatisfiableError(f"requested {request.memory} bytes memory, offer is {self.offer.memory}")
        missing = [s for s in request.required_software if s not in self.offer.software]
        if missing:
            raise UnsatisfiableError(f"software not installed: {missing}")


def incarnate(task: TaskSpec, idb: IncarnationDatabase, workdir: str, task_path: str = "") -> str:
    """Fill the site's submit template for one execute task.

    Pure function of (task, IDB, workdir): the same inputs always produce
    a byte-identical script.
    """
    if task.kind is not TaskKind.EXECUTE:
        raise IncarnationError(f"only execute tasks incarnate, got {task.kind.value}")
    executable = idb.resolve_command(task.command)
    r = task.resources
    values = {
        "command": shlex.quote(executable),
        "args": " ".join(shlex.quote(a) for a in task.args),
        "workdir": shlex.quote(workdir),
        "task_id": task_path or task.task_id,
        "processors": str(r.processors),
        "runtime_limit": str(r.runtime_limit),
        "memory": str(r.memory),
    }
    script = idb.submit_template
    for name, val in values.items():
        script = script.replace("{" + name + "}", val)
    leftover = _PLACEHOLDER_RE.search(script)
    if leftover:
        raise IncarnationError(f"template placeholder unfilled: {leftover.group(0)}")
    return script


class UserMappingDatabase:
    """Exact-match DN -> [(account, project)] table."""

    def __init__(self, entries: dict):
        self.entries = entries  # canonical DN -> list[(account, project)]

    @classmethod
    def load(cls, path: str | Path) -> "UserMappingDatabase":
        entries: dict = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            dn_part, sep, acct_part = line.partition("->")
            if not sep:
                raise IdbError(f"{path}:{lineno}: expected '<DN> -> <account>:<project>'")
            account, _, project = acct_part.strip().partition(":")
            if not account:
                raise IdbError(f"{path}:{lineno}: empty account")
            dn = canonical_dn(dn_part.strip())
            entries.setdefault(dn, []).append((account, project or "default"))
        return cls(entries)

    def lookup(self, dn: str) -> list[tuple[str, str]]:
        return self.entries.get(canonical_dn(dn), [])

    def select(self, dn: str, project: str | None) -> tuple[str, str]:
        """Pick the mapping for a DN; a named project must be mapped."""
        mappings = self.lookup(dn)
        if not mappings:
            raise KeyError(f"DN not mapped: {dn}")
        if project is None:
            return mappings[0]
        for account, proj in mappings:
            if proj == project:
                return account, proj
        raise KeyError(f"DN {dn} has no mapping for project {project!r}")
