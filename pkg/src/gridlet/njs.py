"""Per-Vsite job supervisor.

Accepts signed job envelopes relayed by gateways, verifies them end to
end (signature, chain, nested sub-job envelopes), authorizes the signer
against the user mapping database, checks every abstract command and
resource request against the incarnation database, and then drives the
workflow: staging, incarnated script submission to the batch daemon,
cross-site transfers, and forwarding of signed sub-jobs to partner
organizations through their gateways.

Job records are journaled (append-only snapshots, last one wins) so a
restarted supervisor resumes where it stopped: finished tasks are never
re-executed, in-flight batch jobs are re-polled, and batch jobs the
daemon no longer knows are failed as lost.

The supervisor also hosts this Vsite's agreement manager: a persisted
slot calendar serving reserve/confirm/release frames for the
co-allocating meta-scheduler.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import logging
import os
import secrets
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import ajo, pki, upl
from .ajo import AbstractJob, JobGroup, TaskKind, TaskSpec, child_id, instantiate_iteration
from .idb import IncarnationDatabase, UnsatisfiableError, UserMappingDatabase, incarnate
from .pki import SignedEnvelope, TrustAnchors, VerifyFailure
from .reservations import ReservationError, SlotCalendar
from .status import JobState, StatusNode, mark_subtree, new_status_tree, prune_unrunnable, ready_set, rollup
from .tsi import TsiClient, TsiError
from .upl import Channel, Frame, MessageType, Session

log = logging.getLogger("gridlet.njs")

REJECTED_UNVERIFIED = "rejected-unverified"
REJECTED_UNAUTHORIZED = "rejected-unauthorized"
REJECTED_UNSATISFIABLE = "rejected-unsatisfiable"
UNKNOWN_JOB = "unknown-job"


class NjsRejection(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.reason = message


@dataclass
class NjsConfig:
    vsite_name: str
    home_usite: str
    host: str
    port: int
    cert_file: Path
    key_file: Path
    anchors_dir: Path
    idb_path: Path
    uudb_path: Path
    spool: Path
    tsi_host: str
    tsi_port: int
    gateways: list  # ["host:port", ...] to register at (fully connected: all of them)
    poll_interval: float = 0.2
    heartbeat: float = 2.0
    remote_timeout: float = 10.0
    # how long a batch daemon may stay unreachable before in-flight tasks fail
    tsi_grace: float = 10.0

    @classmethod
    def load(cls, path: str | Path) -> "NjsConfig":
        path = Path(path)
        with open(path, "rb") as f:
            doc = tomllib.load(f)
        n = doc["njs"]
        base = path.parent

        def resolve(p: str) -> Path:
            q = Path(p)
            return q if q.is_absolute() else base / q

        return cls(
            vsite_name=n["vsite"],
            home_usite=n.get("usite", ""),
            host=n.get("host", "127.0.0.1"),
            port=int(n["port"]),
            cert_file=resolve(n["cert"]),
            key_file=resolve(n["key"]),
            anchors_dir=resolve(n["anchors"]),
            idb_path=resolve(n["idb"]),
            uudb_path=resolve(n["uudb"]),
            spool=resolve(n["spool"]),
            tsi_host=n.get("tsi_host", "127.0.0.1"),
            tsi_port=int(n["tsi_port"]),
            gateways=list(n.get("gateways", ())),
            poll_interval=float(n.get("poll_interval", 0.2)),
            heartbeat=float(n.get("heartbeat", 2.0)),
            remote_timeout=float(n.get("remote_timeout", 10.0)),
            tsi_grace=float(n.get("tsi_grace", 10.0)),
        )


@dataclass
class JobRecord:
    job_id: str
    owner_dn: str
    submitter_dn: str
    account: str
    project: str
    envelope: SignedEnvelope
    job: AbstractJob
    status: StatusNode
    workspace: Path
    tsi_handles: dict = field(default_factory=dict)  # node path -> tsi job id
    remote: dict = field(default_factory=dict)  # group path -> {vsite, job_id, aborted?}
    dispatch_counter: int = 0
    aborted: bool = False
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)
    last_remote_poll: dict = field(default_factory=dict, repr=False)
    tsi_down_since: dict = field(default_factory=dict, repr=False)  # node path -> first failure

    def snapshot_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "owner_dn": self.owner_dn,
            "submitter_dn": self.submitter_dn,
            "account": self.account,
            "project": self.project,
            "envelope_b64": base64.b64encode(self.envelope.to_wire()).decode("ascii"),
            "status": self.status.to_dict(),
            "tsi_handles": self.tsi_handles,
            "remote": self.remote,
            "dispatch_counter": self.dispatch_counter,
            "aborted": self.aborted,
        }


class NjsServer:
    def __init__(self, config: NjsConfig):
        self.config = config
        self.idb = IncarnationDatabase.load(config.idb_path)
        if self.idb.vsite_name != config.vsite_name:
            raise ValueError(f"IDB is for vsite {self.idb.vsite_name!r}, supervisor is {config.vsite_name!r}")
        self.uudb = UserMappingDatabase.load(config.uudb_path)
        self.anchors = TrustAnchors.load(config.anchors_dir)
        self.tsi = TsiClient(config.tsi_host, config.tsi_port)
        config.spool.mkdir(parents=True, exist_ok=True)
        (config.spool / "jobs").mkdir(exist_ok=True)
        self.calendar = SlotCalendar(
            capacity=self.idb.offer.processors,
            persist_path=str(config.spool / "calendar.json"),
        )
        self.records: dict[str, JobRecord] = {}
        self._records_lock = threading.Lock()
        self._engines: dict[str, threading.Thread] = {}
        self._stop = threading.Event()
        self._server = upl.UplServer(
            config.host, config.port, config.cert_file, config.key_file,
            config.anchors_dir, handler=self._handle, admit=self._admit,
        )
        self._register_thread: Optional[threading.Thread] = None

    # --- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self._replay_journals()
        self._server.start()
        self._register_thread = threading.Thread(target=self._registration_loop,
                                                 name="njs-register", daemon=True)
        self._register_thread.start()
        for record in list(self.records.values()):
            if not record.status.state.terminal:
                self._start_engine(record)
        log.info("njs %s serving on %s:%s", self.config.vsite_name, self.config.host, self.port)

    def stop(self) -> None:
        self._stop.set()
        self._server.stop()

    @property
    def port(self) -> int:
        return self._server.port

    def _registration_loop(self) -> None:
        body = {
            "vsite_name": self.config.vsite_name,
            "endpoint": f"{self.config.host}:{self.port}",
            "home_usite": self.config.home_usite,
        }
        while not self._stop.is_set():
            for addr in self.config.gateways:
                host, _, port = addr.rpartition(":")
                try:
                    with upl.connect(host, int(port), self.config.cert_file, self.config.key_file,
                                     self.config.anchors_dir, timeout=3.0) as ch:
                        ch.request(Frame.of(MessageType.REGISTER_NJS, body))
                except (upl.ConnectError, upl.FrameError, OSError, ValueError):
                    pass  # gateway down; retry next beat
            self._stop.wait(self.config.heartbeat)

    # --- persistence ---------------------------------------------------------

    def _journal_path(self, job_id: str) -> Path:
        return self.config.spool / "jobs" / job_id / "journal.jsonl"

    def _snapshot(self, record: JobRecord) -> None:
        import json

        with record.lock:
            line = json.dumps({"ev": "snapshot", "record": record.snapshot_dict()})
        path = self._journal_path(record.job_id)
        with open(path, "a") as f:
            f.write(line + "\n")

    def _replay_journals(self) -> None:
        import json

        jobs_dir = self.config.spool / "jobs"
        for jobdir in sorted(jobs_dir.iterdir()) if jobs_dir.is_dir() else []:
            journal = jobdir / "journal.jsonl"
            if not journal.is_file():
                continue
            last = None
            for line in journal.read_text().splitlines():
                try:
                    doc = json.loads(line)
                    if doc.get("ev") == "snapshot":
                        last = doc["record"]
                except json.JSONDecodeError:
                    continue  # torn final line from a crash
            if last is None:
                continue
            envelope = SignedEnvelope.from_wire(base64.b64decode(last["envelope_b64"]))
            record = JobRecord(
                job_id=last["job_id"],
                owner_dn=last["owner_dn"],
                submitter_dn=last["submitter_dn"],
                account=last["account"],
                project=last["project"],
                envelope=envelope,
                job=ajo.from_canonical(envelope.payload),
                status=StatusNode.from_dict(last["status"]),
                workspace=jobdir / "workspace",
                tsi_handles=dict(last.get("tsi_handles", {})),
                remote=dict(last.get("remote", {})),
                dispatch_counter=int(last.get("dispatch_counter", 0)),
                aborted=bool(last.get("aborted", False)),
            )
            self.records[record.job_id] = record
            log.info("replayed job %s (%s)", record.job_id, record.status.state.value)

    # --- admission and frame handling -----------------------------------------

    def _admit(self, session: Session) -> Optional[Frame]:
        # only gateways and partner supervisors talk to an NJS directly
        if session.role != "server":
            return upl.error_frame("admission-denied", "supervisor accepts server-role peers only")
        return None

    @staticmethod
    def _origin(session: Session, frame: Frame) -> tuple[str, str]:
        dn = frame.ext.get("origin_dn", session.dn)
        role = frame.ext.get("origin_role", session.role or "server")
        return dn, role

    def _handle(self, session: Session, frame: Frame, channel: Channel) -> Optional[Frame]:
        origin_dn, origin_role = self._origin(session, frame)
        t = frame.msg_type
        try:
            if t is MessageType.SUBMIT_JOB:
                return self._handle_submit(frame, origin_dn)
            if t is MessageType.QUERY_STATUS:
                return self._handle_query(frame, origin_dn)
            if t is MessageType.FETCH_OUTPUT:
                return self._handle_fetch(frame, origin_dn, channel)
            if t is MessageType.ABORT_JOB:
                return self._handle_abort(frame, origin_dn)
            if t is MessageType.GET_RESOURCES:
                return upl.ack({"offer": self.idb.offer.to_dict(), "reservations": self.calendar.snapshot()})
            if t is MessageType.RESERVE_SLOTS:
                return self._handle_reserve(frame, origin_dn)
            if t is MessageType.CONFIRM_RESERVATION:
                return self._handle_confirm(frame)
            if t is MessageType.RELEASE_RESERVATION:
                return self._handle_release(frame)
            if t is MessageType.FILE_STREAM_FOLLOWS:
                return self._handle_file_stream(frame, origin_dn, origin_role, channel)
        except upl.FrameError as exc:
            return upl.error_frame("protocol-error", str(exc))
        return upl.error_frame("protocol-error", f"supervisor does not serve {t.name}")

    # --- job acceptance -------------------------------------------------------

    def accept_job(self, envelope_bytes: bytes, origin_dn: str) -> str:
        """Verify, authorize, admit, persist; returns the new job id."""
        try:
            env = SignedEnvelope.from_wire(envelope_bytes)
            ident, job = pki.verify_job_envelope(env, self.anchors)
        except VerifyFailure as exc:
            raise NjsRejection(REJECTED_UNVERIFIED, str(exc)) from exc

        try:
            account, project = self.uudb.select(ident.dn, job.project)
        except KeyError as exc:
            raise NjsRejection(REJECTED_UNAUTHORIZED, str(exc.args[0])) from exc

        report = ajo.validate(job)
        if not report.ok:
            raise NjsRejection(REJECTED_UNSATISFIABLE, f"job does not validate: {report}")
        for task in ajo.iter_execute_tasks(job.root):
            # tasks inside remote sub-groups are the target site's concern
            pass
        for task in self._local_execute_tasks(job.root):
            try:
                self.idb.resolve_command(task.command)
                self.idb.check_request(task.resources)
            except UnsatisfiableError as exc:
                raise NjsRejection(REJECTED_UNSATISFIABLE, f"task {task.task_id}: {exc}") from exc

        job_id = secrets.token_hex(16)
        jobdir = self.config.spool / "jobs" / job_id
        workspace = jobdir / "workspace"
        workspace.mkdir(parents=True)
        record = JobRecord(
            job_id=job_id,
            owner_dn=ident.dn,
            submitter_dn=origin_dn,
            account=account,
            project=project,
            envelope=env,
            job=job,
            status=new_status_tree(job),
            workspace=workspace,
        )
        with self._records_lock:
            self.records[job_id] = record
        self._snapshot(record)
        log.info("accepted job %s owner=%s account=%s envelope sha256=%s",
                 job_id, ident.dn, account, hashlib.sha256(envelope_bytes).hexdigest())
        self._start_engine(record)
        return job_id

    def _local_execute_tasks(self, group: JobGroup):
        for c in group.children:
            if isinstance(c, JobGroup):
                if c.target_vsite is not None and c.target_vsite != self.config.vsite_name:
                    continue
                yield from self._local_execute_tasks(c)
            elif c.kind is TaskKind.EXECUTE:
                yield c

    def _handle_submit(self, frame: Frame, origin_dn: str) -> Frame:
        target = frame.ext.get("vsite")
        if target and target != self.config.vsite_name:
            return upl.error_frame("unknown-vsite", f"this supervisor serves {self.config.vsite_name!r}")
        try:
            job_id = self.accept_job(frame.payload, origin_dn)
        except NjsRejection as exc:
            log.info("rejected submission from %s: %s", origin_dn, exc)
            return upl.error_frame(exc.code, exc.reason)
        return upl.ack({"job_id": job_id, "vsite": self.config.vsite_name})

    # --- ownership + queries ---------------------------------------------------

    def _authorized_record(self, job_id: str, origin_dn: str) -> JobRecord:
        record = self.records.get(job_id)
        # not-owner looks exactly like unknown: no existence leak
        if record is None or origin_dn not in (record.owner_dn, record.submitter_dn):
            raise NjsRejection(UNKNOWN_JOB, f"no such job: {job_id}")
        return record

    def _handle_query(self, frame: Frame, origin_dn: str) -> Frame:
        body = frame.json()
        try:
            record = self._authorized_record(body.get("job_id", ""), origin_dn)
        except NjsRejection as exc:
            return upl.error_frame(exc.code, exc.reason)
        with record.lock:
            rollup(record.status)
            tree = record.status.to_dict()
        return upl.ack({"job_id": record.job_id, "status": tree})

    def _handle_abort(self, frame: Frame, origin_dn: str) -> Frame:
        body = frame.json()
        try:
            record = self._authorized_record(body.get("job_id", ""), origin_dn)
        except NjsRejection as exc:
            return upl.error_frame(exc.code, exc.reason)
        with record.lock:
            terminal = record.status.state.terminal
            record.aborted = True
        if terminal:
            return upl.ack({"job_id": record.job_id, "state": record.status.state.value})
        if not self._engine_alive(record.job_id):
            self._perform_abort(record)  # no engine to pick the flag up
        return upl.ack({"job_id": record.job_id, "state": "aborting"})

    def _handle_fetch(self, frame: Frame, origin_dn: str, channel: Channel) -> Optional[Frame]:
        body = frame.json()
        try:
            record = self._authorized_record(body.get("job_id", ""), origin_dn)
        except NjsRejection as exc:
            return upl.error_frame(exc.code, exc.reason)
        task_path = body.get("task", "")
        stream = body.get("stream", "stdout")
        offset = int(body.get("offset", 0))
        if stream not in ("stdout", "stderr"):
            return upl.error_frame("protocol-error", f"unknown stream {stream!r}")

        # outputs of a forwarded sub-job live at the remote site: proxy
        prefix = self._remote_prefix(record, task_path)
        if prefix is not None:
            info = record.remote[prefix]
            inner = task_path[len(prefix) + 1:]
            try:
                return self._proxy_remote_fetch(info, inner, stream, offset, channel)
            except (upl.ConnectError, upl.FrameError, upl.StreamError, OSError) as exc:
                return upl.error_frame("vsite-unavailable", f"sub-job site unreachable: {exc}")

        with record.lock:
            try:
                node = record.status.find(task_path)
            except Exception:
                return upl.error_frame("not-found", f"no such task: {task_path}")
            ref = node.stdout_ref if stream == "stdout" else node.stderr_ref
        if not ref:
            return upl.error_frame("not-found", f"no {stream} recorded for {task_path}")
        target = record.workspace / ref
        if not target.is_file():
            return upl.error_frame("not-found", f"{stream} file missing")
        size = target.stat().st_size
        channel.send(Frame.of(MessageType.FILE_STREAM_FOLLOWS,
                              {"path": ref, "size": size, "offset": offset}, ext={"op": "get"}))
        with open(target, "rb") as f:
            upl.send_stream(channel.wfile, f, offset=offset)
        return None

    def _remote_prefix(self, record: JobRecord, task_path: str) -> Optional[str]:
        best = None
        for prefix in record.remote:
            if task_path == prefix or task_path.startswith(prefix + "/"):
                if best is None or len(prefix) > len(best):
                    best = prefix
        return best

    def _proxy_remote_fetch(self, info: dict, task_path: str, stream: str,
                            offset: int, channel: Channel) -> None:
        frame = Frame.of(
            MessageType.FETCH_OUTPUT,
            {"job_id": info["job_id"], "task": task_path, "stream": stream, "offset": offset},
            ext={"vsite": info["vsite"]},
        )
        with self._gateway_channel() as gw:
            gw.send(frame)
            meta = gw.recv()
            channel.send(meta)
            if meta.msg_type is MessageType.FILE_STREAM_FOLLOWS:
                upl.relay_stream(gw.rfile, channel.wfile)
        return None

    # --- agreement manager -----------------------------------------------------

    def _handle_reserve(self, frame: Frame, origin_dn: str) -> Frame:
        body = frame.json()
        try:
            self.calendar.hold(
                agreement_id=body["agreement_id"],
                holder=origin_dn,
                start=float(body["start"]),
                end=float(body["end"]),
                processors=int(body["processors"]),
            )
        except KeyError as exc:
            return upl.error_frame("protocol-error", f"missing field {exc}")
        except ReservationError as exc:
            return upl.error_frame(exc.code, str(exc))
        return upl.ack({"agreement_id": body["agreement_id"], "state": "HELD"})

    def _handle_confirm(self, frame: Frame) -> Frame:
        body = frame.json()
        try:
            self.calendar.confirm(body["agreement_id"])
        except KeyError as exc:
            return upl.error_frame("protocol-error", f"missing field {exc}")
        except ReservationError as exc:
            return upl.error_frame(exc.code, str(exc))
        return upl.ack({"agreement_id": body["agreement_id"], "state": "CONFIRMED"})

    def _handle_release(self, frame: Frame) -> Frame:
        body = frame.json()
        self.calendar.release(body.get("agreement_id", ""))
        return upl.ack({"agreement_id": body.get("agreement_id", ""), "state": "RELEASED"})

    # --- workspace file streams --------------------------------------------------

    def _handle_file_stream(self, frame: Frame, origin_dn: str, origin_role: str,
                            channel: Channel) -> Optional[Frame]:
        body = frame.json()
        job_id = body.get("job_id", "")
        record = self.records.get(job_id)
        # owner and submitter always may; any authenticated server presenting
        # the (unforgeable) job id may too: that is how a partner supervisor
        # stages files into a sub-job it forwarded here.
        if record is None or not (
            origin_dn in (record.owner_dn, record.submitter_dn) or origin_role == "server"
        ):
            return upl.error_frame(UNKNOWN_JOB, f"no such job: {job_id}")
        op = body.get("op") or frame.ext.get("op")
        rel = body.get("path", "")
        if not ajo.is_contained_path(rel):
            return upl.error_frame("not-found", f"path escapes workspace: {rel!r}")
        target = record.workspace / rel
        offset = int(body.get("offset", 0))
        part = target.with_name(target.name + ".part")
        if op == "stat":
            if target.is_file():
                return upl.ack({"path": rel, "size": target.stat().st_size, "exists": True})
            return upl.ack({"path": rel, "size": part.stat().st_size if part.is_file() else 0,
                            "exists": False})
        if op == "get":
            if not target.is_file():
                return upl.error_frame("not-found", f"no such file: {rel}")
            channel.send(Frame.of(MessageType.FILE_STREAM_FOLLOWS,
                                  {"path": rel, "size": target.stat().st_size, "offset": offset},
                                  ext={"op": "get"}))
            with open(target, "rb") as f:
                upl.send_stream(channel.wfile, f, offset=offset)
            return None
        if op == "put":
            # stream into a .part file and publish atomically: consumers
            # gate on the final path existing, so it must appear complete
            target.parent.mkdir(parents=True, exist_ok=True)
            channel.send(upl.ack({"ready": True, "path": rel, "offset": offset}))
            mode = "r+b" if part.exists() and offset else "wb"
            try:
                with open(part, mode) as sink:
                    if offset:
                        sink.truncate(offset)
                        sink.seek(offset)
                    _, digest = upl.receive_stream(channel.rfile, sink)
            except upl.DigestMismatch as exc:
                part.unlink(missing_ok=True)  # partial data discarded
                return upl.error_frame("digest-mismatch", str(exc))
            os.replace(part, target)
            return upl.ack({"path": rel, "digest": digest})
        return upl.error_frame("protocol-error", f"unknown file op {op!r}")

    # --- remote plumbing ---------------------------------------------------------

    def _gateway_channel(self) -> Channel:
        """Any reachable gateway works: the topology is fully connected."""
        last: Exception = upl.ConnectError("no gateways configured")
        for addr in self.config.gateways:
            host, _, port = addr.rpartition(":")
            try:
                return upl.connect(host, int(port), self.config.cert_file, self.config.key_file,
                                   self.config.anchors_dir, timeout=self.config.remote_timeout)
            except (upl.ConnectError, ValueError) as exc:
                last = exc
        raise last

    def _gw_request(self, frame: Frame) -> Frame:
        """Request/response through the federation, trying each gateway."""
        last_error: Optional[Frame] = None
        for addr in self.config.gateways:
            host, _, port = addr.rpartition(":")
            try:
                with upl.connect(host, int(port), self.config.cert_file, self.config.key_file,
                                 self.config.anchors_dir, timeout=self.config.remote_timeout) as ch:
                    reply = ch.request(frame)
            except (upl.ConnectError, upl.FrameError, OSError, ValueError):
                continue
            if reply.msg_type is MessageType.ERROR:
                code = reply.json().get("code")
                if code in ("unknown-vsite", "vsite-unavailable"):
                    last_error = reply
                    continue  # another gateway may still route there
            return reply
        if last_error is not None:
            return last_error
        raise upl.ConnectError("no gateway reachable")

    def _remote_put(self, vsite: str, job_id: str, rel_path: str, source: Path) -> None:
        frame = Frame.of(MessageType.FILE_STREAM_FOLLOWS,
                         {"job_id": job_id, "path": rel_path, "op": "put", "offset": 0},
                         ext={"vsite": vsite, "op": "put"})
        with self._gateway_channel() as ch:
            ch.send(frame)
            ready = ch.recv()
            if ready.msg_type is MessageType.ERROR:
                raise upl.StreamError(f"remote refused put: {ready.json()}")
            with open(source, "rb") as f:
                upl.send_stream(ch.wfile, f)
            final = ch.recv()
            if final.msg_type is MessageType.ERROR:
                raise upl.StreamError(f"remote put failed: {final.json()}")

    def _remote_get(self, vsite: str, job_id: str, rel_path: str, sink_path: Path) -> None:
        frame = Frame.of(MessageType.FILE_STREAM_FOLLOWS,
                         {"job_id": job_id, "path": rel_path, "op": "get", "offset": 0},
                         ext={"vsite": vsite, "op": "get"})
        with self._gateway_channel() as ch:
            ch.send(frame)
            meta = ch.recv()
            if meta.msg_type is MessageType.ERROR:
                raise upl.StreamError(f"remote refused get: {meta.json()}")
            sink_path.parent.mkdir(parents=True, exist_ok=True)
            with open(sink_path, "wb") as f:
                upl.receive_stream(ch.rfile, f)

    # --- engine -------------------------------------------------------------------

    def _start_engine(self, record: JobRecord) -> None:
        thread = threading.Thread(target=self._engine_loop, args=(record,),
                                  name=f"engine-{record.job_id[:8]}", daemon=True)
        self._engines[record.job_id] = thread
        thread.start()

    def _engine_alive(self, job_id: str) -> bool:
        t = self._engines.get(job_id)
        return t is not None and t.is_alive()

    def _engine_loop(self, record: JobRecord) -> None:
        try:
            self._forward_remote_subgroups(record)
            record.status.started = True
            while not self._stop.is_set():
                if record.aborted:
                    self._perform_abort(record)
                    return
                with record.lock:
                    self._advance_group(record, record.job.root, record.status, "")
                    prune = True
                    while prune:
                        prune = self._prune_all(record.job.root, record.status)
                    rollup(record.status)
                    terminal = record.status.state.terminal
                if terminal:
                    self._snapshot(record)
                    log.info("job %s finished: %s", record.job_id, record.status.state.value)
                    return
                time.sleep(self.config.poll_interval)
        except Exception:
            log.exception("engine for job %s crashed", record.job_id)

    def _prune_all(self, group: JobGroup, gstatus: StatusNode) -> bool:
        changed = prune_unrunnable(group, gstatus)
        for c in group.children:
            if isinstance(c, JobGroup) and c.control.kind != "repeat":
                if c.target_vsite is not None and c.target_vsite != self.config.vsite_name:
                    continue
                changed |= self._prune_all(c, gstatus.child(c.group_id))
        return changed

    def _await_inputs_ready(self, record: JobRecord, group: JobGroup) -> bool:
        return all((record.workspace / rel).exists() for rel in group.await_inputs)

    def _advance_group(self, record: JobRecord, group: JobGroup, gstatus: StatusNode, path: str,
                       guard_ids: frozenset = frozenset()) -> None:
        if not gstatus.started:
            return
        if group.await_inputs and not self._await_inputs_ready(record, group):
            return
        if group.control.kind == "repeat":
            self._advance_repeat(record, group, gstatus, path)
            return

        if not group.children:
            if not gstatus.state.terminal:
                gstatus.set_state(JobState.DONE)
            return

        # conditional guard: engine-dispatched, never part of the ready set;
        # its exit code is predicate data, so nonzero exits still count Done
        if group.control.kind == "conditional":
            guard_ids = guard_ids | {group.control.predicate.child_id}
            guard = gstatus.child(group.control.predicate.child_id)
            if guard.state is JobState.PENDING:
                self._dispatch_task(record, group.child(guard.node_id), guard,
                                    self._join(path, guard.node_id))

        for cid in sorted(ready_set(group, gstatus)):
            self._dispatch_child(record, group, gstatus, path, cid)

        for c in group.children:
            cid = child_id(c)
            cnode = gstatus.child(cid)
            cpath = self._join(path, cid)
            if isinstance(c, JobGroup):
                if c.target_vsite is not None and c.target_vsite != self.config.vsite_name:
                    if cnode.started and not cnode.state.terminal:
                        self._poll_remote(record, cpath, cnode)
                else:
                    self._advance_group(record, c, cnode, cpath)
            else:
                if c.kind is TaskKind.EXECUTE and not cnode.state.terminal:
                    self._poll_execute(record, c, cnode, cpath, exit_as_data=cid in guard_ids)

    @staticmethod
    def _join(path: str, cid: str) -> str:
        return f"{path}/{cid}" if path else cid

    def _dispatch_child(self, record: JobRecord, group: JobGroup, gstatus: StatusNode,
                        path: str, cid: str) -> None:
        child = group.child(cid)
        cnode = gstatus.child(cid)
        cpath = self._join(path, cid)
        if isinstance(child, JobGroup):
            # group state is always rolled up from its children; dispatch
            # only activates the body (or remote polling)
            if cnode.started:
                return
            record.dispatch_counter += 1
            cnode.dispatch_seq = record.dispatch_counter
            cnode.started = True
            self._snapshot(record)
        else:
            self._dispatch_task(record, child, cnode, cpath)

    # --- task execution -------------------------------------------------------------

    def _dispatch_task(self, record: JobRecord, task: TaskSpec, node: StatusNode, path: str) -> None:
        record.dispatch_counter += 1
        node.dispatch_seq = record.dispatch_counter
        node.set_state(JobState.READY)
        try:
            if task.kind is TaskKind.EXECUTE:
                self._submit_execute(record, task, node, path)
            elif task.kind is TaskKind.IMPORT:
                node.set_state(JobState.STAGED)
                self._run_import(record, task, node)
            elif task.kind is TaskKind.EXPORT:
                node.set_state(JobState.STAGED)
                self._run_export(record, task, node)
            else:
                node.set_state(JobState.STAGED)
                self._run_transfer(record, task, node)
        except Exception as exc:
            log.warning("task %s/%s failed to dispatch: %s", record.job_id, path, exc)
            if not node.state.terminal:
                node.set_state(JobState.FAILED, detail=str(exc))
        self._snapshot(record)

    def _script_rel_path(self, path: str) -> str:
        return ".scripts/" + path.replace("/", "__") + ".sh"

    def _submit_execute(self, record: JobRecord, task: TaskSpec, node: StatusNode, path: str) -> None:
        node.set_state(JobState.STAGED)
        script_rel = self._script_rel_path(path)
        script_path = record.workspace / script_rel
        script_path.parent.mkdir(parents=True, exist_ok=True)
        script_path.write_text(incarnate(task, self.idb, str(record.workspace), task_path=path))
        try:
            handle = self.tsi.submit(script_rel, str(record.workspace), task.resources.runtime_limit)
        except OSError as exc:
            # daemon may be restarting: stay STAGED, the poll loop retries
            # until the grace period runs out
            if self._tsi_grace_exceeded(record, path):
                node.set_state(JobState.FAILED, detail=f"tsi unreachable: {exc}")
            return
        except TsiError as exc:
            node.set_state(JobState.FAILED, detail=f"tsi refused submission: {exc}")
            return
        record.tsi_down_since.pop(path, None)
        record.tsi_handles[path] = handle
        node.set_state(JobState.SUBMITTED)

    def _poll_execute(self, record: JobRecord, task: TaskSpec, node: StatusNode, path: str,
                      exit_as_data: bool = False) -> None:
        if node.state in (JobState.READY, JobState.STAGED) and path not in record.tsi_handles:
            # crash between dispatch and submission: submit now (never Done before)
            self._submit_execute(record, task, node, path)
            self._snapshot(record)
            return
        if node.state not in (JobState.SUBMITTED, JobState.RUNNING):
            return
        handle = record.tsi_handles.get(path)
        if handle is None:
            return
        try:
            state, rc = self.tsi.status(handle)
        except (TsiError, OSError) as exc:
            if self._tsi_grace_exceeded(record, path):
                node.set_state(JobState.FAILED, detail=f"tsi unreachable: {exc}")
                self._snapshot(record)
            return
        record.tsi_down_since.pop(path, None)
        if state == "QUEUED":
            return
        if state == "RUNNING":
            if node.state is not JobState.RUNNING:
                node.set_state(JobState.RUNNING)
            return
        if state == "UNKNOWN":
            node.set_state(JobState.FAILED, detail="lost: batch daemon restarted while task ran")
            self._snapshot(record)
            return
        # terminal at the batch daemon
        self._collect_outputs(record, node, path, handle)
        node.exit_code = rc
        if state == "DONE":
            node.set_state(JobState.DONE)
        elif state == "CANCELLED":
            node.set_state(JobState.ABORTED, detail="cancelled at batch daemon")
        elif exit_as_data and rc is not None and rc != 124:
            node.set_state(JobState.DONE, detail=f"guard exit {rc}")
        else:
            detail = "runtime limit exceeded" if rc == 124 else f"exit code {rc}"
            node.set_state(JobState.FAILED, detail=detail)
        self._snapshot(record)

    def _tsi_grace_exceeded(self, record: JobRecord, path: str) -> bool:
        since = record.tsi_down_since.setdefault(path, time.monotonic())
        return time.monotonic() - since > self.config.tsi_grace

    def _collect_outputs(self, record: JobRecord, node: StatusNode, path: str, handle: str) -> None:
        outdir = record.workspace / ".out" / path
        outdir.mkdir(parents=True, exist_ok=True)
        for stream in ("stdout", "stderr"):
            try:
                with open(outdir / stream, "wb") as sink:
                    self.tsi.get_file(f"{handle}/{stream}", sink)
                ref = f".out/{path}/{stream}"
                if stream == "stdout":
                    node.stdout_ref = ref
                else:
                    node.stderr_ref = ref
            except (TsiError, OSError) as exc:
                log.warning("could not collect %s of %s: %s", stream, path, exc)

    @staticmethod
    def _copy_with_digest(src: Path, dst: Path) -> tuple[str, str]:
        h_in = hashlib.sha256()
        dst.parent.mkdir(parents=True, exist_ok=True)
        with open(src, "rb") as fin, open(dst, "wb") as fout:
            while True:
                chunk = fin.read(1 << 16)
                if not chunk:
                    break
                h_in.update(chunk)
                fout.write(chunk)
        h_out = hashlib.sha256()
        with open(dst, "rb") as f:
            while True:
                chunk = f.read(1 << 16)
                if not chunk:
                    break
                h_out.update(chunk)
        return h_in.hexdigest(), h_out.hexdigest()

    def _run_import(self, record: JobRecord, task: TaskSpec, node: StatusNode) -> None:
        src = Path(task.endpoint)
        if not src.is_file():
            node.set_state(JobState.FAILED, detail=f"import source missing: {src}")
            return
        sent, written = self._copy_with_digest(src, record.workspace / task.workspace_path)
        if sent != written:
            node.set_state(JobState.FAILED, detail="staging digest mismatch")
            return
        node.detail = f"sha256={written}"
        node.set_state(JobState.DONE)

    def _run_export(self, record: JobRecord, task: TaskSpec, node: StatusNode) -> None:
        src = record.workspace / task.workspace_path
        if not src.is_file():
            node.set_state(JobState.FAILED, detail=f"export source missing: {task.workspace_path}")
            return
        sent, written = self._copy_with_digest(src, Path(task.endpoint))
        if sent != written:
            node.set_state(JobState.FAILED, detail="staging digest mismatch")
            return
        node.detail = f"sha256={written}"
        node.set_state(JobState.DONE)

    def _subjob_on_vsite(self, record: JobRecord, vsite: str) -> Optional[dict]:
        hits = [info for info in record.remote.values() if info["vsite"] == vsite]
        if len(hits) == 1:
            return hits[0]
        return None

    def _run_transfer(self, record: JobRecord, task: TaskSpec, node: StatusNode) -> None:
        src_vsite, src_path = ajo.parse_vsite_path(task.source)
        dst_vsite, dst_path = ajo.parse_vsite_path(task.dest)
        local = self.config.vsite_name
        node.set_state(JobState.RUNNING)
        try:
            if src_vsite == local:
                source = record.workspace / src_path
                if not source.is_file():
                    node.set_state(JobState.FAILED, detail=f"transfer source missing: {src_path}")
                    return
            else:
                info = self._subjob_on_vsite(record, src_vsite)
                if info is None:
                    node.set_state(JobState.FAILED,
                                   detail=f"no unique sub-job on vsite {src_vsite!r} to read from")
                    return
                source = record.workspace / ".transfer-tmp" / src_path
                self._remote_get(src_vsite, info["job_id"], src_path, source)

            if dst_vsite == local:
                sent, written = self._copy_with_digest(source, record.workspace / dst_path)
                if sent != written:
                    node.set_state(JobState.FAILED, detail="transfer digest mismatch")
                    return
            else:
                info = self._subjob_on_vsite(record, dst_vsite)
                if info is None:
                    node.set_state(JobState.FAILED,
                                   detail=f"no unique sub-job on vsite {dst_vsite!r} to write to")
                    return
                self._remote_put(dst_vsite, info["job_id"], dst_path, source)
            node.set_state(JobState.DONE)
        except (upl.ConnectError, upl.FrameError, upl.StreamError, OSError) as exc:
            node.set_state(JobState.FAILED, detail=f"transfer failed: {exc}")

    # --- sub-jobs ----------------------------------------------------------------

    def _forward_remote_subgroups(self, record: JobRecord) -> None:
        """Submit every remote-targeted sub-group to its site, eagerly.

        The remote record (and workspace) must exist before any transfer
        pushes files into it; the sub-job itself holds until its declared
        await_inputs arrive.
        """
        for path, subgroup in ajo.iter_remote_groups(record.job.root):
            if subgroup.target_vsite == self.config.vsite_name:
                continue
            if path in record.remote:
                continue  # replayed journal already has the handle
            node = record.status.find(path)
            if node.state.terminal:
                continue
            nested = record.envelope.subenvelopes.get(path)
            if nested is None:
                node.set_state(JobState.FAILED, detail=f"no signed envelope for sub-job {path}")
                continue
            frame = Frame.of(MessageType.SUBMIT_JOB, None, ext={"vsite": subgroup.target_vsite})
            frame.payload = nested.to_wire()
            try:
                reply = self._gw_request(frame)
            except (upl.ConnectError, OSError) as exc:
                node.set_state(JobState.FAILED, detail=f"cannot reach {subgroup.target_vsite}: {exc}")
                continue
            if reply.msg_type is MessageType.ERROR:
                err = reply.json()
                node.set_state(JobState.FAILED,
                               detail=f"remote rejection: {err.get('code')}: {err.get('message')}")
                continue
            remote_job = reply.json()["job_id"]
            record.remote[path] = {"vsite": subgroup.target_vsite, "job_id": remote_job}
            log.info("forwarded sub-job %s of %s to %s as %s",
                     path, record.job_id, subgroup.target_vsite, remote_job)
        self._snapshot(record)

    def _poll_remote(self, record: JobRecord, path: str, node: StatusNode) -> None:
        now = time.monotonic()
        if now - record.last_remote_poll.get(path, 0.0) < self.config.poll_interval:
            return
        record.last_remote_poll[path] = now
        info = record.remote.get(path)
        if info is None:
            return
        frame = Frame.of(MessageType.QUERY_STATUS, {"job_id": info["job_id"]},
                         ext={"vsite": info["vsite"]})
        try:
            reply = self._gw_request(frame)
        except (upl.ConnectError, OSError):
            return  # federation hiccup: poll again next pass
        if reply.msg_type is MessageType.ERROR:
            return
        remote_tree = StatusNode.from_dict(reply.json()["status"])
        # graft the remote recursion under the sub-group node
        node.children = remote_tree.children
        remote_state = remote_tree.state
        if remote_state.order >= node.state.order:
            node.state = remote_state
            node.exit_code = remote_tree.exit_code
            if remote_tree.detail:
                node.detail = remote_tree.detail
        if remote_state.terminal:
            self._snapshot(record)

    def _abort_remote(self, record: JobRecord, path: str) -> None:
        info = record.remote.get(path)
        if info is None or info.get("aborted"):
            return
        info["aborted"] = True
        frame = Frame.of(MessageType.ABORT_JOB, {"job_id": info["job_id"]},
                         ext={"vsite": info["vsite"]})
        try:
            self._gw_request(frame)
        except (upl.ConnectError, OSError):
            pass  # best effort

    # --- repeat groups -------------------------------------------------------------

    def _advance_repeat(self, record: JobRecord, group: JobGroup, gstatus: StatusNode, path: str) -> None:
        bound = group.control.iteration_bound
        instances = gstatus.children
        pred = group.control.predicate
        if instances:
            idx = len(instances) - 1
            inst_group = instantiate_iteration(group, idx)
            inst_node = instances[-1]
            inst_node.started = True
            guards = frozenset({f"{pred.child_id}#{idx}"}) if pred else frozenset()
            self._advance_group(record, inst_group, inst_node,
                                self._join(path, inst_group.group_id), guard_ids=guards)
            changed = True
            while changed:
                changed = prune_unrunnable(inst_group, inst_node)
            state = rollup(inst_node)
            if not state.terminal:
                return
            if state is not JobState.DONE:
                return  # failed/aborted iteration ends the loop; rollup reports it
            if not self._repeat_continues(group, inst_node, idx, bound):
                return
        elif bound < 1:
            return
        idx = len(instances)
        if idx >= bound:
            return
        inst_group = instantiate_iteration(group, idx)
        inst_node = new_status_tree(inst_group)
        inst_node.started = True
        record.dispatch_counter += 1
        inst_node.dispatch_seq = record.dispatch_counter
        gstatus.children.append(inst_node)
        self._snapshot(record)

    def _repeat_continues(self, group: JobGroup, inst_node: StatusNode, idx: int, bound: int) -> bool:
        if idx + 1 >= bound:
            return False
        pred = group.control.predicate
        if pred is None:
            return True  # fixed count: run out the bound
        guard = inst_node.maybe_child(f"{pred.child_id}#{idx}")
        if guard is None or guard.exit_code is None:
            return False
        return pred.holds(guard.exit_code)

    # --- abort ----------------------------------------------------------------------

    def _perform_abort(self, record: JobRecord) -> None:
        with record.lock:
            for path, handle in record.tsi_handles.items():
                node = record.status.find(path)
                if not node.state.terminal:
                    try:
                        self.tsi.cancel(handle)
                    except (TsiError, OSError):
                        pass
            for path in list(record.remote):
                self._abort_remote(record, path)
            mark_subtree(record.status, JobState.ABORTED, "aborted by owner")
            if not record.status.state.terminal:
                record.status.state = JobState.ABORTED
            rollup(record.status)
        self._snapshot(record)
        log.info("job %s aborted", record.job_id)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gridlet-njs", description="Vsite job supervisor")
    parser.add_argument("--config", required=True, help="supervisor TOML config")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stdout)
    server = NjsServer(NjsConfig.load(args.config))
    server.start()
    print(f"njs {server.config.vsite_name} ready on {server.config.host}:{server.port}", flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
