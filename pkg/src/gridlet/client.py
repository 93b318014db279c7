"""Client session: single sign-on, submission, monitoring, brokering.

A session unlocks the keystore exactly once, resolves symbolic Usite
names through a static address book, signs compiled jobs, and keeps a
durable ledger of submitted handles so later invocations can query,
fetch, or abort them.

Address book (``$GRIDLET_HOME/usites.toml``)::

    [usites]
    FZJ = "127.0.0.1:9101"
    RZG = "127.0.0.1:9201"

Ledger: one JSON object per line in ``$GRIDLET_HOME/jobs.jsonl``.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import broker as broker_mod
from . import pki, upl, workflow
from .ajo import AbstractJob, ResourceRequest
from .idb import ResourceOffer
from .reservations import ReservationAgreement, negotiate
from .upl import Frame, MessageType


class TransportError(Exception):
    """Gateway unreachable or the exchange broke mid-flight."""


class RejectionError(Exception):
    """The federation answered with an error frame."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.reason = message


def default_home() -> Path:
    return Path(os.environ.get("GRIDLET_HOME", Path.home() / ".gridlet"))


@dataclass
class JobHandle:
    usite: str
    gateway: str  # "host:port"
    vsite: str
    job_id: str
    title: str = ""
    submitted_at: float = 0.0

    def to_dict(self) -> dict:
        return {
            "usite": self.usite, "gateway": self.gateway, "vsite": self.vsite,
            "job_id": self.job_id, "title": self.title, "submitted_at": self.submitted_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JobHandle":
        return cls(
            usite=d.get("usite", ""), gateway=d["gateway"], vsite=d["vsite"],
            job_id=d["job_id"], title=d.get("title", ""), submitted_at=d.get("submitted_at", 0.0),
        )


class ClientSession:
    def __init__(
        self,
        home: Optional[Path] = None,
        keystore: Optional[Path] = None,
        passphrase: Optional[str] = None,
        identity: Optional[str] = None,
        anchors: Optional[Path] = None,
    ):
        self.home = Path(home) if home else default_home()
        self.home.mkdir(parents=True, exist_ok=True)
        self.anchors_dir = Path(anchors) if anchors else self.home / "anchors"
        keystore_path = Path(keystore) if keystore else self.home / "keystore"
        if passphrase is None:
            passphrase = os.environ.get("GRIDLET_PASSPHRASE")
        if passphrase is None:
            import getpass

            passphrase = getpass.getpass("keystore passphrase: ")  # once per process
        self.keystore = pki.Keystore(keystore_path).unlock(passphrase)
        self.identity_dn = pki.canonical_dn(identity) if identity else self.keystore.get().dn
        self._tls_dir = self.home / ".tls"
        self._cert_file, self._key_file = self._extract_tls_pair()
        self._ledger_path = self.home / "jobs.jsonl"
        self._address_book = self._load_address_book()

    # --- plumbing ------------------------------------------------------------

    def _extract_tls_pair(self) -> tuple[Path, Path]:
        """The TLS layer wants PEM files; mint them from the keystore once."""
        ident = self.keystore.get(self.identity_dn)
        import hashlib

        tag = hashlib.sha256(ident.dn.encode()).hexdigest()[:12]
        d = self._tls_dir / tag
        d.mkdir(parents=True, exist_ok=True)
        cert, key = d / "cert.pem", d / "key.pem"
        ident.write_pem_pair(cert, key)
        return cert, key

    def _load_address_book(self) -> dict:
        path = self.home / "usites.toml"
        if not path.is_file():
            return {}
        with open(path, "rb") as f:
            return dict(tomllib.load(f).get("usites", {}))

    def gateway_addr(self, usite_or_addr: str) -> tuple[str, str]:
        """Resolve a symbolic Usite name (or host:port) to (name, addr)."""
        if usite_or_addr in self._address_book:
            return usite_or_addr, self._address_book[usite_or_addr]
        if ":" in usite_or_addr:
            return usite_or_addr, usite_or_addr
        raise TransportError(f"unknown usite {usite_or_addr!r} (not in address book)")

    def known_usites(self) -> dict:
        return dict(self._address_book)

    def _channel(self, gateway: str) -> upl.Channel:
        host, _, port = gateway.rpartition(":")
        try:
            return upl.connect(host, int(port), self._cert_file, self._key_file,
                               self.anchors_dir, timeout=15.0)
        except (upl.ConnectError, ValueError) as exc:
            raise TransportError(str(exc)) from exc

    def _request(self, gateway: str, frame: Frame) -> dict:
        with self._channel(gateway) as ch:
            try:
                reply = ch.request(frame)
            except (upl.FrameError, OSError) as exc:
                raise TransportError(f"exchange with {gateway} failed: {exc}") from exc
        if reply.msg_type is MessageType.ERROR:
            body = reply.json()
            raise RejectionError(body.get("code", "error"), body.get("message", ""))
        return reply.json()

    # --- ledger ------------------------------------------------------------

    def ledger(self) -> list[JobHandle]:
        if not self._ledger_path.is_file():
            return []
        handles = []
        for line in self._ledger_path.read_text().splitlines():
            try:
                handles.append(JobHandle.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError):
                continue
        return handles

    def _record_handle(self, handle: JobHandle) -> None:
        with open(self._ledger_path, "a") as f:
            f.write(json.dumps(handle.to_dict()) + "\n")

    def find_handle(self, job_id: str) -> JobHandle:
        for h in self.ledger():
            if h.job_id == job_id or h.job_id.startswith(job_id):
                return h
        raise RejectionError("unknown-job", f"job {job_id!r} not in the local ledger")

    # --- operations ------------------------------------------------------------

    def compile(self, source: Union[str, Path, dict]) -> AbstractJob:
        return workflow.compile_document(source)

    def submit(self, source: Union[str, Path, dict, AbstractJob], gateway: str, vsite: str,
               agreement_id: Optional[str] = None, title: str = "") -> JobHandle:
        job = source if isinstance(source, AbstractJob) else self.compile(source)
        if agreement_id:
            job = AbstractJob(root=job.root, project=job.project, agreement_id=agreement_id)
        env = pki.sign_job(job, self.keystore, self.identity_dn)
        usite, addr = self.gateway_addr(gateway)
        frame = Frame(msg_type=MessageType.SUBMIT_JOB, payload=env.to_wire(), ext={"vsite": vsite})
        body = self._request(addr, frame)
        handle = JobHandle(usite=usite, gateway=addr, vsite=vsite, job_id=body["job_id"],
                           title=title, submitted_at=time.time())
        self._record_handle(handle)
        return handle

    def status(self, handle: JobHandle) -> dict:
        body = self._request(handle.gateway, Frame.of(
            MessageType.QUERY_STATUS, {"job_id": handle.job_id}, ext={"vsite": handle.vsite}))
        return body["status"]

    def abort(self, handle: JobHandle) -> dict:
        return self._request(handle.gateway, Frame.of(
            MessageType.ABORT_JOB, {"job_id": handle.job_id}, ext={"vsite": handle.vsite}))

    def fetch(self, handle: JobHandle, task_path: str, stream: str = "stdout",
              dest: Optional[Path] = None, max_attempts: int = 3) -> Path:
        """Fetch a task's output; resumes from the received byte count if
        the connection dies mid-stream."""
        if dest is None:
            dest = Path(f"{handle.job_id[:8]}-{task_path.replace('/', '_')}.{stream}")
        dest.parent.mkdir(parents=True, exist_ok=True)
        offset = 0
        last_exc: Optional[Exception] = None
        for _ in range(max_attempts):
            frame = Frame.of(
                MessageType.FETCH_OUTPUT,
                {"job_id": handle.job_id, "task": task_path, "stream": stream, "offset": offset},
                ext={"vsite": handle.vsite},
            )
            try:
                with self._channel(handle.gateway) as ch:
                    ch.send(frame)
                    meta = ch.recv()
                    if meta.msg_type is MessageType.ERROR:
                        body = meta.json()
                        raise RejectionError(body.get("code", "error"), body.get("message", ""))
                    mode = "r+b" if offset and dest.exists() else "wb"
                    with open(dest, mode) as sink:
                        if offset:
                            sink.truncate(offset)
                            sink.seek(offset)
                        upl.receive_stream(ch.rfile, sink)
                return dest
            except (upl.FrameError, upl.StreamError, OSError, TransportError) as exc:
                last_exc = exc
                offset = dest.stat().st_size if dest.exists() else 0
        raise TransportError(f"fetch failed after {max_attempts} attempts: {last_exc}")

    def list_vsites(self, gateway: str) -> list[dict]:
        _, addr = self.gateway_addr(gateway)
        return self._request(addr, Frame.of(MessageType.LIST_VSITES, {}))["vsites"]

    def get_resources(self, gateway: str, vsite: str) -> dict:
        _, addr = self.gateway_addr(gateway)
        return self._request(addr, Frame.of(MessageType.GET_RESOURCES, {}, ext={"vsite": vsite}))

    def collect_offers(self, gateways: Optional[list] = None) -> list[ResourceOffer]:
        """Aggregate resource offers across the federation (deduped by
        vsite: the fully connected topology lists everything everywhere)."""
        targets = gateways if gateways else sorted(self._address_book)
        offers: dict[str, ResourceOffer] = {}
        last_exc: Optional[Exception] = None
        for gw in targets:
            try:
                _, addr = self.gateway_addr(gw)
                for reg in self._request(addr, Frame.of(MessageType.LIST_VSITES, {}))["vsites"]:
                    name = reg["vsite_name"]
                    if name in offers:
                        continue
                    body = self._request(addr, Frame.of(MessageType.GET_RESOURCES, {}, ext={"vsite": name}))
                    offers[name] = ResourceOffer.from_dict(body["offer"])
            except (TransportError, RejectionError) as exc:
                last_exc = exc
        if not offers and last_exc is not None:
            raise TransportError(f"no gateway reachable: {last_exc}")
        return [offers[k] for k in sorted(offers)]

    def broker(self, request: ResourceRequest, gateways: Optional[list] = None) -> list[broker_mod.Match]:
        return broker_mod.match(request, self.collect_offers(gateways))

    # --- reservations -------------------------------------------------------------

    class _UplSite:
        """Agreement-manager adapter speaking frames through any gateway."""

        def __init__(self, session: "ClientSession", vsite: str, gateways: list):
            self.session = session
            self.vsite = vsite
            self.gateways = gateways

        def _req(self, frame: Frame) -> dict:
            last: Optional[Exception] = None
            for gw in self.gateways:
                try:
                    _, addr = self.session.gateway_addr(gw)
                    return self.session._request(addr, frame)
                except TransportError as exc:
                    last = exc
                except RejectionError as exc:
                    if exc.code in ("unknown-vsite", "vsite-unavailable"):
                        last = exc
                        continue
                    raise
            raise TransportError(f"no route to agreement manager of {self.vsite}: {last}")

        def fetch_calendar(self):
            body = self._req(Frame.of(MessageType.GET_RESOURCES, {}, ext={"vsite": self.vsite}))
            return body["offer"]["processors"], body["reservations"]

        def hold(self, agreement_id, start, end, processors):
            from .reservations import ReservationError

            try:
                self._req(Frame.of(
                    MessageType.RESERVE_SLOTS,
                    {"agreement_id": agreement_id, "start": start, "end": end, "processors": processors},
                    ext={"vsite": self.vsite}))
            except RejectionError as exc:
                raise ReservationError(exc.code, exc.reason) from exc

        def confirm(self, agreement_id):
            from .reservations import ReservationError

            try:
                self._req(Frame.of(MessageType.CONFIRM_RESERVATION,
                                   {"agreement_id": agreement_id}, ext={"vsite": self.vsite}))
            except RejectionError as exc:
                raise ReservationError(exc.code, exc.reason) from exc

        def release(self, agreement_id):
            self._req(Frame.of(MessageType.RELEASE_RESERVATION,
                               {"agreement_id": agreement_id}, ext={"vsite": self.vsite}))

    def agreement_sites(self, vsites: list, gateways: Optional[list] = None) -> dict:
        targets = gateways if gateways else sorted(self._address_book)
        return {v: ClientSession._UplSite(self, v, targets) for v in vsites}

    def reserve(self, vsites: list, processors: Union[int, dict], duration: float,
                not_before: Optional[float] = None, deadline: Optional[float] = None,
                gateways: Optional[list] = None) -> ReservationAgreement:
        demand = processors if isinstance(processors, dict) else {v: processors for v in vsites}
        return negotiate(self.agreement_sites(vsites, gateways), demand, duration,
                         not_before=not_before, deadline=deadline)
