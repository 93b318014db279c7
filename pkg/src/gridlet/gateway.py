"""Usite gateway: authenticated entry point and frame router.

The gateway admits mutually-authenticated peers, keeps the registry of
Vsites (supervisors register and re-register over a heartbeat, including
supervisors from partner organizations), and relays routed frames to the
owning supervisor. Payload bytes pass through untouched: signatures
made by the client must still verify two hops later. The only thing a
gateway adds is routing metadata in the frame header extension: the
authenticated origin DN and role, and the Usite it passed through.

The gateway holds no job state at all: kill it, restart it, and every
job remains queryable the moment supervisors re-register.

Role policy: RegisterNjs needs a server certificate. Client-path
operations need a user certificate, or a server certificate whose DN is
a registered supervisor (that is how sub-jobs forwarded by a partner
site arrive); any other server certificate gets role-mismatch.
"""

from __future__ import annotations

import argparse
import fnmatch
import hashlib
import logging
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import upl
from .upl import Channel, Frame, MessageType, Session

log = logging.getLogger("gridlet.gateway")

ROUTED_TYPES = frozenset({
    MessageType.SUBMIT_JOB,
    MessageType.QUERY_STATUS,
    MessageType.FETCH_OUTPUT,
    MessageType.ABORT_JOB,
    MessageType.GET_RESOURCES,
    MessageType.RESERVE_SLOTS,
    MessageType.CONFIRM_RESERVATION,
    MessageType.RELEASE_RESERVATION,
    MessageType.FILE_STREAM_FOLLOWS,
})


@dataclass
class UsiteConfig:
    usite_name: str
    host: str
    port: int
    cert_file: Path
    key_file: Path
    anchors_dir: Path
    # "allow-all-valid" or a list of DN glob patterns applied to user certs
    admission: Union[str, list] = "allow-all-valid"
    njs_timeout: float = 15.0

    @classmethod
    def load(cls, path: str | Path) -> "UsiteConfig":
        path = Path(path)
        with open(path, "rb") as f:
            doc = tomllib.load(f)
        g = doc["gateway"]
        base = path.parent

        def resolve(p: str) -> Path:
            q = Path(p)
            return q if q.is_absolute() else base / q

        return cls(
            usite_name=g["usite"],
            host=g.get("host", "127.0.0.1"),
            port=int(g["port"]),
            cert_file=resolve(g["cert"]),
            key_file=resolve(g["key"]),
            anchors_dir=resolve(g["anchors"]),
            admission=g.get("admission", "allow-all-valid"),
            njs_timeout=float(g.get("njs_timeout", 15.0)),
        )


@dataclass
class VsiteRegistration:
    vsite_name: str
    endpoint: str  # "host:port"
    njs_dn: str
    home_usite: str
    registered_at: float = field(default_factory=time.time)

    def to_dict(self) -> dict:
        return {
            "vsite_name": self.vsite_name,
            "endpoint": self.endpoint,
            "njs_dn": self.njs_dn,
            "home_usite": self.home_usite,
        }


class Gateway:
    def __init__(self, config: UsiteConfig):
        self.config = config
        self._registry: dict[str, VsiteRegistration] = {}
        self._registry_lock = threading.Lock()
        self._server = upl.UplServer(
            config.host, config.port, config.cert_file, config.key_file,
            config.anchors_dir, handler=self._handle, admit=self._admit,
        )

    # --- lifecycle -------------------------------------------------------

    def start(self) -> None:
        self._server.start()
        log.info("gateway %s listening on %s:%s", self.config.usite_name, self.config.host, self.port)

    def stop(self) -> None:
        self._server.stop()

    @property
    def port(self) -> int:
        return self._server.port

    def registrations(self) -> list[VsiteRegistration]:
        with self._registry_lock:
            return sorted(self._registry.values(), key=lambda r: r.vsite_name)

    # --- admission ---------------------------------------------------------

    def _admit(self, session: Session) -> Optional[Frame]:
        if session.role not in ("user", "server"):
            return upl.error_frame("admission-denied", "certificate carries no recognized role")
        if session.role == "user" and not self._dn_admitted(session.dn):
            log.info("refused %s: admission policy", session.dn)
            return upl.error_frame("admission-denied", f"DN not admitted by policy: {session.dn}")
        return None

    def _dn_admitted(self, dn: str) -> bool:
        policy = self.config.admission
        if policy == "allow-all-valid":
            return True
        return any(fnmatch.fnmatchcase(dn, pat) for pat in policy)

    def _is_registered_njs(self, dn: str) -> bool:
        with self._registry_lock:
            return any(r.njs_dn == dn for r in self._registry.values())

    # --- frame handling ---------------------------------------------------

    def _handle(self, session: Session, frame: Frame, channel: Channel) -> Optional[Frame]:
        if frame.msg_type is MessageType.REGISTER_NJS:
            return self._register(session, frame)
        if frame.msg_type is MessageType.LIST_VSITES:
            return upl.ack({"usite": self.config.usite_name,
                            "vsites": [r.to_dict() for r in self.registrations()]})
        if frame.msg_type in ROUTED_TYPES:
            if session.role == "server" and not self._is_registered_njs(session.dn):
                return upl.error_frame(
                    "role-mismatch",
                    "server certificates may use client operations only as registered supervisors")
            return self._route(session, frame, channel)
        return upl.error_frame("protocol-error", f"gateway does not serve {frame.msg_type.name}")

    def _register(self, session: Session, frame: Frame) -> Frame:
        if session.role != "server":
            return upl.error_frame("role-mismatch", "registration requires a server certificate")
        try:
            body = frame.json()
            reg = VsiteRegistration(
                vsite_name=body["vsite_name"],
                endpoint=body["endpoint"],
                njs_dn=session.dn,  # the authenticated peer, not a claim
                home_usite=body.get("home_usite", ""),
            )
        except (upl.FrameError, KeyError) as exc:
            return upl.error_frame("protocol-error", f"bad registration: {exc}")
        with self._registry_lock:
            existing = self._registry.get(reg.vsite_name)
            if existing and existing.njs_dn != reg.njs_dn:
                log.info("refused registration of %s by %s (held by %s)",
                         reg.vsite_name, reg.njs_dn, existing.njs_dn)
                return upl.error_frame(
                    "name-collision",
                    f"vsite {reg.vsite_name!r} is registered by a different supervisor")
            self._registry[reg.vsite_name] = reg
        log.info("registered vsite %s -> %s (%s)", reg.vsite_name, reg.endpoint, reg.njs_dn)
        return upl.ack({"registered": reg.vsite_name})

    def _route(self, session: Session, frame: Frame, channel: Channel) -> Optional[Frame]:
        vsite = frame.ext.get("vsite")
        if not vsite:
            return upl.error_frame("protocol-error", "routed frame names no vsite")
        with self._registry_lock:
            reg = self._registry.get(vsite)
        if reg is None:
            return upl.error_frame("unknown-vsite", f"no supervisor registered for {vsite!r}")

        if frame.msg_type is MessageType.SUBMIT_JOB:
            log.info("relay SubmitJob for %s from %s payload sha256=%s",
                     vsite, session.dn, hashlib.sha256(frame.payload).hexdigest())

        host, _, port = reg.endpoint.rpartition(":")
        forwarded = Frame(
            msg_type=frame.msg_type,
            payload=frame.payload,  # byte-identical relay
            ext={**frame.ext, "origin_dn": session.dn, "origin_role": session.role,
                 "via_usite": self.config.usite_name},
        )
        try:
            njs = upl.connect(host, int(port), self.config.cert_file, self.config.key_file,
                              self.config.anchors_dir, timeout=self.config.njs_timeout)
        except (upl.ConnectError, ValueError) as exc:
            return upl.error_frame("vsite-unavailable", f"supervisor for {vsite!r} unreachable: {exc}")
        try:
            njs.send(forwarded)
            if frame.msg_type is MessageType.FILE_STREAM_FOLLOWS and frame.ext.get("op") == "put":
                ready = njs.recv()  # supervisor validates the target first
                channel.send(ready)
                if ready.msg_type is MessageType.ERROR:
                    return None
                upl.relay_stream(channel.rfile, njs.wfile)
            reply = njs.recv()
            channel.send(reply)
            if reply.msg_type is MessageType.FILE_STREAM_FOLLOWS:
                upl.relay_stream(njs.rfile, channel.wfile)
            return None
        except (upl.FrameError, upl.StreamError, OSError) as exc:
            try:
                channel.send(upl.error_frame("vsite-unavailable", f"relay to {vsite!r} failed: {exc}"))
            except OSError:
                pass
            return None
        finally:
            njs.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gridlet-gateway", description="Usite gateway")
    parser.add_argument("--config", required=True, help="gateway TOML config")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stdout)
    gw = Gateway(UsiteConfig.load(args.config))
    gw.start()
    print(f"gateway {gw.config.usite_name} ready on {gw.config.host}:{gw.port}", flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        gw.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
