"""In-process single- or multi-Usite stacks for engine integration tests.

Everything real processes would do, but inside one interpreter: actual
TLS listeners on loopback ports, a batch daemon per vsite, supervisors
registering to every gateway. Fast enough for per-test fixtures and easy
to debug.
"""

from __future__ import annotations

import time
from pathlib import Path

from gridlet import pki
from gridlet.client import ClientSession
from gridlet.gateway import Gateway, UsiteConfig
from gridlet.njs import NjsConfig, NjsServer
from gridlet.tsi import TsiDaemon

IDB_TEMPLATE = """\
[vsite]
name = "{vsite}"

[resources]
processors = {processors}
max_runtime = 3600
memory = 1073741824
software = [{software}]

[commands]
echo = "/bin/echo"
sh = "/bin/sh"
sleep = "/bin/sleep"
cat = "/bin/cat"
cp = "/bin/cp"
rm = "/bin/rm"
true = "/bin/true"
false = "/bin/false"

[admin]
cost_rate = {cost_rate}
"""

USER_DN = "CN=alice,O=Gridlet"


def write_idb(path: Path, vsite: str, processors: int = 4, software=(), cost_rate: float = 0.001) -> Path:
    quoted = ", ".join(f'"{s}"' for s in software)
    path.write_text(IDB_TEMPLATE.format(vsite=vsite, processors=processors,
                                        software=quoted, cost_rate=cost_rate))
    return path


def write_uudb(path: Path, entries=((USER_DN, "alice", "bio"),)) -> Path:
    lines = [f"{dn} -> {account}:{project}" for dn, account, project in entries]
    path.write_text("\n".join(lines) + "\n")
    return path


class InProcFederation:
    """Usites on loopback: one gateway each, vsites with NJS + TSI."""

    def __init__(self, root: Path, usites: dict, user_dn: str = USER_DN,
                 uudb_entries=None, tsi_concurrency: int = 2, poll_interval: float = 0.05):
        """usites: {"FZJ": ["v1"], "RZG": ["v2"], ...}"""
        self.root = root
        self.ca = pki.CertificateAuthority.create(root / "ca", "CN=Fed CA,O=Gridlet")
        self.anchors = root / "anchors"
        self.ca.export_anchor(self.anchors)
        self.user = self.ca.issue(user_dn, pki.ROLE_USER)
        self.keystore_dir = root / "keystore"
        pki.Keystore.save_identity(self.keystore_dir, "pw", self.user, "user")

        self.gateways: dict[str, Gateway] = {}
        self.njs: dict[str, NjsServer] = {}
        self.tsis: dict[str, TsiDaemon] = {}
        self._pem = {}

        for usite in usites:
            cert, key = self._server_pair(f"gw-{usite}")
            gw = Gateway(UsiteConfig(
                usite_name=usite, host="127.0.0.1", port=0,
                cert_file=cert, key_file=key, anchors_dir=self.anchors,
            ))
            gw.start()
            self.gateways[usite] = gw
        gateway_addrs = [f"127.0.0.1:{gw.port}" for gw in self.gateways.values()]

        uudb = write_uudb(root / "uudb", uudb_entries or ((user_dn, "alice", "bio"),))
        for usite, vsites in usites.items():
            for vsite in vsites:
                vdir = root / f"site-{vsite}"
                vdir.mkdir()
                tsi = TsiDaemon(vdir / "tsi-spool", concurrency=tsi_concurrency)
                tsi.start()
                self.tsis[vsite] = tsi
                cert, key = self._server_pair(f"njs-{vsite}")
                config = NjsConfig(
                    vsite_name=vsite, home_usite=usite, host="127.0.0.1", port=0,
                    cert_file=cert, key_file=key, anchors_dir=self.anchors,
                    idb_path=write_idb(vdir / "idb.toml", vsite),
                    uudb_path=uudb, spool=vdir / "spool",
                    tsi_host="127.0.0.1", tsi_port=tsi.port,
                    gateways=gateway_addrs,
                    poll_interval=poll_interval, heartbeat=0.5,
                )
                server = NjsServer(config)
                server.start()
                self.njs[vsite] = server
        self.wait_registered()

    def _server_pair(self, name: str) -> tuple[Path, Path]:
        ident = self.ca.issue(f"CN={name},O=Gridlet", pki.ROLE_SERVER)
        certs = self.root / "certs"
        certs.mkdir(exist_ok=True)
        cert, key = certs / f"{name}.pem", certs / f"{name}.key.pem"
        ident.write_pem_pair(cert, key)
        self._pem[name] = (cert, key)
        return cert, key

    def wait_registered(self, timeout: float = 10.0) -> None:
        want = set(self.njs)
        deadline = time.time() + timeout
        while time.time() < deadline:
            if all({r.vsite_name for r in gw.registrations()} >= want for gw in self.gateways.values()):
                return
            time.sleep(0.05)
        raise TimeoutError("vsites did not register at every gateway")

    def client(self, name: str = "client") -> ClientSession:
        home = self.root / name
        home.mkdir(exist_ok=True)
        lines = "\n".join(f'{u} = "127.0.0.1:{gw.port}"' for u, gw in self.gateways.items())
        (home / "usites.toml").write_text("[usites]\n" + lines + "\n")
        return ClientSession(home=home, keystore=self.keystore_dir, passphrase="pw",
                             anchors=self.anchors)

    def stop(self) -> None:
        for server in self.njs.values():
            server.stop()
        for gw in self.gateways.values():
            gw.stop()
        for tsi in self.tsis.values():
            tsi.stop()


def await_state(session: ClientSession, handle, states=("Done", "Failed", "Aborted", "NotRun"),
                timeout: float = 30.0) -> dict:
    deadline = time.time() + timeout
    tree = None
    while time.time() < deadline:
        tree = session.status(handle)
        if tree["state"] in states:
            return tree
        time.sleep(0.1)
    raise AssertionError(f"timeout; last tree: {tree}")


def node_at(tree: dict, path: str) -> dict:
    node = tree
    for part in path.split("/"):
        if not part:
            continue
        for c in node.get("children", ()):
            if c["id"] == part:
                node = c
                break
        else:
            raise KeyError(f"{path}: no child {part!r} under {node['id']}")
    return node
