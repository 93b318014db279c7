"""Multi-Usite test federation: real OS processes on loopback.

Spawns, per the topology, one gateway per Usite and one supervisor plus
one batch daemon per Vsite, all as separate interpreter processes with
real TLS between them, so restarts and kills exercise the same code
paths production would. Ports are deterministic (base port + index) for
reproducible runs.

Topology file (TOML)::

    [topology]
    base_port = 9300

    [[usite]]
    name = "FZJ"
    [[usite.vsite]]
    name = "v1"
    processors = 4
    tsi_concurrency = 2

Cross-registration defaults to the full matrix (every supervisor at
every gateway); a ``[topology.cross_registration]`` table mapping vsite
name to a list of Usites restricts it.

Scenario scripts drive a running federation, one step per line::

    SUBMIT j1 flow.json VIA FZJ VSITE v1
    AWAIT j1 TERMINAL 60
    ASSERT_STATE j1 / Done
    ASSERT_OUTPUT j1 say stdout EQUALS hello
    KILL gateway:FZJ
    RESTART njs:v1
    SLEEP 0.5

Reports carry one pass/fail entry per step and serialize to JUnit XML.
"""

from __future__ import annotations

import argparse
import shlex
import signal
import subprocess
import sys
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import pki
from .client import ClientSession, JobHandle, RejectionError, TransportError

DEFAULT_USER_DN = "CN=alice,O=Gridlet"

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

GATEWAY_TEMPLATE = """\
[gateway]
usite = "{usite}"
host = "127.0.0.1"
port = {port}
cert = "{cert}"
key = "{key}"
anchors = "{anchors}"
"""

NJS_TEMPLATE = """\
[njs]
vsite = "{vsite}"
usite = "{usite}"
host = "127.0.0.1"
port = {port}
cert = "{cert}"
key = "{key}"
anchors = "{anchors}"
idb = "{idb}"
uudb = "{uudb}"
spool = "{spool}"
tsi_port = {tsi_port}
gateways = [{gateways}]
poll_interval = {poll_interval}
heartbeat = {heartbeat}
"""


@dataclass
class VsiteSpec:
    name: str
    processors: int = 4
    tsi_concurrency: int = 2
    software: tuple = ()
    cost_rate: float = 0.001


@dataclass
class UsiteSpec:
    name: str
    vsites: list


@dataclass
class TopologySpec:
    usites: list
    base_port: int = 9300
    cross_registration: dict = field(default_factory=dict)  # vsite -> [usite names]
    users: tuple = ((DEFAULT_USER_DN, "alice", "bio"),)
    poll_interval: float = 0.1
    heartbeat: float = 0.5

    @classmethod
    def load(cls, path: str | Path) -> "TopologySpec":
        with open(path, "rb") as f:
            doc = tomllib.load(f)
        topo = doc.get("topology", {})
        usites = []
        for u in doc.get("usite", ()):
            vsites = [VsiteSpec(
                name=v["name"],
                processors=int(v.get("processors", 4)),
                tsi_concurrency=int(v.get("tsi_concurrency", 2)),
                software=tuple(v.get("software", ())),
                cost_rate=float(v.get("cost_rate", 0.001)),
            ) for v in u.get("vsite", ())]
            usites.append(UsiteSpec(name=u["name"], vsites=vsites))
        return cls(
            usites=usites,
            base_port=int(topo.get("base_port", 9300)),
            cross_registration={k: list(v) for k, v in topo.get("cross_registration", {}).items()},
        )

    def validate(self) -> None:
        names = [u.name for u in self.usites]
        if len(set(names)) != len(names):
            raise ValueError("duplicate usite names")
        vnames = [v.name for u in self.usites for v in u.vsites]
        if len(set(vnames)) != len(vnames):
            raise ValueError("duplicate vsite names")
        for vsite, usites in self.cross_registration.items():
            if vsite not in vnames:
                raise ValueError(f"cross_registration names unknown vsite {vsite!r}")
            unknown = set(usites) - set(names)
            if unknown:
                raise ValueError(f"cross_registration for {vsite!r} names unknown usites {sorted(unknown)}")


@dataclass
class ManagedProcess:
    name: str  # "gateway:FZJ" | "njs:v1" | "tsi:v1"
    argv: list
    log_path: Path
    proc: Optional[subprocess.Popen] = None
    paused: bool = False

    def start(self) -> None:
        log = open(self.log_path, "ab")
        self.proc = subprocess.Popen(self.argv, stdout=log, stderr=subprocess.STDOUT)
        self.paused = False

    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def kill(self) -> None:
        if self.alive():
            self.proc.kill()
            self.proc.wait(timeout=5)

    def terminate(self) -> None:
        if self.alive():
            self.proc.terminate()
            try:
                self.proc.wait(timeout=3)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait(timeout=5)

    def pause(self) -> None:
        if self.alive():
            self.proc.send_signal(signal.SIGSTOP)
            self.paused = True

    def resume(self) -> None:
        if self.alive():
            self.proc.send_signal(signal.SIGCONT)
            self.paused = False


class TestNet:
    """A running federation built from a TopologySpec."""

    __test__ = False  # not a pytest class, despite the name

    def __init__(self, spec: TopologySpec, root: str | Path):
        spec.validate()
        self.spec = spec
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.processes: dict[str, ManagedProcess] = {}
        self.gateway_ports: dict[str, int] = {}
        self.njs_ports: dict[str, int] = {}
        self.tsi_ports: dict[str, int] = {}
        self.vsite_dirs: dict[str, Path] = {}
        self._ca: Optional[pki.CertificateAuthority] = None
        self._assign_ports()

    def _assign_ports(self) -> None:
        port = self.spec.base_port
        for u in self.spec.usites:
            self.gateway_ports[u.name] = port
            port += 1
        for u in self.spec.usites:
            for v in u.vsites:
                self.njs_ports[v.name] = port
                self.tsi_ports[v.name] = port + 1
                port += 2

    # --- materialize configs -----------------------------------------------------

    def _build_world(self) -> None:
        self._ca = pki.CertificateAuthority.create(self.root / "ca", "CN=Testnet CA,O=Gridlet")
        anchors = self.root / "anchors"
        self._ca.export_anchor(anchors)
        certs = self.root / "certs"
        certs.mkdir(exist_ok=True)

        def server_pair(name: str) -> tuple[Path, Path]:
            ident = self._ca.issue(f"CN={name},O=Gridlet", pki.ROLE_SERVER)
            cert, key = certs / f"{name}.pem", certs / f"{name}.key.pem"
            ident.write_pem_pair(cert, key)
            return cert, key

        keystore = self.root / "keystore"
        for dn, _, _ in self.spec.users:
            ident = self._ca.issue(dn, pki.ROLE_USER)
            pki.Keystore.save_identity(keystore, "pw", ident, ident.dn.split(",")[0][3:])

        uudb = self.root / "uudb"
        uudb.write_text("".join(f"{dn} -> {account}:{project}\n"
                                for dn, account, project in self.spec.users))

        for u in self.spec.usites:
            cert, key = server_pair(f"gw-{u.name}")
            cfg = self.root / f"gateway-{u.name}.toml"
            cfg.write_text(GATEWAY_TEMPLATE.format(
                usite=u.name, port=self.gateway_ports[u.name],
                cert=cert, key=key, anchors=anchors))
            self.processes[f"gateway:{u.name}"] = ManagedProcess(
                name=f"gateway:{u.name}",
                argv=[sys.executable, "-m", "gridlet.gateway", "--config", str(cfg)],
                log_path=self.root / f"gateway-{u.name}.log",
            )

        for u in self.spec.usites:
            for v in u.vsites:
                vdir = self.root / f"site-{v.name}"
                vdir.mkdir(exist_ok=True)
                self.vsite_dirs[v.name] = vdir
                quoted = ", ".join(f'"{s}"' for s in v.software)
                (vdir / "idb.toml").write_text(IDB_TEMPLATE.format(
                    vsite=v.name, processors=v.processors, software=quoted,
                    cost_rate=v.cost_rate))
                cert, key = server_pair(f"njs-{v.name}")
                registered_usites = self.spec.cross_registration.get(
                    v.name, [x.name for x in self.spec.usites])
                gateways = ", ".join(f'"127.0.0.1:{self.gateway_ports[name]}"'
                                     for name in registered_usites)
                njs_cfg = vdir / "njs.toml"
                njs_cfg.write_text(NJS_TEMPLATE.format(
                    vsite=v.name, usite=u.name, port=self.njs_ports[v.name],
                    cert=cert, key=key, anchors=anchors,
                    idb=vdir / "idb.toml", uudb=uudb, spool=vdir / "spool",
                    tsi_port=self.tsi_ports[v.name], gateways=gateways,
                    poll_interval=self.spec.poll_interval, heartbeat=self.spec.heartbeat))
                self.processes[f"njs:{v.name}"] = ManagedProcess(
                    name=f"njs:{v.name}",
                    argv=[sys.executable, "-m", "gridlet.njs", "--config", str(njs_cfg)],
                    log_path=vdir / "njs.log",
                )
                self.processes[f"tsi:{v.name}"] = ManagedProcess(
                    name=f"tsi:{v.name}",
                    argv=[sys.executable, "-m", "gridlet.tsi",
                          "--spool", str(vdir / "tsi-spool"),
                          "--port", str(self.tsi_ports[v.name]),
                          "--concurrency", str(v.tsi_concurrency)],
                    log_path=vdir / "tsi.log",
                )

    # --- lifecycle --------------------------------------------------------------

    def bring_up(self, timeout: float = 40.0) -> "TestNet":
        self._build_world()
        for name, mp in self.processes.items():
            if name.startswith("tsi:") or name.startswith("gateway:"):
                mp.start()
        time.sleep(0.3)
        for name, mp in self.processes.items():
            if name.startswith("njs:"):
                mp.start()
        self._await_healthy(timeout)
        return self

    def _expected_matrix(self) -> dict:
        expected: dict[str, set] = {u.name: set() for u in self.spec.usites}
        for u in self.spec.usites:
            for v in u.vsites:
                for target in self.spec.cross_registration.get(v.name, [x.name for x in self.spec.usites]):
                    expected[target].add(v.name)
        return expected

    def _await_healthy(self, timeout: float) -> None:
        session = self.client("healthcheck")
        expected = self._expected_matrix()
        deadline = time.time() + timeout
        last: dict = {}
        while time.time() < deadline:
            ok = True
            for usite, want in expected.items():
                try:
                    have = {v["vsite_name"] for v in session.list_vsites(usite)}
                except (TransportError, RejectionError):
                    have = set()
                last[usite] = have
                if not want <= have:
                    ok = False
            if ok:
                return
            dead = [n for n, p in self.processes.items() if p.proc is not None and not p.alive()]
            if dead:
                raise RuntimeError(f"processes died during bring-up: {dead}; logs: {self._log_tails(dead)}")
            time.sleep(0.2)
        raise RuntimeError(f"federation not healthy after {timeout}s; registry state {last}; "
                           f"logs: {self._log_tails(list(self.processes))}")

    def _log_tails(self, names: list, lines: int = 12) -> str:
        bits = []
        for name in names:
            mp = self.processes.get(name)
            if mp and mp.log_path.exists():
                tail = mp.log_path.read_text().splitlines()[-lines:]
                bits.append(f"--- {name} ---\n" + "\n".join(tail))
        return "\n".join(bits)

    def tear_down(self) -> None:
        for mp in self.processes.values():
            if mp.paused:
                mp.resume()
        for name, mp in self.processes.items():
            if name.startswith("njs:") or name.startswith("gateway:"):
                mp.terminate()
        for name, mp in self.processes.items():
            if name.startswith("tsi:"):
                mp.terminate()

    # --- faults -------------------------------------------------------------------

    def inject_fault(self, target: str, kind: str) -> None:
        mp = self.processes[target]
        if kind == "kill":
            mp.kill()
        elif kind == "pause":
            mp.pause()
        elif kind == "resume":
            mp.resume()
        else:
            raise ValueError(f"unknown fault kind {kind!r}")

    def restart(self, target: str) -> None:
        mp = self.processes[target]
        mp.kill()
        mp.start()

    # --- accessors -------------------------------------------------------------------

    def client(self, name: str = "client") -> ClientSession:
        home = self.root / f"home-{name}"
        home.mkdir(exist_ok=True)
        lines = "\n".join(f'{u} = "127.0.0.1:{p}"' for u, p in self.gateway_ports.items())
        (home / "usites.toml").write_text("[usites]\n" + lines + "\n")
        return ClientSession(home=home, keystore=self.root / "keystore", passphrase="pw",
                             anchors=self.root / "anchors")

    def tsi_submissions(self, vsite: str) -> list[tuple[str, str]]:
        """(tsi_job_id, script_path) pairs from the daemon's submit log."""
        log = self.vsite_dirs[vsite] / "tsi-spool" / "submissions.log"
        if not log.exists():
            return []
        out = []
        for line in log.read_text().splitlines():
            parts = line.split()
            if len(parts) >= 3:
                out.append((parts[1], parts[2]))
        return out

    def envelope_hashes(self, component: str) -> list[str]:
        """sha256 values logged at a gateway (relay) or supervisor (accept)."""
        mp = self.processes[component]
        hashes = []
        if mp.log_path.exists():
            for line in mp.log_path.read_text().splitlines():
                if "sha256=" in line:
                    hashes.append(line.rsplit("sha256=", 1)[1].strip())
        return hashes


# --- scenario DSL -------------------------------------------------------------------

@dataclass
class StepResult:
    line_no: int
    text: str
    ok: bool
    seconds: float
    message: str = ""


@dataclass
class ScenarioReport:
    steps: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.ok for s in self.steps)

    def to_junit_xml(self, path: str | Path, suite_name: str = "scenario") -> Path:
        suite = ET.Element("testsuite", name=suite_name,
                           tests=str(len(self.steps)),
                           failures=str(sum(1 for s in self.steps if not s.ok)))
        for s in self.steps:
            case = ET.SubElement(suite, "testcase",
                                 name=f"line {s.line_no}: {s.text}", time=f"{s.seconds:.3f}")
            if not s.ok:
                ET.SubElement(case, "failure", message=s.message)
        tree = ET.ElementTree(suite)
        ET.indent(tree)
        path = Path(path)
        tree.write(path, encoding="unicode", xml_declaration=True)
        return path


TERMINAL_STATES = {"Done", "Failed", "Aborted", "NotRun"}


class ScenarioRunner:
    def __init__(self, net: TestNet, session: Optional[ClientSession] = None,
                 base_dir: Optional[Path] = None):
        self.net = net
        self.session = session or net.client("scenario")
        self.base_dir = base_dir or net.root
        self.handles: dict[str, JobHandle] = {}

    def run(self, script: Union[str, Path]) -> ScenarioReport:
        if isinstance(script, Path) or (isinstance(script, str) and "\n" not in script
                                        and Path(script).is_file()):
            base = Path(script).parent
            text = Path(script).read_text()
        else:
            base = self.base_dir
            text = str(script)
        report = ScenarioReport()
        for line_no, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            started = time.time()
            try:
                self._step(shlex.split(line), base)
                report.steps.append(StepResult(line_no, line, True, time.time() - started))
            except Exception as exc:
                report.steps.append(StepResult(line_no, line, False, time.time() - started,
                                               message=f"{type(exc).__name__}: {exc}"))
        return report

    def _handle(self, alias: str) -> JobHandle:
        if alias not in self.handles:
            raise KeyError(f"no job submitted under alias {alias!r}")
        return self.handles[alias]

    def _node(self, tree: dict, path: str) -> dict:
        node = tree
        for part in path.split("/"):
            if not part or part == ".":
                continue
            for c in node.get("children", ()):
                if c["id"] == part:
                    node = c
                    break
            else:
                raise AssertionError(f"no node {path!r} in status tree")
        return node

    def _step(self, words: list, base: Path) -> None:
        op = words[0].upper()
        if op == "SUBMIT":
            # SUBMIT <alias> <workflow-file> VIA <usite> VSITE <vsite>
            alias, wf_file = words[1], words[2]
            usite = words[words.index("VIA") + 1]
            vsite = words[words.index("VSITE") + 1]
            wf_path = Path(wf_file) if Path(wf_file).is_absolute() else base / wf_file
            self.handles[alias] = self.session.submit(wf_path, gateway=usite, vsite=vsite,
                                                      title=alias)
        elif op == "AWAIT":
            # AWAIT <alias> TERMINAL <sec> | AWAIT <alias> STATE <state> <sec>
            alias = words[1]
            if words[2].upper() == "TERMINAL":
                states, timeout = TERMINAL_STATES, float(words[3])
            else:
                states, timeout = {words[3]}, float(words[4])
            deadline = time.time() + timeout
            handle = self._handle(alias)
            tree = None
            while time.time() < deadline:
                tree = self.session.status(handle)
                if tree["state"] in states:
                    return
                time.sleep(0.15)
            raise AssertionError(f"timeout: {alias} is {tree['state'] if tree else '?'}, wanted {states}")
        elif op == "ASSERT_STATE":
            # ASSERT_STATE <alias> <node-path|/> <state>
            alias, node_path, want = words[1], words[2], words[3]
            tree = self.session.status(self._handle(alias))
            node = self._node(tree, node_path)
            if node["state"] != want:
                raise AssertionError(f"{alias}:{node_path} is {node['state']}, wanted {want}")
        elif op == "ASSERT_OUTPUT":
            # ASSERT_OUTPUT <alias> <task-path> <stream> EQUALS <text...>
            alias, task_path, stream = words[1], words[2], words[3]
            want = " ".join(words[words.index("EQUALS") + 1:])
            import tempfile

            with tempfile.TemporaryDirectory() as tmp:
                out = self.session.fetch(self._handle(alias), task_path, stream=stream,
                                         dest=Path(tmp) / "out")
                got = out.read_text().strip()
            if got != want:
                raise AssertionError(f"{alias}:{task_path} {stream} is {got!r}, wanted {want!r}")
        elif op == "KILL":
            self.net.inject_fault(words[1], "kill")
        elif op == "PAUSE":
            self.net.inject_fault(words[1], "pause")
        elif op == "RESUME":
            self.net.inject_fault(words[1], "resume")
        elif op == "RESTART":
            self.net.restart(words[1])
        elif op == "SLEEP":
            time.sleep(float(words[1]))
        else:
            raise ValueError(f"unknown scenario step {op!r}")


# --- CLI ---------------------------------------------------------------------------

def _cmd_run(args) -> int:
    spec = TopologySpec.load(args.topology)
    net = TestNet(spec, args.root)
    try:
        net.bring_up()
        runner = ScenarioRunner(net)
        report = runner.run(Path(args.scenario))
        if args.report:
            report.to_junit_xml(args.report)
        for s in report.steps:
            print(f"{'PASS' if s.ok else 'FAIL'}  {s.seconds:7.2f}s  line {s.line_no}: {s.text}"
                  + (f"\n      {s.message}" if not s.ok else ""))
        return 0 if report.ok else 1
    finally:
        net.tear_down()


def _cmd_demo_bridge(args) -> int:
    """One-Usite federation plus a client bridge; prints the URL when ready."""
    from .bridge import BridgeServer

    spec = TopologySpec(usites=[UsiteSpec(name="DEMO", vsites=[VsiteSpec(name="v1")])],
                        base_port=args.base_port)
    net = TestNet(spec, args.root)
    try:
        net.bring_up()
        session = net.client("bridge")
        server = BridgeServer(session, port=args.port,
                              ui_dir=Path(args.ui) if args.ui else None)
        server.start()
        print(f"BRIDGE READY http://127.0.0.1:{server.port}/ gateway=DEMO vsite=v1", flush=True)
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        return 0
    finally:
        net.tear_down()


def _exit_on_sigterm(signum, frame):
    raise SystemExit(143)  # unwind through finally blocks so children are reaped


def main(argv=None) -> int:
    signal.signal(signal.SIGTERM, _exit_on_sigterm)
    parser = argparse.ArgumentParser(prog="gridlet-harness",
                                     description="multi-Usite federation test harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="bring up a federation and run a scenario script")
    p.add_argument("--topology", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--root", default="testnet")
    p.add_argument("--report", help="write a JUnit XML report here")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("demo-bridge", help="single-Usite federation with an HTTP bridge")
    p.add_argument("--root", default="demonet")
    p.add_argument("--base-port", type=int, default=9400)
    p.add_argument("--port", type=int, default=0, help="bridge port (0 = ephemeral)")
    p.add_argument("--ui", help="serve this directory at /ui/")
    p.set_defaults(func=_cmd_demo_bridge)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
