"""Acceptance criteria, one test per criterion, each printing PASS/FAIL.

Run with ``pytest tests/test_acceptance.py -s`` to watch the lines appear;
the suite is also part of the default pytest run. The federation criteria
spawn a real 3-Usite process testnet on loopback (base port 9600).
"""

import contextlib
import hashlib
import io
import json
import os
import random
import time

import pytest

from gridlet import pki, upl
from gridlet.ajo import validate
from gridlet.broker import match
from gridlet.harness import TestNet, TopologySpec, UsiteSpec, VsiteSpec
from gridlet.reservations import (
    CONFIRMED,
    FAILED,
    LocalAgreementSite,
    ReservationError,
    SlotCalendar,
    earliest_common_window,
    negotiate,
    release,
)
from gridlet.status import JobState, new_status_tree, ready_set, rollup
from gridlet.upl import Frame, MessageType

from fedhelpers import InProcFederation
from oracles import (
    dag_group,
    oracle_ready,
    oracle_rollup,
    random_dag,
    random_digraph,
    is_topological,
    topo_order_exists,
)
from test_broker import oracle_match, random_offer, random_request
from test_reservations import VirtualClock, oracle_earliest

pytestmark = pytest.mark.acceptance


@contextlib.contextmanager
def criterion(name: str):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE FAIL [{name}] after {time.monotonic() - started:.1f}s", flush=True)
        raise
    print(f"ACCEPTANCE PASS [{name}] in {time.monotonic() - started:.1f}s", flush=True)


# --- criterion: workflow-engine oracle suite -----------------------------------------

def test_workflow_engine_oracle_suite():
    with criterion("workflow-engine oracles: 500 DAGs vs brute force, <= 2 min"):
        started = time.monotonic()
        rng = random.Random(20260809)
        for trial in range(500):
            # validate agrees with exhaustive topological-order search
            nodes, edges = random_digraph(rng)
            report = validate(dag_group("g", nodes, edges))
            has_cycle = any("cycle" in v.message for v in report.violations)
            assert has_cycle == (not topo_order_exists(nodes, edges))

            # ready_set at every prefix matches the definition, dispatch
            # order stays topological
            nodes, edges = random_dag(rng, n_nodes=rng.randint(1, 8))
            group = dag_group("g", nodes, edges)
            tree = new_status_tree(group)
            states = {n: "Pending" for n in nodes}
            dispatch_order = []
            while True:
                got = ready_set(group, tree)
                assert got == oracle_ready(nodes, edges, states)
                if not got:
                    break
                pick = rng.choice(sorted(got))
                dispatch_order.append(pick)
                states[pick] = "Done" if rng.random() < 0.85 else "Failed"
                tree.child(pick).set_state(JobState(states[pick]))
            executed_edges = [(a, b) for a, b in edges if a in dispatch_order and b in dispatch_order]
            assert is_topological(dispatch_order, executed_edges)

            # rollup equals the independent postorder oracle
            shape = _random_status_shape(rng, 0)
            if shape[0] == "group":
                node = _shape_to_status(shape)
                assert rollup(node).value == oracle_rollup(shape)
                assert rollup(node).value == oracle_rollup(shape)  # idempotent
        assert time.monotonic() - started < 120.0


def _random_status_shape(rng, depth):
    if depth > 3 or rng.random() < 0.4:
        return ("task", rng.choice([s.value for s in JobState]))
    return ("group", "Pending", [_random_status_shape(rng, depth + 1) for _ in range(rng.randint(1, 4))])


def _shape_to_status(shape, counter=[0]):
    from gridlet.status import StatusNode

    counter[0] += 1
    if shape[0] == "task":
        return StatusNode(node_id=f"t{counter[0]}", kind="execute", state=JobState(shape[1]))
    node = StatusNode(node_id=f"g{counter[0]}", kind="group")
    node.children = [_shape_to_status(c) for c in shape[2]]
    return node


# --- criteria: end-to-end federation + fault tolerance --------------------------------

DIAMOND_WORKFLOW = {
    "workflow_version": 1,
    "name": "diamond",
    "vsite": "v1",
    "tasks": [
        {"id": "prep", "kind": "execute", "command": "sh",
         "args": ["-c", "seq 1 5000 > data.txt"], "produces": ["data.txt"]},
        {"id": "local", "kind": "execute", "command": "cp", "args": ["data.txt", "local.txt"]},
        {"id": "use", "kind": "execute", "vsite": "v2", "command": "cat", "args": ["data.txt"],
         "consumes": [{"task": "prep", "path": "data.txt"}]},
        {"id": "final", "kind": "execute", "command": "echo", "args": ["assembled"]},
    ],
    "dependencies": [["prep", "local"], ["local", "final"], ["use", "final"]],
}


@pytest.fixture(scope="module")
def testnet(tmp_path_factory):
    spec = TopologySpec(
        usites=[
            UsiteSpec(name="FZJ", vsites=[VsiteSpec(name="v1")]),
            UsiteSpec(name="RZG", vsites=[VsiteSpec(name="v2")]),
            UsiteSpec(name="CINECA", vsites=[VsiteSpec(name="v3")]),
        ],
        base_port=9600,
    )
    net = TestNet(spec, tmp_path_factory.mktemp("acceptance-net"))
    net.bring_up()
    yield net
    net.tear_down()


def _await(session, handle, timeout):
    deadline = time.time() + timeout
    tree = None
    while time.time() < deadline:
        tree = session.status(handle)
        if tree["state"] in ("Done", "Failed", "Aborted", "NotRun"):
            return tree
        time.sleep(0.15)
    raise AssertionError(f"not terminal after {timeout}s: {tree}")


def _tree_index(tree):
    out = {}

    def walk(node, path):
        out[path] = node
        for c in node.get("children", ()):
            walk(c, f"{path}/{c['id']}" if path else c["id"])

    walk(tree, "")
    return out


def test_end_to_end_federation(testnet, tmp_path):
    with criterion("end-to-end federation: diamond + transfer + remote sub-job <= 60 s"):
        session = testnet.client("acceptance")
        started = time.monotonic()
        handle = session.submit(DIAMOND_WORKFLOW, gateway="FZJ", vsite="v1")
        tree = _await(session, handle, timeout=60)
        elapsed = time.monotonic() - started
        assert tree["state"] == "Done", tree
        assert elapsed <= 60.0

        nodes = _tree_index(tree)
        xfer = [p for p in nodes if p.startswith("xfer-")]
        assert len(xfer) == 1 and nodes[xfer[0]]["state"] == "Done"
        assert nodes["at-v2/use"]["state"] == "Done"

        # dispatch order of the diamond is a topological order
        top = {p: n for p, n in nodes.items() if p and "/" not in p and n.get("dispatch_seq") is not None}
        order = sorted(top, key=lambda p: top[p]["dispatch_seq"])
        edges = [("prep", "local"), ("prep", xfer[0]), (xfer[0], "at-v2"),
                 ("local", "final"), ("at-v2", "final")]
        assert is_topological(order, edges)

        # transferred file byte-identical at both sites
        v1_jobs = testnet.vsite_dirs["v1"] / "spool" / "jobs"
        src = v1_jobs / handle.job_id / "workspace" / "data.txt"
        v2_jobs = testnet.vsite_dirs["v2"] / "spool" / "jobs"
        staged = list(v2_jobs.glob("*/workspace/data.txt"))
        assert len(staged) == 1
        assert hashlib.sha256(src.read_bytes()).hexdigest() == \
            hashlib.sha256(staged[0].read_bytes()).hexdigest()

        # the remote task saw exactly those bytes
        out = session.fetch(handle, "at-v2/use", dest=tmp_path / "use.out")
        assert out.read_bytes() == src.read_bytes()

        # original user DN is the verified owner at every site
        for jobs_dir in (v1_jobs / handle.job_id, staged[0].parent.parent):
            last = [json.loads(l) for l in (jobs_dir / "journal.jsonl").read_text().splitlines()][-1]
            assert last["record"]["owner_dn"] == "CN=alice,O=Gridlet"

        # envelope hash audit: every envelope a supervisor accepted was
        # relayed byte-identically by some gateway (parent and sub-job alike)
        relayed = set()
        for usite in ("FZJ", "RZG", "CINECA"):
            relayed.update(testnet.envelope_hashes(f"gateway:{usite}"))
        accepted = set(testnet.envelope_hashes("njs:v1")) | set(testnet.envelope_hashes("njs:v2"))
        assert accepted and accepted <= relayed


def test_fault_tolerance(testnet, tmp_path):
    with criterion("fault tolerance: gateway loss survivable, restart re-executes nothing"):
        session = testnet.client("faults")

        # one of three gateways dies; submission and status go via survivors
        testnet.inject_fault("gateway:FZJ", "kill")
        wf = {
            "workflow_version": 1, "name": "survivor", "vsite": "v1",
            "tasks": [{"id": "say", "kind": "execute", "command": "echo", "args": ["alive"]}],
        }
        handle = session.submit(wf, gateway="RZG", vsite="v1")
        tree = _await(session, handle, timeout=30)
        assert tree["state"] == "Done"
        from dataclasses import replace

        via_cineca = replace(handle, gateway=f"127.0.0.1:{testnet.gateway_ports['CINECA']}")
        assert session.status(via_cineca)["state"] == "Done"
        testnet.restart("gateway:FZJ")

        # supervisor restart mid-workflow: zero already-Done re-executions
        before = len(testnet.tsi_submissions("v3"))
        chain = {
            "workflow_version": 1, "name": "chain", "vsite": "v3",
            "tasks": [
                {"id": "first", "kind": "execute", "command": "echo", "args": ["one"]},
                {"id": "gap", "kind": "execute", "command": "sleep", "args": ["3"]},
                {"id": "second", "kind": "execute", "command": "echo", "args": ["two"]},
            ],
            "dependencies": [["first", "gap"], ["gap", "second"]],
        }
        handle2 = session.submit(chain, gateway="CINECA", vsite="v3")
        deadline = time.time() + 20
        while time.time() < deadline:
            t = session.status(handle2)
            by_id = {c["id"]: c for c in t["children"]}
            if by_id["first"]["state"] == "Done" and by_id["gap"]["state"] in ("Submitted", "Running"):
                break
            time.sleep(0.1)
        testnet.restart("njs:v3")
        deadline = time.time() + 45
        tree2 = None
        while time.time() < deadline:
            try:
                tree2 = session.status(handle2)
                if tree2["state"] in ("Done", "Failed", "Aborted"):
                    break
            except Exception:
                pass
            time.sleep(0.25)
        assert tree2 is not None and tree2["state"] == "Done", tree2
        scripts = [s for _, s in testnet.tsi_submissions("v3")[before:]]
        assert len(scripts) == len(set(scripts)) == 3  # one submission per task


# --- criterion: security suite ---------------------------------------------------------

@pytest.fixture(scope="module")
def security_fed(tmp_path_factory):
    fed = InProcFederation(tmp_path_factory.mktemp("sec-fed"), {"SEC1": ["s1"], "SEC2": ["s2"]})
    yield fed
    fed.stop()


def test_security_suite(security_fed, tmp_path_factory):
    with criterion("security: corruptions, foreign CA, unmapped DN, two-hop signatures"):
        fed = security_fed
        from gridlet.ajo import AbstractJob, JobGroup
        from oracles import exec_task

        session = fed.client("security")

        # 100/100 randomized single-byte corruptions rejected
        sub = JobGroup(group_id="sub", children=(exec_task("t2"),), target_vsite="s2")
        job = AbstractJob(root=JobGroup(group_id="m", children=(exec_task("t1"), sub)))
        wire = pki.sign_job(job, session.keystore).to_wire()
        anchors = pki.TrustAnchors.load(fed.anchors)
        rng = random.Random(77001)
        rejected = 0
        for _ in range(100):
            pos = rng.randrange(len(wire))
            new = rng.randrange(256)
            while new == wire[pos]:
                new = rng.randrange(256)
            corrupted = wire[:pos] + bytes([new]) + wire[pos + 1:]
            try:
                pki.verify_job_envelope(pki.SignedEnvelope.from_wire(corrupted), anchors)
            except pki.VerifyFailure:
                rejected += 1
        assert rejected == 100

        # foreign-CA submission -> rejected-unverified end to end
        foreign_ca = pki.CertificateAuthority.create(fed.root / "foreign-ca", "CN=Foreign,O=Other")
        eve = foreign_ca.issue("CN=eve,O=Other", pki.ROLE_USER)
        eve_env = _sign_with(eve, AbstractJob(root=JobGroup(group_id="m", children=(exec_task("t"),))),
                             tmp_path_factory.mktemp("eve-ks"))
        reply = _raw_submit(fed, eve_env.to_wire(), "s1")
        assert reply.json()["code"] == "rejected-unverified"

        # unmapped DN -> rejected-unauthorized
        mallory = fed.ca.issue("CN=mallory,O=Gridlet", pki.ROLE_USER)
        mal_env = _sign_with(mallory, AbstractJob(root=JobGroup(group_id="m", children=(exec_task("t"),))),
                             tmp_path_factory.mktemp("mal-ks"))
        reply = _raw_submit(fed, mal_env.to_wire(), "s1")
        assert reply.json()["code"] == "rejected-unauthorized"

        # signatures survive two forwarding hops unchanged
        env = pki.sign_job(job, session.keystore)
        sent = env.to_wire()
        reply = _raw_submit(fed, sent, "s1", identity=session)
        assert reply.msg_type is MessageType.ACK
        job_id = reply.json()["job_id"]
        deadline = time.time() + 30
        from gridlet.client import JobHandle

        handle = JobHandle(usite="SEC1", gateway=f"127.0.0.1:{fed.gateways['SEC1'].port}",
                           vsite="s1", job_id=job_id)
        while time.time() < deadline:
            if session.status(handle)["state"] in ("Done", "Failed"):
                break
            time.sleep(0.1)
        record_s1 = fed.njs["s1"].records[job_id]
        assert record_s1.envelope.to_wire() == sent  # hop 1 intact
        sub_id = record_s1.remote["sub"]["job_id"]
        record_s2 = fed.njs["s2"].records[sub_id]
        assert record_s2.envelope.to_wire() == env.subenvelopes["sub"].to_wire()  # hop 2 intact
        assert record_s2.owner_dn == session.identity_dn


def _sign_with(identity, job, ks_dir):
    path = pki.Keystore.save_identity(ks_dir, "pw", identity, "x")
    ks = pki.Keystore(path).unlock("pw")
    return pki.sign_job(job, ks)


def _raw_submit(fed, wire, vsite, identity=None):
    gw = list(fed.gateways.values())[0]
    if identity is not None:
        cert, key = identity._cert_file, identity._key_file
    else:
        cert, key = fed._pem["njs-s1"]
    with upl.connect("127.0.0.1", gw.port, cert, key, fed.anchors) as ch:
        return ch.request(Frame(msg_type=MessageType.SUBMIT_JOB, payload=wire, ext={"vsite": vsite}))


# --- criterion: co-allocation oracle suite ----------------------------------------------

def test_coallocation_oracle_suite():
    with criterion("co-allocation: exhaustive window scan + 1000 fault interleavings"):
        rng = random.Random(550)

        # every generated instance (<= 5 sites, <= 20 reservations each, 60 s quantum)
        for _ in range(400):
            clock = VirtualClock(t0=200_000.0)
            n_sites = rng.randint(1, 5)
            caps = {f"s{i}": rng.randint(1, 10) for i in range(n_sites)}
            sites = {n: LocalAgreementSite(SlotCalendar(c, clock=clock)) for n, c in caps.items()}
            for name, site in sites.items():
                for k in range(rng.randint(0, 20)):
                    start = 200_000 + rng.randint(0, 80) * 30
                    length = rng.randint(1, 10) * 30
                    try:
                        site.calendar.hold(f"bg-{name}-{k}", "bg", start, start + length,
                                           rng.randint(1, caps[name]))
                        site.calendar.confirm(f"bg-{name}-{k}")
                    except ReservationError:
                        pass
            demand = {n: rng.randint(1, 11) for n in caps}
            duration = rng.randint(1, 8) * 30
            deadline = 200_000.0 + 100 * 60
            calendars = {n: s.fetch_calendar() for n, s in sites.items()}
            want = oracle_earliest(calendars, demand, duration, 200_000.0, deadline, 60)
            got = earliest_common_window(calendars, demand, duration, 200_000.0, deadline, 60)
            assert got == want, (caps, demand, duration)
            agr = negotiate(sites, demand, duration, not_before=200_000.0,
                            deadline=deadline, quantum=60, clock=clock)
            assert (agr.state == CONFIRMED) == (want is not None)
            if want is not None:
                assert agr.start == want

        # 1000 randomized negotiate/confirm/release/crash interleavings
        class Flaky(LocalAgreementSite):
            def __init__(self, calendar):
                super().__init__(calendar)
                self.down = False

            def _check(self):
                if self.down:
                    raise ConnectionError("down")

            def fetch_calendar(self):
                self._check()
                return super().fetch_calendar()

            def hold(self, *a, **k):
                self._check()
                return super().hold(*a, **k)

            def confirm(self, *a, **k):
                self._check()
                return super().confirm(*a, **k)

            def release(self, *a, **k):
                self._check()
                return super().release(*a, **k)

        for run in range(1000):
            clock = VirtualClock(t0=50_000.0)
            hold_ttl = 30.0
            caps = {f"s{i}": rng.randint(1, 6) for i in range(rng.randint(2, 5))}
            sites = {n: Flaky(SlotCalendar(c, hold_ttl=hold_ttl, clock=clock)) for n, c in caps.items()}
            agreements = []
            for _ in range(rng.randint(2, 8)):
                op = rng.random()
                if op < 0.5:
                    chosen = rng.sample(sorted(sites), rng.randint(1, len(sites)))
                    agr = negotiate({n: sites[n] for n in chosen},
                                    {n: rng.randint(1, 7) for n in chosen},
                                    duration=rng.randint(1, 5) * 60.0,
                                    deadline=clock() + 2400, quantum=60, clock=clock)
                    agreements.append((agr, chosen))
                elif op < 0.65 and agreements:
                    agr, chosen = rng.choice(agreements)
                    release({n: sites[n] for n in chosen}, agr)
                elif op < 0.8:
                    sites[rng.choice(sorted(sites))].down = True
                else:
                    clock.advance(rng.choice([1.0, 10.0, 35.0]))
                    for s in sites.values():
                        if s.down and rng.random() < 0.7:
                            s.down = False
                for agr, chosen in agreements:
                    if agr.pending_release:
                        release({n: sites[n] for n in chosen}, agr)
                # capacity never exceeded, at every boundary of every calendar
                for name, site in sites.items():
                    entries = site.calendar.snapshot()
                    for pt in {e["start"] for e in entries} | {e["end"] - 1e-9 for e in entries}:
                        used = sum(e["processors"] for e in entries if e["start"] <= pt < e["end"])
                        assert used <= caps[name]

            clock.advance(hold_ttl + 1)
            for s in sites.values():
                s.down = False
            for agr, chosen in agreements:
                if agr.pending_release:
                    release({n: sites[n] for n in chosen}, agr)
            for agr, chosen in agreements:
                live = {n: [e for e in sites[n].calendar.snapshot()
                            if e["agreement_id"] == agr.agreement_id] for n in chosen}
                present = {n: e[0]["state"] for n, e in live.items() if e}
                assert len(present) in (0, len(chosen))
                if agr.state == FAILED:
                    assert CONFIRMED not in present.values()


# --- criterion: protocol fuzz ------------------------------------------------------------

def test_protocol_fuzz():
    with criterion("protocol fuzz: 1e5 frames, stream roundtrips with resume"):
        rng = random.Random(99)
        base = upl.encode(Frame(msg_type=MessageType.SUBMIT_JOB,
                                payload=b'{"k":"v"}' * 20, ext={"vsite": "v1"}))
        for i in range(100_000):
            if i % 2 == 0:
                n = rng.randint(0, 80)
                data = bytes(rng.randrange(256) for _ in range(n))
            else:
                data = bytearray(base)
                for _ in range(rng.randint(1, 5)):
                    data[rng.randrange(len(data))] = rng.randrange(256)
                data = bytes(data)
            try:
                frame, used = upl.decode(data)
                assert used <= len(data)
            except upl.FrameError:
                pass

        # frame roundtrips byte-exact for every type
        for msg_type in MessageType:
            for _ in range(50):
                frame = Frame(msg_type=msg_type,
                              payload=bytes(rng.randrange(256) for _ in range(rng.randint(0, 512))),
                              ext={"vsite": "x"} if rng.random() < 0.5 else {})
                encoded = upl.encode(frame)
                decoded, _ = upl.decode(encoded)
                assert upl.encode(decoded) == encoded

        # file-stream roundtrips, including interrupted-and-resumed
        for _ in range(20):
            payload = os.urandom(rng.randint(0, 200_000))
            buf = io.BytesIO()
            upl.send_bytes_stream(buf, payload, chunk_size=8192)
            sink = io.BytesIO()
            cut = rng.randint(0, buf.tell())
            try:
                upl.receive_stream(io.BytesIO(buf.getvalue()[:cut]), sink)
            except (upl.TruncatedFrame, upl.StreamError):
                pass
            got = sink.getvalue()
            if len(got) < len(payload):
                buf2 = io.BytesIO()
                upl.send_bytes_stream(buf2, payload, offset=len(got), chunk_size=8192)
                buf2.seek(0)
                upl.receive_stream(buf2, sink)
            assert sink.getvalue() == payload


# --- criterion: broker determinism ----------------------------------------------------------

def test_broker_determinism():
    with criterion("broker: 1000 random instances equal the filter/sort oracle"):
        rng = random.Random(123321)
        for _ in range(1000):
            offers = [random_offer(rng, f"v{i}") for i in range(rng.randint(0, 12))]
            request = random_request(rng)
            got = [(m.cost, m.vsite_name) for m in match(request, offers)]
            assert got == oracle_match(request, offers)
            assert got == [(m.cost, m.vsite_name) for m in match(request, list(offers))]
