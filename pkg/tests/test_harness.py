"""Process-based federation harness: bring-up, scenarios, fault injection."""

import json
import time

import pytest

from gridlet.harness import ScenarioRunner, TestNet, TopologySpec, UsiteSpec, VsiteSpec

pytestmark = pytest.mark.harness


@pytest.fixture(scope="module")
def net(tmp_path_factory):
    spec = TopologySpec(
        usites=[UsiteSpec(name="FZJ", vsites=[VsiteSpec(name="v1")])],
        base_port=9500,
    )
    testnet = TestNet(spec, tmp_path_factory.mktemp("net1"))
    testnet.bring_up()
    yield testnet
    testnet.tear_down()


def test_single_usite_lists_its_vsite(net):
    session = net.client("probe")
    assert [v["vsite_name"] for v in session.list_vsites("FZJ")] == ["v1"]


def test_scenario_submit_and_assert(net, tmp_path):
    wf = tmp_path / "hello.json"
    wf.write_text(json.dumps({
        "workflow_version": 1, "name": "hello", "vsite": "v1",
        "tasks": [{"id": "say", "kind": "execute", "command": "echo", "args": ["hello"]}],
    }))
    runner = ScenarioRunner(net)
    report = runner.run(f"""
# demo scenario
SUBMIT j1 {wf} VIA FZJ VSITE v1
AWAIT j1 TERMINAL 30
ASSERT_STATE j1 / Done
ASSERT_STATE j1 say Done
ASSERT_OUTPUT j1 say stdout EQUALS hello
""")
    assert report.ok, [s.message for s in report.steps if not s.ok]
    out = report.to_junit_xml(tmp_path / "report.xml")
    text = out.read_text()
    assert "<testsuite" in text and 'failures="0"' in text


def test_scenario_failure_recorded_not_raised(net, tmp_path):
    wf = tmp_path / "bad.json"
    wf.write_text(json.dumps({
        "workflow_version": 1, "name": "bad", "vsite": "v1",
        "tasks": [{"id": "boom", "kind": "execute", "command": "false"}],
    }))
    runner = ScenarioRunner(net)
    report = runner.run(f"""
SUBMIT j1 {wf} VIA FZJ VSITE v1
AWAIT j1 TERMINAL 30
ASSERT_STATE j1 / Done
""")
    assert not report.ok
    failed = [s for s in report.steps if not s.ok]
    assert len(failed) == 1 and "ASSERT_STATE" in failed[0].text
    xml = report.to_junit_xml(tmp_path / "r.xml").read_text()
    assert 'failures="1"' in xml


def test_tsi_kill_fails_task_lost(net, tmp_path):
    wf = tmp_path / "slow.json"
    wf.write_text(json.dumps({
        "workflow_version": 1, "name": "slow", "vsite": "v1",
        "tasks": [
            {"id": "victim", "kind": "execute", "command": "sleep", "args": ["20"]},
            {"id": "dependent", "kind": "execute", "command": "true"},
            {"id": "bystander", "kind": "execute", "command": "echo", "args": ["ok"]},
        ],
        "dependencies": [["victim", "dependent"]],
    }))
    session = net.client("faults")
    handle = session.submit(wf, gateway="FZJ", vsite="v1")
    deadline = time.time() + 20
    while time.time() < deadline:
        tree = session.status(handle)
        victim = next(c for c in tree["children"] if c["id"] == "victim")
        if victim["state"] == "Running":
            break
        time.sleep(0.1)
    net.inject_fault("tsi:v1", "kill")
    net.restart("tsi:v1")  # daemon returns empty-handed: task is lost
    deadline = time.time() + 30
    tree = None
    while time.time() < deadline:
        tree = session.status(handle)
        if tree["state"] in ("Done", "Failed", "Aborted"):
            break
        time.sleep(0.2)
    assert tree["state"] == "Failed"
    by_id = {c["id"]: c for c in tree["children"]}
    assert by_id["victim"]["state"] == "Failed"
    assert "lost" in by_id["victim"]["detail"]
    assert by_id["dependent"]["state"] == "NotRun"
    assert by_id["bystander"]["state"] == "Done"


def test_njs_restart_reexecutes_nothing_done(net, tmp_path):
    wf = tmp_path / "twophase.json"
    wf.write_text(json.dumps({
        "workflow_version": 1, "name": "twophase", "vsite": "v1",
        "tasks": [
            {"id": "first", "kind": "execute", "command": "echo", "args": ["one"]},
            {"id": "gap", "kind": "execute", "command": "sleep", "args": ["3"]},
            {"id": "second", "kind": "execute", "command": "echo", "args": ["two"]},
        ],
        "dependencies": [["first", "gap"], ["gap", "second"]],
    }))
    session = net.client("restarts")
    before = len(net.tsi_submissions("v1"))
    handle = session.submit(wf, gateway="FZJ", vsite="v1")
    # wait until 'first' is Done and 'gap' is in flight
    deadline = time.time() + 20
    while time.time() < deadline:
        tree = session.status(handle)
        by_id = {c["id"]: c for c in tree["children"]}
        if by_id["first"]["state"] == "Done" and by_id["gap"]["state"] in ("Submitted", "Running"):
            break
        time.sleep(0.1)
    net.restart("njs:v1")
    deadline = time.time() + 40
    tree = None
    while time.time() < deadline:
        try:
            tree = session.status(handle)
            if tree["state"] in ("Done", "Failed", "Aborted"):
                break
        except Exception:
            pass  # supervisor still coming back
        time.sleep(0.25)
    assert tree is not None and tree["state"] == "Done", tree
    submissions = net.tsi_submissions("v1")[before:]
    # one batch submission per task: nothing already Done ran twice
    scripts = [s for _, s in submissions]
    assert len(scripts) == len(set(scripts)) == 3


def test_envelope_hash_audit_across_hop(net, tmp_path):
    wf = tmp_path / "audit.json"
    wf.write_text(json.dumps({
        "workflow_version": 1, "name": "audit", "vsite": "v1",
        "tasks": [{"id": "t", "kind": "execute", "command": "true"}],
    }))
    session = net.client("audit")
    handle = session.submit(wf, gateway="FZJ", vsite="v1")
    deadline = time.time() + 20
    while time.time() < deadline:
        if session.status(handle)["state"] in ("Done", "Failed"):
            break
        time.sleep(0.1)
    gw_hashes = net.envelope_hashes("gateway:FZJ")
    njs_hashes = net.envelope_hashes("njs:v1")
    assert gw_hashes and njs_hashes
    assert gw_hashes[-1] == njs_hashes[-1]


def test_pause_resume_tsi_job_still_completes(net, tmp_path):
    wf = tmp_path / "pausable.json"
    wf.write_text(json.dumps({
        "workflow_version": 1, "name": "pausable", "vsite": "v1",
        "tasks": [{"id": "steady", "kind": "execute", "command": "sh",
                   "args": ["-c", "sleep 0.5; echo survived"]}],
    }))
    session = net.client("pauser")
    handle = session.submit(wf, gateway="FZJ", vsite="v1")
    net.inject_fault("tsi:v1", "pause")
    time.sleep(1.0)  # shorter than the supervisor's grace period
    net.inject_fault("tsi:v1", "resume")
    deadline = time.time() + 30
    tree = None
    while time.time() < deadline:
        tree = session.status(handle)
        if tree["state"] in ("Done", "Failed", "Aborted"):
            break
        time.sleep(0.2)
    assert tree["state"] == "Done", tree
