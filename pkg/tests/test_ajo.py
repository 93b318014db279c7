"""Job model: validation, ready set, rollup, canonical serialization."""

import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from gridlet import ajo
from gridlet.ajo import (
    AbstractJob,
    Control,
    JobGroup,
    Predicate,
    PredicateOp,
    TaskKind,
    TaskSpec,
    canonical_bytes,
    from_canonical,
    instantiate_iteration,
    validate,
)
from gridlet.status import (
    JobState,
    StatusShapeError,
    new_status_tree,
    ready_set,
    rollup,
)

from oracles import (
    all_topo_orders,
    dag_group,
    exec_task,
    oracle_ready,
    oracle_rollup,
    random_dag,
    random_digraph,
    random_job,
    topo_order_exists,
)


class TestValidate:
    def test_empty_group_valid(self):
        assert validate(JobGroup(group_id="g")).ok

    def test_two_cycle_reported(self):
        g = dag_group("g", ["A", "B"], [("A", "B"), ("B", "A")])
        report = validate(g)
        assert not report.ok
        assert any("cycle at [A,B]" in v.message for v in report.violations)

    def test_diamond_valid_any_edge_ordering(self):
        import itertools

        edges = [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")]
        for perm in itertools.permutations(edges):
            g = dag_group("g", ["A", "B", "C", "D"], list(perm))
            assert validate(g).ok
        # and the exhaustive search agrees there are exactly two orders
        assert sorted(all_topo_orders(["A", "B", "C", "D"], edges)) == [
            ("A", "B", "C", "D"),
            ("A", "C", "B", "D"),
        ]

    def test_unknown_edge_endpoint(self):
        g = dag_group("g", ["A"], [("A", "Z")])
        report = validate(g)
        assert any("unknown child 'Z'" in v.message for v in report.violations)

    def test_duplicate_child_ids(self):
        g = JobGroup(group_id="g", children=(exec_task("A"), exec_task("A")))
        assert any("duplicate child id" in v.message for v in validate(g).violations)

    def test_nonpositive_resources(self):
        t = TaskSpec(
            task_id="t", kind=TaskKind.EXECUTE, command="echo",
            resources=ajo.ResourceRequest(0, 10, 10),
        )
        report = validate(JobGroup(group_id="g", children=(t,)))
        assert any("processors" in v.message for v in report.violations)

    def test_transfer_needs_distinct_vsite_endpoints(self):
        bad = TaskSpec(task_id="t", kind=TaskKind.TRANSFER, source="va:x", dest="va:x")
        assert not validate(JobGroup(group_id="g", children=(bad,))).ok
        unqualified = TaskSpec(task_id="t", kind=TaskKind.TRANSFER, source="x", dest="va:y")
        assert not validate(JobGroup(group_id="g", children=(unqualified,))).ok
        ok = TaskSpec(task_id="t", kind=TaskKind.TRANSFER, source="va:x", dest="vb:x")
        assert validate(JobGroup(group_id="g", children=(ok,))).ok

    def test_import_path_containment(self):
        sneaky = TaskSpec(task_id="t", kind=TaskKind.IMPORT, endpoint="/data/x", workspace_path="../../etc/pw")
        assert not validate(JobGroup(group_id="g", children=(sneaky,))).ok

    def test_conditional_guard_rules(self):
        guard = exec_task("check")
        branch = exec_task("work")
        good = JobGroup(
            group_id="g", children=(guard, branch),
            control=Control(kind="conditional", predicate=Predicate("check", PredicateOp.EQ, 0)),
        )
        assert validate(good).ok
        missing = JobGroup(
            group_id="g", children=(branch,),
            control=Control(kind="conditional", predicate=Predicate("check", PredicateOp.EQ, 0)),
        )
        assert not validate(missing).ok
        guarded_guard = JobGroup(
            group_id="g", children=(guard, branch), dependencies=(("work", "check"),),
            control=Control(kind="conditional", predicate=Predicate("check", PredicateOp.EQ, 0)),
        )
        assert any("incoming" in v.message for v in validate(guarded_guard).violations)

    def test_repeat_needs_bound(self):
        body = (exec_task("t"),)
        assert validate(JobGroup(group_id="g", children=body, control=Control(kind="repeat", count=3))).ok
        assert not validate(JobGroup(group_id="g", children=body, control=Control(kind="repeat"))).ok
        assert not validate(JobGroup(group_id="g", children=body, control=Control(kind="repeat", count=0))).ok
        pred_ok = Control(kind="repeat", predicate=Predicate("t", PredicateOp.EQ, 0), max_iterations=5)
        assert validate(JobGroup(group_id="g", children=body, control=pred_ok)).ok

    def test_repeat_may_not_wrap_remote_subjobs(self):
        remote = JobGroup(group_id="sub", children=(exec_task("t"),), target_vsite="vb")
        g = JobGroup(group_id="g", children=(remote,), control=Control(kind="repeat", count=2))
        assert any("remote" in v.message for v in validate(g).violations)

    def test_acyclicity_matches_exhaustive_search(self):
        rng = random.Random(1001)
        for _ in range(300):
            nodes, edges = random_digraph(rng)
            g = dag_group("g", nodes, edges)
            report = validate(g)
            has_cycle_violation = any("cycle" in v.message for v in report.violations)
            assert has_cycle_violation == (not topo_order_exists(nodes, edges)), (nodes, edges)


class TestReadySet:
    def test_no_edges_all_children(self):
        g = dag_group("g", ["A", "B", "C"], [])
        assert ready_set(g, new_status_tree(g)) == {"A", "B", "C"}

    def test_diamond_after_a_done(self):
        g = dag_group("g", ["A", "B", "C", "D"], [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")])
        tree = new_status_tree(g)
        tree.child("A").set_state(JobState.DONE)
        assert ready_set(g, tree) == {"B", "C"}

    def test_shape_mismatch_is_structural_error(self):
        g = dag_group("g", ["A", "B"], [])
        other = new_status_tree(dag_group("g", ["A"], []))
        with pytest.raises(StatusShapeError):
            ready_set(g, other)

    def test_conditional_gating(self):
        g = JobGroup(
            group_id="g",
            children=(exec_task("check"), exec_task("branch")),
            control=Control(kind="conditional", predicate=Predicate("check", PredicateOp.EQ, 0)),
        )
        tree = new_status_tree(g)
        assert ready_set(g, tree) == set()
        guard = tree.child("check")
        guard.set_state(JobState.DONE)
        guard.exit_code = 1
        assert ready_set(g, tree) == set()
        guard.exit_code = 0
        assert ready_set(g, tree) == {"branch"}

    def test_random_dags_match_bruteforce_at_every_prefix(self):
        rng = random.Random(1002)
        for _ in range(200):
            nodes, edges = random_dag(rng, n_nodes=8)
            g = dag_group("g", nodes, edges)
            tree = new_status_tree(g)
            states = {n: "Pending" for n in nodes}
            while True:
                got = ready_set(g, tree)
                want = oracle_ready(nodes, edges, states)
                assert got == want, (edges, states)
                # the ready set never contains a child with an unfinished predecessor
                preds = {b: [a for a, b2 in edges if b2 == b] for b in nodes}
                for r in got:
                    assert all(states[p] == "Done" for p in preds[r])
                if not want:
                    break
                pick = rng.choice(sorted(want))
                outcome = "Done" if rng.random() < 0.8 else "Failed"
                states[pick] = outcome
                tree.child(pick).set_state(JobState(outcome))


class TestRollup:
    def test_single_done_leaf(self):
        g = dag_group("g", ["A"], [])
        tree = new_status_tree(g)
        tree.child("A").set_state(JobState.DONE)
        assert rollup(tree) is JobState.DONE

    def test_done_and_failed_rolls_failed(self):
        g = dag_group("g", ["A", "B"], [])
        tree = new_status_tree(g)
        tree.child("A").set_state(JobState.DONE)
        tree.child("B").set_state(JobState.FAILED)
        assert rollup(tree) is JobState.FAILED

    def test_not_run_children_do_not_block_done(self):
        g = dag_group("g", ["A", "B"], [])
        tree = new_status_tree(g)
        tree.child("A").set_state(JobState.DONE)
        tree.child("B").set_state(JobState.NOT_RUN)
        assert rollup(tree) is JobState.DONE

    def test_randomized_trees_match_postorder_oracle(self):
        rng = random.Random(1003)
        states = list(JobState)

        def build(depth):
            if depth > 3 or rng.random() < 0.4:
                s = rng.choice(states)
                return ("task", s.value), None
            n = rng.randint(1, 4)
            pairs = [build(depth + 1) for _ in range(n)]
            return ("group", "Pending", [p[0] for p in pairs]), None

        def to_status(tree, idx=None):
            from gridlet.status import StatusNode

            if tree[0] == "task":
                return StatusNode(node_id=f"t{id(tree)}{idx}", kind="execute", state=JobState(tree[1]))
            node = StatusNode(node_id=f"g{id(tree)}{idx}", kind="group")
            node.children = [to_status(c, i) for i, c in enumerate(tree[2])]
            return node

        for _ in range(300):
            shape, _ = build(0)
            if shape[0] == "task":
                continue
            node = to_status(shape)
            want = oracle_rollup(shape)
            got = rollup(node)
            assert got.value == want
            # idempotent
            assert rollup(node).value == want

    def test_rollup_order_independent(self):
        from gridlet.status import StatusNode

        kids = [
            StatusNode(node_id="a", kind="execute", state=JobState.DONE),
            StatusNode(node_id="b", kind="execute", state=JobState.FAILED),
            StatusNode(node_id="c", kind="execute", state=JobState.NOT_RUN),
        ]
        for perm in ([0, 1, 2], [2, 1, 0], [1, 0, 2]):
            node = StatusNode(node_id="g", kind="group")
            node.children = [kids[i] for i in perm]
            assert rollup(node) is JobState.FAILED


class TestCanonicalBytes:
    def test_roundtrip_fixpoint(self):
        job = random_job(random.Random(7))
        data = canonical_bytes(job)
        again = canonical_bytes(from_canonical(data))
        assert data == again

    def test_declared_order_insensitive_to_construction(self):
        a, b = exec_task("a"), exec_task("b")
        g1 = JobGroup(group_id="g", children=(a, b), dependencies=(("a", "b"),))
        g2 = JobGroup(group_id="g", children=(exec_task("a"), exec_task("b")), dependencies=(("a", "b"),))
        assert canonical_bytes(g1) == canonical_bytes(g2)

    def test_refuses_invalid_job(self):
        g = dag_group("g", ["A", "B"], [("A", "B"), ("B", "A")])
        with pytest.raises(ajo.InvalidJobError):
            canonical_bytes(g)

    def test_version_field_mandatory(self):
        job = AbstractJob(root=JobGroup(group_id="g"))
        doc = json.loads(canonical_bytes(job))
        assert doc["ajo_version"] == 1
        del doc["ajo_version"]
        with pytest.raises(ValueError):
            AbstractJob.from_dict(doc)

    def test_thousand_random_jobs_roundtrip_and_injective(self):
        rng = random.Random(1004)
        seen: dict[bytes, dict] = {}
        for _ in range(1000):
            job = random_job(rng)
            report = validate(job)
            assert report.ok, str(report)
            data = canonical_bytes(job)
            back = from_canonical(data)
            assert back == job
            assert canonical_bytes(back) == data
            if data in seen:
                assert seen[data] == job.to_dict()
            seen[data] = job.to_dict()

    @given(st.integers(min_value=0, max_value=2**32))
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_property(self, seed):
        job = random_job(random.Random(seed))
        assert from_canonical(canonical_bytes(job)) == job


class TestRepeatInstantiation:
    def test_ids_suffixed_and_edges_remapped(self):
        g = JobGroup(
            group_id="loop",
            children=(exec_task("a"), exec_task("b")),
            dependencies=(("a", "b"),),
            control=Control(kind="repeat", count=3),
        )
        inst = instantiate_iteration(g, 1)
        assert inst.group_id == "loop#1"
        assert inst.child_ids() == ["a#1", "b#1"]
        assert inst.dependencies == (("a#1", "b#1"),)
        assert inst.control.kind == "plain"

    def test_bound_k_yields_k_instances(self):
        g = JobGroup(
            group_id="loop",
            children=(exec_task("a"),),
            control=Control(kind="repeat", count=4),
        )
        instances = [instantiate_iteration(g, i) for i in range(g.control.iteration_bound)]
        assert len(instances) == 4
        assert len({i.group_id for i in instances}) == 4
