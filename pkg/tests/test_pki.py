"""PKI: issuance, keystores, envelope signing and verification."""

import datetime
import random

import pytest
from hypothesis import given, settings, strategies as st

from gridlet import ajo, pki

from oracles import exec_task, random_job


@pytest.fixture(scope="module")
def realm(tmp_path_factory):
    """A CA with anchors, one user keystore, and a foreign CA."""
    tmp = tmp_path_factory.mktemp("pki")
    ca = pki.CertificateAuthority.create(tmp / "ca", "CN=Realm CA,O=Gridlet")
    ca.export_anchor(tmp / "anchors")
    anchors = pki.TrustAnchors.load(tmp / "anchors")
    alice = ca.issue("CN=alice,O=Gridlet", pki.ROLE_USER)
    ks = pki.Keystore(pki.Keystore.save_identity(tmp / "alice", "pw", alice, "alice")).unlock("pw")
    foreign_ca = pki.CertificateAuthority.create(tmp / "ca2", "CN=Foreign CA,O=Elsewhere")
    return {"tmp": tmp, "ca": ca, "anchors": anchors, "keystore": ks, "foreign_ca": foreign_ca}


def simple_job() -> ajo.AbstractJob:
    return ajo.AbstractJob(root=ajo.JobGroup(group_id="main", children=(exec_task("t"),)))


class TestIssuance:
    def test_issue_and_verify_chain(self, realm):
        ident = realm["ca"].issue("CN=carol,O=Gridlet", pki.ROLE_USER)
        ks = pki.Keystore(
            pki.Keystore.save_identity(realm["tmp"] / "carol", "pw", ident, "carol")
        ).unlock("pw")
        env = pki.sign_payload(b"payload", ks)
        assert pki.verify(env, realm["anchors"]).dn == "CN=carol,O=Gridlet"

    def test_role_recorded_as_extension(self, realm):
        server = realm["ca"].issue("CN=njs-x,O=Gridlet", pki.ROLE_SERVER)
        assert server.role == "server"

    def test_expired_certificate_fails(self, realm):
        past = realm["ca"].issue(
            "CN=old,O=Gridlet", pki.ROLE_USER,
            not_before=datetime.datetime(2020, 1, 1, tzinfo=datetime.timezone.utc),
            not_after=datetime.datetime(2021, 1, 1, tzinfo=datetime.timezone.utc),
        )
        ks = pki.Keystore(pki.Keystore.save_identity(realm["tmp"] / "old", "pw", past, "old")).unlock("pw")
        with pytest.raises(pki.VerifyFailure) as exc:
            pki.verify(pki.sign_payload(b"x", ks), realm["anchors"])
        assert exc.value.code == "expired"

    def test_unconfigured_ca_rejected(self, realm):
        eve = realm["foreign_ca"].issue("CN=eve,O=Elsewhere", pki.ROLE_USER)
        ks = pki.Keystore(pki.Keystore.save_identity(realm["tmp"] / "eve", "pw", eve, "eve")).unlock("pw")
        with pytest.raises(pki.VerifyFailure) as exc:
            pki.verify(pki.sign_payload(b"x", ks), realm["anchors"])
        assert exc.value.code == "untrusted-chain"

    def test_duplicate_dn_refused(self, realm):
        realm["ca"].issue("CN=dup,O=Gridlet", pki.ROLE_USER)
        with pytest.raises(pki.PkiError):
            realm["ca"].issue("CN=dup,O=Gridlet", pki.ROLE_USER)


class TestKeystore:
    def test_locked_keystore_refuses_signing(self, realm):
        ks = pki.Keystore(realm["tmp"] / "alice")
        with pytest.raises(pki.KeystoreLocked):
            pki.sign_payload(b"x", ks)

    def test_multiple_identities_coexist(self, realm, tmp_path):
        a = realm["ca"].issue("CN=multi-a,O=Gridlet", pki.ROLE_USER)
        b = realm["ca"].issue("CN=multi-b,O=Gridlet", pki.ROLE_USER)
        pki.Keystore.save_identity(tmp_path / "store", "pw", a, "a")
        pki.Keystore.save_identity(tmp_path / "store", "pw", b, "b")
        ks = pki.Keystore(tmp_path / "store").unlock("pw")
        assert ks.identities() == ["CN=multi-a,O=Gridlet", "CN=multi-b,O=Gridlet"]
        env = pki.sign_payload(b"x", ks, "CN=multi-b,O=Gridlet")
        assert pki.verify(env, realm["anchors"]).dn == "CN=multi-b,O=Gridlet"


class TestEnvelopes:
    def test_sign_verify_roundtrip(self, realm):
        env = pki.sign_job(simple_job(), realm["keystore"])
        ident, job = pki.verify_job_envelope(env, realm["anchors"])
        assert ident.dn == "CN=alice,O=Gridlet"
        assert job == simple_job()

    def test_payload_byte_identical(self, realm):
        payload = ajo.canonical_bytes(simple_job())
        env = pki.sign_payload(payload, realm["keystore"])
        assert env.payload == payload

    def test_flip_any_payload_byte_fails(self, realm):
        env = pki.sign_job(simple_job(), realm["keystore"])
        for i in range(len(env.payload)):
            bad = pki.SignedEnvelope(
                payload=env.payload[:i] + bytes([env.payload[i] ^ 0x01]) + env.payload[i + 1:],
                signer_dn=env.signer_dn, chain_pem=env.chain_pem, signature=env.signature,
            )
            with pytest.raises(pki.VerifyFailure):
                pki.verify(bad, realm["anchors"])

    def test_forwarded_bytes_verify_identically(self, realm):
        env = pki.sign_job(simple_job(), realm["keystore"])
        wire = env.to_wire()
        relayed = pki.SignedEnvelope.from_wire(bytes(wire))  # byte-for-byte relay
        assert pki.verify(relayed, realm["anchors"]).dn == pki.verify(env, realm["anchors"]).dn
        assert relayed.to_wire() == wire

    def test_nested_subjob_envelope_verifies_independently(self, realm):
        sub = ajo.JobGroup(group_id="sub", children=(exec_task("s"),), target_vsite="vb")
        job = ajo.AbstractJob(root=ajo.JobGroup(group_id="main", children=(exec_task("t"), sub)))
        env = pki.sign_job(job, realm["keystore"])
        assert set(env.subenvelopes) == {"sub"}
        nested = env.subenvelopes["sub"]
        ident, subjob = pki.verify_job_envelope(nested, realm["anchors"])
        assert ident.dn == "CN=alice,O=Gridlet"
        assert subjob.root == sub
        pki.verify_job_envelope(env, realm["anchors"])

    def test_swapped_nested_envelope_detected(self, realm):
        sub = ajo.JobGroup(group_id="sub", children=(exec_task("s"),), target_vsite="vb")
        job = ajo.AbstractJob(root=ajo.JobGroup(group_id="main", children=(sub,)))
        env = pki.sign_job(job, realm["keystore"])
        other = pki.sign_job(simple_job(), realm["keystore"])
        tampered = pki.SignedEnvelope(
            payload=env.payload, signer_dn=env.signer_dn, chain_pem=env.chain_pem,
            signature=env.signature, subenvelopes={"sub": other},
        )
        with pytest.raises(pki.VerifyFailure):
            pki.verify_job_envelope(tampered, realm["anchors"])

    def test_hundred_single_byte_corruptions_all_rejected(self, realm):
        sub = ajo.JobGroup(group_id="sub", children=(exec_task("s"),), target_vsite="vb")
        job = ajo.AbstractJob(root=ajo.JobGroup(group_id="main", children=(exec_task("t"), sub)))
        wire = pki.sign_job(job, realm["keystore"]).to_wire()
        rng = random.Random(42)
        rejected = 0
        for _ in range(100):
            pos = rng.randrange(len(wire))
            new = rng.randrange(256)
            while new == wire[pos]:
                new = rng.randrange(256)
            corrupted = wire[:pos] + bytes([new]) + wire[pos + 1:]
            try:
                env = pki.SignedEnvelope.from_wire(corrupted)
                pki.verify_job_envelope(env, realm["anchors"])
            except pki.VerifyFailure:
                rejected += 1
        assert rejected == 100

    @given(st.binary(min_size=0, max_size=4096))
    @settings(max_examples=50, deadline=None)
    def test_verify_of_sign_is_identity_on_payloads(self, payload):
        # module-scoped realm is not available to hypothesis strategies;
        # build one per test session lazily
        realm = _hypothesis_realm()
        env = pki.sign_payload(payload, realm["keystore"])
        assert pki.verify(env, realm["anchors"]).dn == "CN=hywork,O=Gridlet"
        assert env.payload == payload

    def test_random_jobs_sign_and_deep_verify(self, realm):
        rng = random.Random(9)
        for _ in range(25):
            job = random_job(rng)
            env = pki.sign_job(job, realm["keystore"])
            ident, back = pki.verify_job_envelope(env, realm["anchors"])
            assert back == job
            assert ident.dn == "CN=alice,O=Gridlet"


_HY_REALM = {}


def _hypothesis_realm():
    if not _HY_REALM:
        import tempfile
        from pathlib import Path

        tmp = Path(tempfile.mkdtemp(prefix="gridlet-hy-"))
        ca = pki.CertificateAuthority.create(tmp / "ca", "CN=Hy CA,O=Gridlet")
        ca.export_anchor(tmp / "anchors")
        ident = ca.issue("CN=hywork,O=Gridlet", pki.ROLE_USER)
        ks = pki.Keystore(pki.Keystore.save_identity(tmp / "ks", "pw", ident, "w")).unlock("pw")
        _HY_REALM.update({"anchors": pki.TrustAnchors.load(tmp / "anchors"), "keystore": ks})
    return _HY_REALM
