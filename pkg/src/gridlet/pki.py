"""Test-scale PKI: certificate authority, keystores, signed job envelopes.

Users and servers hold X.509 certificates chaining to a CA directory of
trust anchors. Jobs travel as detached-signature envelopes: the canonical
job bytes, the signer's certificate chain, and an ECDSA-P256-SHA256
signature over exactly those bytes. Sub-jobs destined for other sites
carry their own envelopes, nested, so any receiving site can verify the
original author without trusting the sites in between.

Certificate roles (user/server) ride in a private extension,
OID 1.3.6.1.4.1.55555.1.1.
"""

from __future__ import annotations

import base64
import datetime
import json
import os
import stat
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.serialization import pkcs12
from cryptography.x509.oid import ExtendedKeyUsageOID
from cryptography.x509.verification import PolicyBuilder, Store, VerificationError

from . import ajo

ENVELOPE_VERSION = 1
SIGNATURE_ALG = "ECDSA-P256-SHA256"
ROLE_OID = x509.ObjectIdentifier("1.3.6.1.4.1.55555.1.1")

ROLE_USER = "user"
ROLE_SERVER = "server"


class PkiError(Exception):
    pass


class KeystoreLocked(PkiError):
    pass


class VerifyFailure(PkiError):
    """Envelope verification failure with a stable error code."""

    BAD_SIGNATURE = "bad-signature"
    UNTRUSTED_CHAIN = "untrusted-chain"
    EXPIRED = "expired"
    MALFORMED = "malformed-envelope"

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def canonical_dn(dn: str) -> str:
    return x509.Name.from_rfc4514_string(dn).rfc4514_string()


def cert_dn(cert: x509.Certificate) -> str:
    return cert.subject.rfc4514_string()


def cert_role(cert: x509.Certificate) -> Optional[str]:
    try:
        ext = cert.extensions.get_extension_for_oid(ROLE_OID)
    except x509.ExtensionNotFound:
        return None
    value = ext.value.value if isinstance(ext.value, x509.UnrecognizedExtension) else None
    return value.decode("ascii") if value else None


def load_pem_certs(data: bytes) -> list[x509.Certificate]:
    return x509.load_pem_x509_certificates(data)


def _utcnow() -> datetime.datetime:
    return datetime.datetime.now(datetime.timezone.utc)


def _write_private(path: Path, data: bytes) -> None:
    path.write_bytes(data)
    os.chmod(path, stat.S_IRUSR | stat.S_IWUSR)


@dataclass
class Identity:
    """A certificate (plus chain back to the CA) and, when local, its key."""

    dn: str
    cert: x509.Certificate
    chain: tuple[x509.Certificate, ...] = ()
    key: Optional[ec.EllipticCurvePrivateKey] = None

    @property
    def role(self) -> Optional[str]:
        return cert_role(self.cert)

    def cert_pem(self) -> str:
        return self.cert.public_bytes(serialization.Encoding.PEM).decode("ascii")

    def chain_pems(self) -> list[str]:
        return [self.cert_pem()] + [
            c.public_bytes(serialization.Encoding.PEM).decode("ascii") for c in self.chain
        ]

    def write_pem_pair(self, cert_path: Path, key_path: Path) -> None:
        cert_path.write_bytes("".join(self.chain_pems()).encode("ascii"))
        if self.key is None:
            raise PkiError(f"identity {self.dn} has no private key")
        _write_private(
            key_path,
            self.key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            ),
        )


class TrustAnchors:
    """A flat directory of CA certificates (*.pem)."""

    def __init__(self, certs: list[x509.Certificate]):
        self.certs = certs

    @classmethod
    def load(cls, directory: str | Path) -> "TrustAnchors":
        directory = Path(directory)
        certs: list[x509.Certificate] = []
        for pem in sorted(directory.glob("*.pem")):
            certs.extend(load_pem_certs(pem.read_bytes()))
        if not certs:
            raise PkiError(f"no trust anchors found in {directory}")
        return cls(certs)

    def cadata(self) -> str:
        return "".join(c.public_bytes(serialization.Encoding.PEM).decode("ascii") for c in self.certs)

    def store(self) -> Store:
        return Store(self.certs)


class CertificateAuthority:
    """Desk-scale CA: one directory holding the CA pair and an issuance index.

    Duplicate subject DNs under the same CA are refused.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.cert_path = self.directory / "ca.pem"
        self.key_path = self.directory / "ca.key.pem"
        self.index_path = self.directory / "issued.json"
        self.cert: Optional[x509.Certificate] = None
        self.key: Optional[ec.EllipticCurvePrivateKey] = None

    @classmethod
    def create(cls, directory: str | Path, dn: str, valid_days: int = 3650) -> "CertificateAuthority":
        ca = cls(directory)
        ca.directory.mkdir(parents=True, exist_ok=True)
        if ca.cert_path.exists():
            raise PkiError(f"CA already initialized at {ca.directory}")
        key = ec.generate_private_key(ec.SECP256R1())
        name = x509.Name.from_rfc4514_string(dn)
        now = _utcnow()
        cert = (
            x509.CertificateBuilder()
            .subject_name(name)
            .issuer_name(name)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=valid_days))
            .add_extension(x509.BasicConstraints(ca=True, path_length=1), critical=True)
            .add_extension(
                x509.KeyUsage(
                    digital_signature=True, content_commitment=False, key_encipherment=False,
                    data_encipherment=False, key_agreement=False, key_cert_sign=True,
                    crl_sign=True, encipher_only=False, decipher_only=False,
                ),
                critical=True,
            )
            .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
            .sign(key, hashes.SHA256())
        )
        ca.cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        _write_private(
            ca.key_path,
            key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            ),
        )
        ca.index_path.write_text("{}\n")
        ca.cert, ca.key = cert, key
        return ca

    @classmethod
    def load(cls, directory: str | Path) -> "CertificateAuthority":
        ca = cls(directory)
        ca.cert = load_pem_certs(ca.cert_path.read_bytes())[0]
        ca.key = serialization.load_pem_private_key(ca.key_path.read_bytes(), password=None)
        return ca

    @property
    def dn(self) -> str:
        return cert_dn(self.cert)

    def _index(self) -> dict:
        if self.index_path.exists():
            return json.loads(self.index_path.read_text())
        return {}

    def issue(
        self,
        subject_dn: str,
        role: str,
        valid_days: int = 365,
        not_before: Optional[datetime.datetime] = None,
        not_after: Optional[datetime.datetime] = None,
    ) -> Identity:
        if role not in (ROLE_USER, ROLE_SERVER):
            raise PkiError(f"unknown role {role!r}")
        subject_dn = canonical_dn(subject_dn)
        index = self._index()
        if subject_dn in index:
            raise PkiError(f"DN already issued by this CA: {subject_dn}")
        key = ec.generate_private_key(ec.SECP256R1())
        now = _utcnow()
        nb = not_before or (now - datetime.timedelta(minutes=5))
        na = not_after or (now + datetime.timedelta(days=valid_days))
        cert = (
            x509.CertificateBuilder()
            .subject_name(x509.Name.from_rfc4514_string(subject_dn))
            .issuer_name(self.cert.subject)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(nb)
            .not_valid_after(na)
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(
                x509.KeyUsage(
                    digital_signature=True, content_commitment=False, key_encipherment=False,
                    data_encipherment=False, key_agreement=False, key_cert_sign=False,
                    crl_sign=False, encipher_only=False, decipher_only=False,
                ),
                critical=True,
            )
            .add_extension(
                x509.ExtendedKeyUsage([ExtendedKeyUsageOID.CLIENT_AUTH, ExtendedKeyUsageOID.SERVER_AUTH]),
                critical=False,
            )
            .add_extension(
                x509.SubjectAlternativeName([x509.DNSName("localhost")]),
                critical=False,
            )
            .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
            .add_extension(
                x509.AuthorityKeyIdentifier.from_issuer_public_key(self.key.public_key()), critical=False
            )
            .add_extension(x509.UnrecognizedExtension(ROLE_OID, role.encode("ascii")), critical=False)
            .sign(self.key, hashes.SHA256())
        )
        index[subject_dn] = format(cert.serial_number, "x")
        self.index_path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
        return Identity(dn=subject_dn, cert=cert, chain=(), key=key)

    def export_anchor(self, anchors_dir: str | Path, name: Optional[str] = None) -> Path:
        anchors_dir = Path(anchors_dir)
        anchors_dir.mkdir(parents=True, exist_ok=True)
        out = anchors_dir / f"{name or 'ca'}.pem"
        out.write_bytes(self.cert.public_bytes(serialization.Encoding.PEM))
        return out


class Keystore:
    """Encrypted store of signing identities.

    The on-disk form is PKCS#12; a path may be a single ``.p12`` file or a
    directory of them (one identity per file, one shared passphrase).
    Signing requires an explicit unlock: done once per process.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, Identity] = {}
        self._unlocked = False

    @property
    def unlocked(self) -> bool:
        return self._unlocked

    def unlock(self, passphrase: str) -> "Keystore":
        if self._unlocked:
            return self
        files = [self.path] if self.path.is_file() else sorted(self.path.glob("*.p12"))
        if not files:
            raise PkiError(f"no keystore files at {self.path}")
        for f in files:
            key, cert, extra = pkcs12.load_key_and_certificates(f.read_bytes(), passphrase.encode("utf-8"))
            if key is None or cert is None:
                raise PkiError(f"keystore entry {f} lacks a key or certificate")
            ident = Identity(dn=cert_dn(cert), cert=cert, chain=tuple(extra or ()), key=key)
            self._entries[ident.dn] = ident
        self._unlocked = True
        return self

    def identities(self) -> list[str]:
        self._require_unlocked()
        return sorted(self._entries)

    def get(self, dn: Optional[str] = None) -> Identity:
        self._require_unlocked()
        if dn is None:
            if len(self._entries) != 1:
                raise PkiError("keystore holds multiple identities; pick one")
            return next(iter(self._entries.values()))
        dn = canonical_dn(dn)
        if dn not in self._entries:
            raise PkiError(f"identity not in keystore: {dn}")
        return self._entries[dn]

    def _require_unlocked(self) -> None:
        if not self._unlocked:
            raise KeystoreLocked("keystore is locked; unlock it first")

    @staticmethod
    def save_identity(path: str | Path, passphrase: str, identity: Identity, name: str = "key") -> Path:
        path = Path(path)
        if path.suffix != ".p12":
            path.mkdir(parents=True, exist_ok=True)
            path = path / f"{name}.p12"
        data = pkcs12.serialize_key_and_certificates(
            name.encode("ascii"),
            identity.key,
            identity.cert,
            list(identity.chain) or None,
            serialization.BestAvailableEncryption(passphrase.encode("utf-8")),
        )
        _write_private(path, data)
        return path


@dataclass
class SignedEnvelope:
    """Detached signature over canonical job bytes, plus nested sub-job
    envelopes keyed by the sub-group's path inside this payload's root."""

    payload: bytes
    signer_dn: str
    chain_pem: tuple[str, ...]
    signature: bytes
    alg: str = SIGNATURE_ALG
    subenvelopes: dict = field(default_factory=dict)  # path -> SignedEnvelope

    def to_dict(self) -> dict:
        return {
            "envelope_version": ENVELOPE_VERSION,
            "alg": self.alg,
            "payload_b64": base64.b64encode(self.payload).decode("ascii"),
            "signer_dn": self.signer_dn,
            "chain_pem": list(self.chain_pem),
            "signature_b64": base64.b64encode(self.signature).decode("ascii"),
            "subenvelopes": {k: v.to_dict() for k, v in sorted(self.subenvelopes.items())},
        }

    def to_wire(self) -> bytes:
        return ajo.canonical_json(self.to_dict())

    _WIRE_KEYS = frozenset(
        {"envelope_version", "alg", "payload_b64", "signer_dn", "chain_pem", "signature_b64", "subenvelopes"}
    )

    @classmethod
    def from_dict(cls, d: dict) -> "SignedEnvelope":
        try:
            if set(d) != cls._WIRE_KEYS:
                raise ValueError(f"unexpected envelope keys: {sorted(set(d) ^ cls._WIRE_KEYS)}")
            if d.get("envelope_version") != ENVELOPE_VERSION:
                raise ValueError(f"unsupported envelope_version {d.get('envelope_version')!r}")
            return cls(
                payload=base64.b64decode(d["payload_b64"], validate=True),
                signer_dn=d["signer_dn"],
                chain_pem=tuple(d["chain_pem"]),
                signature=base64.b64decode(d["signature_b64"], validate=True),
                alg=d.get("alg", SIGNATURE_ALG),
                subenvelopes={k: cls.from_dict(v) for k, v in d.get("subenvelopes", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise VerifyFailure(VerifyFailure.MALFORMED, str(exc)) from exc

    @classmethod
    def from_wire(cls, data: bytes) -> "SignedEnvelope":
        try:
            d = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise VerifyFailure(VerifyFailure.MALFORMED, f"envelope is not JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise VerifyFailure(VerifyFailure.MALFORMED, "envelope is not a JSON object")
        return cls.from_dict(d)


@dataclass(frozen=True)
class VerifiedIdentity:
    dn: str
    role: Optional[str]
    certificate: x509.Certificate


def sign_payload(payload: bytes, keystore: Keystore, signer_dn: Optional[str] = None,
                 subenvelopes: Optional[dict] = None) -> SignedEnvelope:
    """Sign raw payload bytes with an identity from an unlocked keystore."""
    ident = keystore.get(signer_dn)
    signature = ident.key.sign(payload, ec.ECDSA(hashes.SHA256()))
    return SignedEnvelope(
        payload=payload,
        signer_dn=ident.dn,
        chain_pem=tuple(ident.chain_pems()),
        signature=signature,
        subenvelopes=subenvelopes or {},
    )


def sign_job(job: ajo.AbstractJob, keystore: Keystore, signer_dn: Optional[str] = None) -> SignedEnvelope:
    """Sign a job and, recursively, every remote-targeted sub-group.

    Each sub-group destined for another vsite becomes its own root
    document signed independently, so the receiving site verifies the
    original user: not whichever supervisor forwarded it.
    """
    subenvelopes = {}
    for path, subgroup in ajo.iter_remote_groups(job.root):
        sub_job = ajo.AbstractJob(root=subgroup, project=job.project)
        subenvelopes[path] = sign_job(sub_job, keystore, signer_dn)
    return sign_payload(ajo.canonical_bytes(job), keystore, signer_dn, subenvelopes)


def verify(env: SignedEnvelope, anchors: TrustAnchors,
           at_time: Optional[datetime.datetime] = None) -> VerifiedIdentity:
    """Check signature, chain of trust, and validity window.

    Pure function of (envelope bytes, anchors, clock): the result does not
    depend on which site relayed the envelope. Failures carry distinct
    codes: bad-signature, untrusted-chain, expired, malformed-envelope.
    """
    if env.alg != SIGNATURE_ALG:
        raise VerifyFailure(VerifyFailure.MALFORMED, f"unsupported algorithm {env.alg!r}")
    try:
        chain = load_pem_certs("".join(env.chain_pem).encode("ascii"))
    except ValueError as exc:
        raise VerifyFailure(VerifyFailure.MALFORMED, f"bad chain PEM: {exc}") from exc
    if not chain:
        raise VerifyFailure(VerifyFailure.MALFORMED, "empty certificate chain")
    leaf, intermediates = chain[0], chain[1:]

    if cert_dn(leaf) != env.signer_dn:
        raise VerifyFailure(VerifyFailure.BAD_SIGNATURE, "signer DN does not match certificate subject")
    try:
        leaf.public_key().verify(env.signature, env.payload, ec.ECDSA(hashes.SHA256()))
    except Exception as exc:
        raise VerifyFailure(VerifyFailure.BAD_SIGNATURE, "signature does not verify") from exc

    now = at_time or _utcnow()
    if now < leaf.not_valid_before_utc or now > leaf.not_valid_after_utc:
        raise VerifyFailure(VerifyFailure.EXPIRED, "certificate outside its validity window")
    try:
        verifier = PolicyBuilder().store(anchors.store()).time(now).build_client_verifier()
        verifier.verify(leaf, intermediates)
    except VerificationError as exc:
        raise VerifyFailure(VerifyFailure.UNTRUSTED_CHAIN, str(exc)) from exc

    return VerifiedIdentity(dn=cert_dn(leaf), role=cert_role(leaf), certificate=leaf)


def verify_job_envelope(env: SignedEnvelope, anchors: TrustAnchors,
                        at_time: Optional[datetime.datetime] = None) -> tuple[VerifiedIdentity, ajo.AbstractJob]:
    """Verify an envelope carrying a job, including its nested sub-job
    envelopes.

    Beyond the signature itself this pins the nesting discipline: every
    remote-targeted sub-group must come with a nested envelope whose
    payload is exactly that sub-group re-rooted, signed by the same user;
    stray extra envelopes are refused. A relay that swaps or edits any
    nested envelope is detected here.
    """
    ident = verify(env, anchors, at_time)
    try:
        job = ajo.from_canonical(env.payload)
    except (ValueError, KeyError, TypeError) as exc:
        raise VerifyFailure(VerifyFailure.MALFORMED, f"payload is not a job document: {exc}") from exc

    expected = dict(ajo.iter_remote_groups(job.root))
    if set(env.subenvelopes) != set(expected):
        raise VerifyFailure(
            VerifyFailure.MALFORMED,
            f"sub-envelope paths {sorted(env.subenvelopes)} != remote sub-groups {sorted(expected)}",
        )
    for path, subgroup in expected.items():
        nested = env.subenvelopes[path]
        if nested.signer_dn != env.signer_dn:
            raise VerifyFailure(VerifyFailure.BAD_SIGNATURE, f"sub-job {path} signed by a different identity")
        want = ajo.canonical_bytes(ajo.AbstractJob(root=subgroup, project=job.project))
        if nested.payload != want:
            raise VerifyFailure(VerifyFailure.BAD_SIGNATURE, f"sub-job {path} payload does not match the parent job")
        verify_job_envelope(nested, anchors, at_time)
    return ident, job
