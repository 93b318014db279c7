"""Framed request/response protocol over mutually authenticated TLS.

Frame layout (all integers big-endian)::

    magic      4 bytes  "UPL1"
    type       1 byte   message type
    ext_len    2 bytes  header-extension length
    ext        ext_len bytes, JSON object (routing metadata only)
    body_len   4 bytes  payload length, <= 64 MiB
    body       body_len bytes

Payload bytes are opaque to relays: gateways may only touch the header
extension, never the body: detached signatures must survive the hop.

A frame of type FileStreamFollows introduces a chunked byte stream on the
same connection::

    repeat:  chunk_len (4 bytes, > 0) + chunk bytes
    end:     chunk_len == 0, then 32 raw bytes: SHA-256 of the streamed bytes

One request/response exchange is in flight per connection at a time.
"""

from __future__ import annotations

import hashlib
import io
import json
import socket
import ssl
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import BinaryIO, Callable, Optional

from . import pki

MAGIC = b"UPL1"
HEADER_LEN = 4 + 1 + 2  # magic + type + ext_len
MAX_PAYLOAD = 64 * 1024 * 1024
MAX_EXT = 64 * 1024
DEFAULT_CHUNK = 64 * 1024
DIGEST_LEN = 32


class MessageType(IntEnum):
    SUBMIT_JOB = 1
    QUERY_STATUS = 2
    FETCH_OUTPUT = 3
    ABORT_JOB = 4
    LIST_VSITES = 5
    GET_RESOURCES = 6
    REGISTER_NJS = 7
    RESERVE_SLOTS = 8
    CONFIRM_RESERVATION = 9
    RELEASE_RESERVATION = 10
    FILE_STREAM_FOLLOWS = 11
    ACK = 12
    ERROR = 13


class FrameError(Exception):
    pass


class BadMagic(FrameError):
    pass


class UnknownMessageType(FrameError):
    pass


class OversizeFrame(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class BadExtension(FrameError):
    pass


class StreamError(Exception):
    pass


class DigestMismatch(StreamError):
    pass


@dataclass
class Frame:
    msg_type: MessageType
    payload: bytes = b""
    ext: dict = field(default_factory=dict)

    def json(self) -> dict:
        try:
            obj = json.loads(self.payload.decode("utf-8")) if self.payload else {}
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FrameError(f"payload is not JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise FrameError("payload is not a JSON object")
        return obj

    @classmethod
    def of(cls, msg_type: MessageType, body: Optional[dict] = None, ext: Optional[dict] = None) -> "Frame":
        payload = json.dumps(body, sort_keys=True).encode("utf-8") if body is not None else b""
        return cls(msg_type=msg_type, payload=payload, ext=ext or {})


def ack(body: Optional[dict] = None) -> Frame:
    return Frame.of(MessageType.ACK, {"ok": True, **(body or {})})


def error_frame(code: str, message: str) -> Frame:
    return Frame.of(MessageType.ERROR, {"code": code, "message": message})


def encode(frame: Frame) -> bytes:
    ext_bytes = json.dumps(frame.ext, sort_keys=True).encode("utf-8") if frame.ext else b""
    if len(ext_bytes) > MAX_EXT:
        raise OversizeFrame(f"extension too large: {len(ext_bytes)}")
    if len(frame.payload) > MAX_PAYLOAD:
        raise OversizeFrame(f"payload too large: {len(frame.payload)}")
    return b"".join([
        MAGIC,
        struct.pack("!BH", int(frame.msg_type), len(ext_bytes)),
        ext_bytes,
        struct.pack("!I", len(frame.payload)),
        frame.payload,
    ])


def decode(data: bytes) -> tuple[Frame, int]:
    """Decode one frame from *data*; returns (frame, bytes consumed).

    Never reads past the declared lengths and never raises anything but
    FrameError subclasses on malformed input.
    """
    if len(data) < HEADER_LEN:
        raise TruncatedFrame(f"need {HEADER_LEN} header bytes, have {len(data)}")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    type_code, ext_len = struct.unpack("!BH", data[4:7])
    try:
        msg_type = MessageType(type_code)
    except ValueError:
        raise UnknownMessageType(f"unknown message type {type_code}") from None
    if ext_len > MAX_EXT:
        raise OversizeFrame(f"extension too large: {ext_len}")
    pos = HEADER_LEN
    if len(data) < pos + ext_len + 4:
        raise TruncatedFrame("frame shorter than declared extension")
    ext: dict = {}
    if ext_len:
        try:
            ext = json.loads(data[pos:pos + ext_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadExtension(f"extension is not JSON: {exc}") from exc
        if not isinstance(ext, dict):
            raise BadExtension("extension is not a JSON object")
    pos += ext_len
    (body_len,) = struct.unpack("!I", data[pos:pos + 4])
    pos += 4
    if body_len > MAX_PAYLOAD:
        raise OversizeFrame(f"payload too large: {body_len}")
    if len(data) < pos + body_len:
        raise TruncatedFrame("frame shorter than declared payload")
    payload = data[pos:pos + body_len]
    return Frame(msg_type=msg_type, payload=payload, ext=ext), pos + body_len


def _read_exact(rfile: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = rfile.read(n - len(buf))
        if not chunk:
            raise TruncatedFrame(f"connection closed, wanted {n} bytes, got {len(buf)}")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(rfile: BinaryIO) -> Frame:
    head = _read_exact(rfile, HEADER_LEN)
    if head[:4] != MAGIC:
        raise BadMagic(f"bad magic {head[:4]!r}")
    type_code, ext_len = struct.unpack("!BH", head[4:7])
    try:
        msg_type = MessageType(type_code)
    except ValueError:
        raise UnknownMessageType(f"unknown message type {type_code}") from None
    if ext_len > MAX_EXT:
        raise OversizeFrame(f"extension too large: {ext_len}")
    ext: dict = {}
    if ext_len:
        raw = _read_exact(rfile, ext_len)
        try:
            ext = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadExtension(f"extension is not JSON: {exc}") from exc
        if not isinstance(ext, dict):
            raise BadExtension("extension is not a JSON object")
    (body_len,) = struct.unpack("!I", _read_exact(rfile, 4))
    if body_len > MAX_PAYLOAD:
        raise OversizeFrame(f"payload too large: {body_len}")
    payload = _read_exact(rfile, body_len) if body_len else b""
    return Frame(msg_type=msg_type, payload=payload, ext=ext)


def write_frame(wfile: BinaryIO, frame: Frame) -> None:
    wfile.write(encode(frame))
    wfile.flush()


def send_stream(wfile: BinaryIO, source: BinaryIO, offset: int = 0,
                chunk_size: int = DEFAULT_CHUNK) -> str:
    """Stream *source* from *offset*; returns the hex digest of the sent bytes."""
    if offset:
        source.seek(offset)
    digest = hashlib.sha256()
    while True:
        chunk = source.read(chunk_size)
        if not chunk:
            break
        digest.update(chunk)
        wfile.write(struct.pack("!I", len(chunk)))
        wfile.write(chunk)
    wfile.write(struct.pack("!I", 0))
    wfile.write(digest.digest())
    wfile.flush()
    return digest.hexdigest()


def send_bytes_stream(wfile: BinaryIO, data: bytes, offset: int = 0,
                      chunk_size: int = DEFAULT_CHUNK) -> str:
    return send_stream(wfile, io.BytesIO(data), offset, chunk_size)


def receive_stream(rfile: BinaryIO, sink: BinaryIO) -> tuple[int, str]:
    """Receive one chunked stream into *sink*.

    Verifies the digest trailer; on mismatch raises DigestMismatch after
    the stream is fully drained (the sink's content must then be
    discarded or the transfer retried by the caller).
    """
    digest = hashlib.sha256()
    total = 0
    while True:
        (n,) = struct.unpack("!I", _read_exact(rfile, 4))
        if n == 0:
            break
        if n > MAX_PAYLOAD:
            raise StreamError(f"chunk too large: {n}")
        chunk = _read_exact(rfile, n)
        digest.update(chunk)
        sink.write(chunk)
        total += n
    trailer = _read_exact(rfile, DIGEST_LEN)
    if trailer != digest.digest():
        raise DigestMismatch(f"stream digest mismatch after {total} bytes")
    return total, digest.hexdigest()


def relay_stream(rfile: BinaryIO, wfile: BinaryIO) -> int:
    """Pump one chunked stream through unmodified (relay duty)."""
    total = 0
    while True:
        head = _read_exact(rfile, 4)
        wfile.write(head)
        (n,) = struct.unpack("!I", head)
        if n == 0:
            break
        if n > MAX_PAYLOAD:
            raise StreamError(f"chunk too large: {n}")
        chunk = _read_exact(rfile, n)
        wfile.write(chunk)
        total += n
    wfile.write(_read_exact(rfile, DIGEST_LEN))
    wfile.flush()
    return total


class CountingReader:
    """Wraps a binary reader and counts bytes consumed (test instrumentation)."""

    def __init__(self, inner: BinaryIO):
        self.inner = inner
        self.count = 0

    def read(self, n: int = -1) -> bytes:
        data = self.inner.read(n)
        self.count += len(data)
        return data


# --- TLS plumbing -----------------------------------------------------------

def _load_cadata(anchors_dir: str | Path) -> str:
    return pki.TrustAnchors.load(anchors_dir).cadata()


def server_ssl_context(cert_file: str | Path, key_file: str | Path,
                       anchors_dir: str | Path) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    ctx.load_cert_chain(str(cert_file), str(key_file))
    ctx.load_verify_locations(cadata=_load_cadata(anchors_dir))
    ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


def client_ssl_context(cert_file: str | Path, key_file: str | Path,
                       anchors_dir: str | Path) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    ctx.load_cert_chain(str(cert_file), str(key_file))
    ctx.load_verify_locations(cadata=_load_cadata(anchors_dir))
    ctx.verify_mode = ssl.CERT_REQUIRED
    # Peer identity is the certificate DN (checked at the application
    # layer); endpoints are loopback addresses, not DNS names.
    ctx.check_hostname = False
    return ctx


def peer_identity(sock: ssl.SSLSocket) -> tuple[str, Optional[str]]:
    """(DN, role) of the authenticated TLS peer."""
    der = sock.getpeercert(binary_form=True)
    if der is None:
        raise ConnectionError("peer presented no certificate")
    from cryptography import x509 as _x509

    cert = _x509.load_der_x509_certificate(der)
    return pki.cert_dn(cert), pki.cert_role(cert)


class ConnectError(Exception):
    pass


class Channel:
    """One framed connection; a single request/response in flight."""

    def __init__(self, sock: ssl.SSLSocket, peer_dn: str, peer_role: Optional[str] = None):
        self.sock = sock
        self.peer_dn = peer_dn
        self.peer_role = peer_role
        self.rfile = sock.makefile("rb")
        self.wfile = sock.makefile("wb")
        self._lock = threading.Lock()

    def send(self, frame: Frame) -> None:
        write_frame(self.wfile, frame)

    def recv(self) -> Frame:
        return read_frame(self.rfile)

    def request(self, frame: Frame) -> Frame:
        with self._lock:
            self.send(frame)
            return self.recv()

    def close(self) -> None:
        for f in (self.wfile, self.rfile):
            try:
                f.close()
            except OSError:
                pass
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self) -> "Channel":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect(host: str, port: int, cert_file: str | Path, key_file: str | Path,
            anchors_dir: str | Path, timeout: float = 10.0) -> Channel:
    """Open a mutually authenticated channel; refusals carry the reason."""
    ctx = client_ssl_context(cert_file, key_file, anchors_dir)
    try:
        raw = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectError(f"cannot reach {host}:{port}: {exc}") from exc
    try:
        sock = ctx.wrap_socket(raw, server_hostname=host)
    except (ssl.SSLError, OSError) as exc:
        raw.close()
        raise ConnectError(f"TLS handshake with {host}:{port} failed: {exc}") from exc
    sock.settimeout(timeout)
    dn, role = peer_identity(sock)
    return Channel(sock, dn, role)


class UplServer:
    """Threaded TLS server: one handler thread per connection.

    The handler gets (session, frame, channel) and either returns a reply
    frame or writes its own frames/streams to the channel and returns
    None. A false ``admit`` verdict closes the connection after sending
    the refusal frame.
    """

    def __init__(
        self,
        host: str,
        port: int,
        cert_file: str | Path,
        key_file: str | Path,
        anchors_dir: str | Path,
        handler: Callable[["Session", Frame, Channel], Optional[Frame]],
        admit: Optional[Callable[["Session"], Optional[Frame]]] = None,
    ):
        self.host = host
        self.port = port
        self._ctx = server_ssl_context(cert_file, key_file, anchors_dir)
        self._handler = handler
        self._admit = admit
        self._sock: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        sock.listen(32)
        sock.settimeout(0.25)
        self._sock = sock
        if self.port == 0:
            self.port = sock.getsockname()[1]
        self._thread = threading.Thread(target=self._accept_loop, name=f"upl-{self.port}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._sock:
            try:
                self._sock.close()
            except OSError:
                pass
        if self._thread:
            self._thread.join(timeout=3)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                raw, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve, args=(raw,), daemon=True).start()

    def _serve(self, raw: socket.socket) -> None:
        try:
            sock = self._ctx.wrap_socket(raw, server_side=True)
        except (ssl.SSLError, OSError):
            raw.close()
            return
        try:
            dn, role = peer_identity(sock)
        except (ConnectionError, ValueError):
            sock.close()
            return
        channel = Channel(sock, dn, role)
        session = Session(dn=dn, role=role)
        try:
            if self._admit:
                refusal = self._admit(session)
                if refusal is not None:
                    channel.send(refusal)
                    return
            while not self._stop.is_set():
                try:
                    frame = channel.recv()
                except (TruncatedFrame, OSError):
                    return  # peer went away
                except FrameError as exc:
                    channel.send(error_frame("protocol-error", str(exc)))
                    return
                try:
                    reply = self._handler(session, frame, channel)
                except Exception as exc:  # handler bug: report, keep serving others
                    try:
                        channel.send(error_frame("internal-error", f"{type(exc).__name__}: {exc}"))
                    except OSError:
                        pass
                    return
                if reply is not None:
                    channel.send(reply)
        except OSError:
            pass
        finally:
            channel.close()


@dataclass
class Session:
    """Authenticated connection state shared across frames."""

    dn: str
    role: Optional[str]
