"""Local HTTP/JSON facade over a client session, for the dashboard.

Loopback-only by default. Routes::

    GET  /jobs                        ledger
    POST /jobs                        {workflow, gateway, vsite, title?, agreement?}
    GET  /jobs/<id>/status            status recursion tree
    POST /jobs/<id>/abort
    GET  /jobs/<id>/output?task=&stream=
    GET  /vsites?gateway=
    POST /broker                      {processors, runtime, memory, software?}
    POST /reserve                     {sites: [...], processors, duration}

Rejections map onto HTTP: compile errors 400, rejected-unverified 401,
rejected-unauthorized 403, unknown job 404, rejected-unsatisfiable 422,
transport failures 502. Reads run concurrently; submissions serialize
over the shared session.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

from .client import ClientSession, RejectionError, TransportError
from .workflow import CompileError, parse_memory

STATUS_FOR_CODE = {
    "rejected-unverified": 401,
    "rejected-unauthorized": 403,
    "unknown-job": 404,
    "not-found": 404,
    "rejected-unsatisfiable": 422,
    "unknown-vsite": 404,
    "vsite-unavailable": 502,
}


class BridgeServer:
    def __init__(self, session: ClientSession, host: str = "127.0.0.1", port: int = 8070,
                 ui_dir: Optional[Path] = None):
        self.session = session
        self.submit_lock = threading.Lock()
        self.ui_dir = ui_dir
        bridge = self

        class Handler(BaseHTTPRequestHandler):
            daemon_threads = True

            def log_message(self, fmt, *args):  # quiet by default
                pass

            # -- helpers --------------------------------------------------

            def _send(self, code: int, payload, content_type="application/json"):
                body = payload if isinstance(payload, bytes) else json.dumps(payload).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", content_type)
                self.send_header("Content-Length", str(len(body)))
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                self.wfile.write(body)

            def _error(self, code: int, reason: str, detail: str = ""):
                self._send(code, {"error": reason, "detail": detail})

            def _json_body(self) -> dict:
                length = int(self.headers.get("Content-Length", 0))
                if length == 0:
                    return {}
                data = self.rfile.read(length)
                doc = json.loads(data.decode("utf-8"))
                if not isinstance(doc, dict):
                    raise ValueError("body must be a JSON object")
                return doc

            def do_OPTIONS(self):
                self.send_response(204)
                self.send_header("Access-Control-Allow-Origin", "*")
                self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
                self.send_header("Access-Control-Allow-Headers", "Content-Type")
                self.end_headers()

            def do_GET(self):
                try:
                    bridge._get(self)
                except (RejectionError, TransportError, ValueError) as exc:
                    bridge._map_error(self, exc)

            def do_POST(self):
                try:
                    bridge._post(self)
                except (RejectionError, TransportError, CompileError, ValueError) as exc:
                    bridge._map_error(self, exc)

        self._server = ThreadingHTTPServer((host, port), Handler)
        self.host = host
        self.port = self._server.server_address[1]
        self._thread: Optional[threading.Thread] = None

    # --- request logic ------------------------------------------------------

    def _map_error(self, handler, exc) -> None:
        if isinstance(exc, CompileError):
            handler._error(400, "compile-error", str(exc))
        elif isinstance(exc, RejectionError):
            handler._error(STATUS_FOR_CODE.get(exc.code, 500), exc.code, exc.reason)
        elif isinstance(exc, TransportError):
            handler._error(502, "transport", str(exc))
        else:
            handler._error(400, "bad-request", str(exc))

    def _get(self, handler) -> None:
        url = urlparse(handler.path)
        parts = [p for p in url.path.split("/") if p]
        query = {k: v[0] for k, v in parse_qs(url.query).items()}

        if parts == ["jobs"]:
            handler._send(200, {"jobs": [h.to_dict() for h in self.session.ledger()]})
            return
        if len(parts) == 3 and parts[0] == "jobs" and parts[2] == "status":
            handle = self.session.find_handle(parts[1])
            handler._send(200, {"job_id": handle.job_id, "status": self.session.status(handle)})
            return
        if len(parts) == 3 and parts[0] == "jobs" and parts[2] == "output":
            handle = self.session.find_handle(parts[1])
            task = query.get("task", "")
            stream = query.get("stream", "stdout")
            import tempfile

            with tempfile.TemporaryDirectory() as tmp:
                path = self.session.fetch(handle, task, stream=stream, dest=Path(tmp) / "out")
                data = path.read_bytes()
            handler._send(200, data, content_type="text/plain; charset=utf-8")
            return
        if parts == ["vsites"]:
            gateway = query.get("gateway")
            gateways = [gateway] if gateway else sorted(self.session.known_usites())
            seen = {}
            for gw in gateways:
                try:
                    for reg in self.session.list_vsites(gw):
                        seen.setdefault(reg["vsite_name"], reg)
                except (TransportError, RejectionError):
                    continue
            handler._send(200, {"vsites": [seen[k] for k in sorted(seen)]})
            return
        if self.ui_dir and (parts[:1] == ["ui"] or not parts):
            self._serve_ui(handler, parts[1:] if parts else ["index.html"])
            return
        handler._error(404, "no-route", handler.path)

    def _post(self, handler) -> None:
        url = urlparse(handler.path)
        parts = [p for p in url.path.split("/") if p]
        body = handler._json_body()

        if parts == ["jobs"]:
            workflow = body.get("workflow")
            if workflow is None:
                raise ValueError("body needs a workflow document under 'workflow'")
            gateway = body.get("gateway")
            vsite = body.get("vsite")
            if not gateway or not vsite:
                raise ValueError("body needs gateway and vsite")
            with self.submit_lock:
                handle = self.session.submit(workflow, gateway=gateway, vsite=vsite,
                                             agreement_id=body.get("agreement"),
                                             title=body.get("title", ""))
            handler._send(201, {"job": handle.to_dict()})
            return
        if len(parts) == 3 and parts[0] == "jobs" and parts[2] == "abort":
            handle = self.session.find_handle(parts[1])
            handler._send(200, self.session.abort(handle))
            return
        if parts == ["broker"]:
            from .ajo import ResourceRequest

            request = ResourceRequest(
                processors=int(body.get("processors", 1)),
                runtime_limit=int(body.get("runtime", 300)),
                memory=parse_memory(body.get("memory", "256M"), "memory"),
                required_software=tuple(body.get("software", ())),
            )
            matches = self.session.broker(request, gateways=body.get("gateways"))
            handler._send(200, {"matches": [m.to_dict() for m in matches]})
            return
        if parts == ["reserve"]:
            agreement = self.session.reserve(
                vsites=list(body["sites"]),
                processors=body.get("processors", 1),
                duration=float(body["duration"]),
                gateways=body.get("gateways"),
            )
            code = 200 if agreement.state == "CONFIRMED" else 409
            handler._send(code, {"agreement": agreement.to_dict()})
            return
        handler._error(404, "no-route", handler.path)

    def _serve_ui(self, handler, rel_parts: list) -> None:
        rel = "/".join(rel_parts) or "index.html"
        target = (self.ui_dir / rel).resolve()
        if self.ui_dir.resolve() not in target.parents and target != self.ui_dir.resolve():
            handler._error(404, "no-route", rel)
            return
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            handler._error(404, "no-route", rel)
            return
        types = {".html": "text/html", ".js": "text/javascript", ".css": "text/css",
                 ".json": "application/json", ".map": "application/json"}
        handler._send(200, target.read_bytes(), content_type=types.get(target.suffix, "application/octet-stream"))

    # --- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="bridge", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=3)
