"""Mock batch system daemon: runs incarnated scripts as local processes.

Stateless by design: every fact a restarted daemon needs is a file in the
spool. Per batch job the spool holds::

    <spool>/<tsi_job_id>/job.json    submit parameters
                         state       QUEUED | RUNNING | DONE | FAILED | CANCELLED
                         stdout, stderr
                         exitcode    written atomically on completion

plus ``submissions.log`` at the spool root (one line per accepted submit,
used by test audits). After a restart, finished jobs are answered from
their exitcode markers; anything else is UNKNOWN and the supervisor
treats previously-running UNKNOWN jobs as lost.

Line protocol (one TCP connection per command)::

    SUBMIT <json {script, workdir, runtime_limit}>   -> OK <id> | ERR <msg>
    STATUS <id>                                      -> OK <STATE> <exitcode|->
    CANCEL <id>                                      -> OK | ERR <msg>
    PUT <json {path, offset?}> ; chunked stream      -> OK ready / OK <digest>
    GET <json {path, offset?}>                       -> OK <size> ; chunked stream

File paths are spool-relative; escapes are refused. Streams use the same
chunk+digest format as the grid file transfer layer. At most K scripts
run concurrently; queued jobs start FIFO as slots free up.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import signal
import socket
import subprocess
import threading
import time
from pathlib import Path
from typing import Optional

from . import upl

QUEUED = "QUEUED"
RUNNING = "RUNNING"
DONE = "DONE"
FAILED = "FAILED"
CANCELLED = "CANCELLED"
UNKNOWN = "UNKNOWN"

TERMINAL = {DONE, FAILED, CANCELLED}

TIMEOUT_EXIT = 124  # wall-clock limit exceeded, after timeout(1)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def resolve_contained(root: Path, rel: str) -> Path:
    """Resolve *rel* under *root*, refusing absolute paths and escapes."""
    if rel.startswith("/") or rel.startswith("\\"):
        raise PermissionError(f"absolute path refused: {rel}")
    candidate = (root / rel).resolve()
    root = root.resolve()
    if candidate != root and root not in candidate.parents:
        raise PermissionError(f"path escapes spool root: {rel}")
    return candidate


class BatchJob:
    def __init__(self, tsi_job_id: str, jobdir: Path, script: str, workdir: str, runtime_limit: int):
        self.tsi_job_id = tsi_job_id
        self.jobdir = jobdir
        self.script = script
        self.workdir = workdir
        self.runtime_limit = runtime_limit
        self.proc: Optional[subprocess.Popen] = None
        self.state = QUEUED
        self.exit_code: Optional[int] = None
        self.cancelled = False


class TsiDaemon:
    def __init__(self, spool_root: str | Path, port: int = 0, host: str = "127.0.0.1",
                 concurrency: int = 2):
        self.spool_root = Path(spool_root)
        self.spool_root.mkdir(parents=True, exist_ok=True)
        self.host = host
        self.port = port
        self.concurrency = concurrency
        self._jobs: dict[str, BatchJob] = {}
        self._queue: list[str] = []
        self._running: set[str] = set()
        self._lock = threading.Lock()
        self._wake = threading.Condition(self._lock)
        self._stop = threading.Event()
        self._sock: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []

    # --- lifecycle -----------------------------------------------------

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        sock.listen(16)
        sock.settimeout(0.25)
        self._sock = sock
        if self.port == 0:
            self.port = sock.getsockname()[1]
        self._threads = [
            threading.Thread(target=self._accept_loop, name="tsi-accept", daemon=True),
            threading.Thread(target=self._scheduler_loop, name="tsi-sched", daemon=True),
        ]
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        self._stop.set()
        with self._wake:
            self._wake.notify_all()
        if self._sock:
            try:
                self._sock.close()
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=3)

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # --- batch engine ----------------------------------------------------

    def _submit(self, script: str, workdir: str, runtime_limit: int) -> str:
        wd = Path(workdir)
        script_path = wd / script if not os.path.isabs(script) else Path(script)
        if not script_path.is_file():
            raise FileNotFoundError(f"script not found in workdir: {script}")
        tsi_job_id = "b-" + secrets.token_hex(6)
        jobdir = self.spool_root / tsi_job_id
        jobdir.mkdir()
        (jobdir / "job.json").write_text(json.dumps({
            "script": str(script_path), "workdir": workdir, "runtime_limit": runtime_limit,
        }))
        _atomic_write(jobdir / "state", QUEUED)
        job = BatchJob(tsi_job_id, jobdir, str(script_path), workdir, runtime_limit)
        with self._wake:
            self._jobs[tsi_job_id] = job
            self._queue.append(tsi_job_id)
            with open(self.spool_root / "submissions.log", "a") as log:
                log.write(f"{time.time():.3f} {tsi_job_id} {script_path}\n")
            self._wake.notify_all()
        return tsi_job_id

    def _scheduler_loop(self) -> None:
        while not self._stop.is_set():
            with self._wake:
                while (not self._queue or len(self._running) >= self.concurrency) and not self._stop.is_set():
                    self._wake.wait(timeout=0.25)
                if self._stop.is_set():
                    return
                tsi_job_id = self._queue.pop(0)
                job = self._jobs[tsi_job_id]
                if job.cancelled:
                    continue
                self._running.add(tsi_job_id)
            threading.Thread(target=self._run_job, args=(job,), daemon=True).start()

    def _run_job(self, job: BatchJob) -> None:
        stdout = open(job.jobdir / "stdout", "wb")
        stderr = open(job.jobdir / "stderr", "wb")
        try:
            job.proc = subprocess.Popen(
                ["/bin/sh", job.script],
                cwd=job.workdir,
                stdout=stdout,
                stderr=stderr,
                start_new_session=True,  # own process group so cancel reaps children
            )
            job.state = RUNNING
            _atomic_write(job.jobdir / "state", RUNNING)
            deadline = time.monotonic() + job.runtime_limit
            timed_out = False
            while True:
                try:
                    job.proc.wait(timeout=0.1)
                    break
                except subprocess.TimeoutExpired:
                    if time.monotonic() > deadline:
                        timed_out = True
                        self._kill_group(job.proc)
                        job.proc.wait()
                        break
            rc = job.proc.returncode
            if job.cancelled:
                job.state = CANCELLED
                _atomic_write(job.jobdir / "state", CANCELLED)
            elif timed_out:
                job.exit_code = TIMEOUT_EXIT
                job.state = FAILED
                _atomic_write(job.jobdir / "exitcode", f"{TIMEOUT_EXIT} timeout")
                _atomic_write(job.jobdir / "state", FAILED)
            else:
                job.exit_code = rc
                job.state = DONE if rc == 0 else FAILED
                _atomic_write(job.jobdir / "exitcode", str(rc))
                _atomic_write(job.jobdir / "state", job.state)
        except OSError as exc:
            job.state = FAILED
            job.exit_code = -1
            _atomic_write(job.jobdir / "exitcode", f"-1 {exc}")
            _atomic_write(job.jobdir / "state", FAILED)
        finally:
            stdout.close()
            stderr.close()
            with self._wake:
                self._running.discard(job.tsi_job_id)
                self._wake.notify_all()

    @staticmethod
    def _kill_group(proc: subprocess.Popen) -> None:
        try:
            os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass

    def _status(self, tsi_job_id: str) -> tuple[str, Optional[int]]:
        with self._lock:
            job = self._jobs.get(tsi_job_id)
        if job is not None:
            return job.state, job.exit_code
        # not in memory: recover what the spool remembers
        jobdir = self.spool_root / tsi_job_id
        exitcode_file = jobdir / "exitcode"
        state_file = jobdir / "state"
        if exitcode_file.exists():
            first = exitcode_file.read_text().split()
            rc = int(first[0])
            state = state_file.read_text().strip() if state_file.exists() else (DONE if rc == 0 else FAILED)
            if state not in TERMINAL:
                state = DONE if rc == 0 else FAILED
            return state, rc
        if state_file.exists() and state_file.read_text().strip() == CANCELLED:
            return CANCELLED, None
        return UNKNOWN, None

    def _cancel(self, tsi_job_id: str) -> None:
        with self._wake:
            job = self._jobs.get(tsi_job_id)
            if job is None:
                # restarted daemon: mark the marker so status answers CANCELLED
                jobdir = self.spool_root / tsi_job_id
                if not jobdir.is_dir():
                    raise KeyError(tsi_job_id)
                if not (jobdir / "exitcode").exists():
                    _atomic_write(jobdir / "state", CANCELLED)
                return
            job.cancelled = True
            if job.tsi_job_id in self._queue:
                self._queue.remove(job.tsi_job_id)
                job.state = CANCELLED
                _atomic_write(job.jobdir / "state", CANCELLED)
                return
        if job.proc is not None and job.state == RUNNING:
            self._kill_group(job.proc)

    # --- protocol ----------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._handle_conn, args=(conn,), daemon=True).start()

    def _handle_conn(self, conn: socket.socket) -> None:
        conn.settimeout(30)
        rfile = conn.makefile("rb")
        wfile = conn.makefile("wb")

        def reply(line: str) -> None:
            wfile.write(line.encode("utf-8") + b"\n")
            wfile.flush()

        try:
            while True:
                line = rfile.readline()
                if not line:
                    return
                try:
                    self._dispatch(line.decode("utf-8", "replace").strip(), rfile, wfile, reply)
                except (PermissionError, FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as exc:
                    reply(f"ERR {type(exc).__name__}: {exc}")
                except upl.StreamError as exc:
                    reply(f"ERR stream: {exc}")
        except OSError:
            pass
        finally:
            for f in (wfile, rfile):
                try:
                    f.close()
                except OSError:
                    pass
            conn.close()

    def _dispatch(self, line: str, rfile, wfile, reply) -> None:
        if not line:
            return
        verb, _, rest = line.partition(" ")
        verb = verb.upper()
        if verb == "SUBMIT":
            req = json.loads(rest)
            tsi_job_id = self._submit(
                script=req["script"],
                workdir=req["workdir"],
                runtime_limit=int(req.get("runtime_limit", 3600)),
            )
            reply(f"OK {tsi_job_id}")
        elif verb == "STATUS":
            state, rc = self._status(rest.strip())
            reply(f"OK {state} {rc if rc is not None else '-'}")
        elif verb == "CANCEL":
            self._cancel(rest.strip())
            reply("OK")
        elif verb == "PUT":
            req = json.loads(rest)
            target = resolve_contained(self.spool_root, req["path"])
            offset = int(req.get("offset", 0))
            target.parent.mkdir(parents=True, exist_ok=True)
            reply("OK ready")
            mode = "r+b" if target.exists() and offset else "wb"
            with open(target, mode) as sink:
                if offset:
                    sink.truncate(offset)
                    sink.seek(offset)
                _, digest = upl.receive_stream(rfile, sink)
            reply(f"OK {digest}")
        elif verb == "GET":
            req = json.loads(rest)
            source = resolve_contained(self.spool_root, req["path"])
            if not source.is_file():
                raise FileNotFoundError(req["path"])
            offset = int(req.get("offset", 0))
            size = source.stat().st_size
            reply(f"OK {size}")
            with open(source, "rb") as f:
                upl.send_stream(wfile, f, offset=offset)
        else:
            reply(f"ERR unknown command {verb!r}")


class TsiError(Exception):
    pass


class TsiClient:
    """One connection per command: the daemon keeps no session state."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def _connect(self) -> socket.socket:
        return socket.create_connection((self.host, self.port), timeout=self.timeout)

    def _roundtrip(self, line: str) -> str:
        with self._connect() as conn:
            conn.sendall(line.encode("utf-8") + b"\n")
            rfile = conn.makefile("rb")
            reply = rfile.readline().decode("utf-8").strip()
        return self._check(reply)

    @staticmethod
    def _check(reply: str) -> str:
        if reply.startswith("OK"):
            return reply[2:].strip()
        raise TsiError(reply[3:].strip() or "daemon refused")

    def submit(self, script: str, workdir: str, runtime_limit: int) -> str:
        req = json.dumps({"script": script, "workdir": workdir, "runtime_limit": runtime_limit})
        return self._roundtrip(f"SUBMIT {req}")

    def status(self, tsi_job_id: str) -> tuple[str, Optional[int]]:
        out = self._roundtrip(f"STATUS {tsi_job_id}")
        state, _, rc = out.partition(" ")
        return state, (None if rc.strip() == "-" else int(rc))

    def cancel(self, tsi_job_id: str) -> None:
        self._roundtrip(f"CANCEL {tsi_job_id}")

    def put_file(self, path: str, source, offset: int = 0) -> str:
        with self._connect() as conn:
            rfile = conn.makefile("rb")
            wfile = conn.makefile("wb")
            req = json.dumps({"path": path, "offset": offset})
            wfile.write(f"PUT {req}\n".encode("utf-8"))
            wfile.flush()
            self._check(rfile.readline().decode("utf-8").strip())
            upl.send_stream(wfile, source, offset=offset)
            return self._check(rfile.readline().decode("utf-8").strip())

    def get_file(self, path: str, sink, offset: int = 0) -> int:
        with self._connect() as conn:
            rfile = conn.makefile("rb")
            wfile = conn.makefile("wb")
            req = json.dumps({"path": path, "offset": offset})
            wfile.write(f"GET {req}\n".encode("utf-8"))
            wfile.flush()
            self._check(rfile.readline().decode("utf-8").strip())
            total, _ = upl.receive_stream(rfile, sink)
            return total


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gridlet-tsi", description="mock batch system daemon")
    parser.add_argument("--spool", required=True, help="spool root directory")
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--concurrency", type=int, default=2, help="simultaneous script slots")
    args = parser.parse_args(argv)
    daemon = TsiDaemon(args.spool, port=args.port, host=args.host, concurrency=args.concurrency)
    print(f"tsi: listening on {args.host}:{args.port}, spool {args.spool}, K={args.concurrency}", flush=True)
    daemon.serve_forever()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
