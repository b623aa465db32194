"""In-process stub of the fine-tune/completion service for offline testing.

Implements the four endpoints the client speaks (file upload, job create,
job status, completion) with deterministic behavior: jobs advance one state
per status poll and completion scores derive from a seeded hash of the
prompt plus the positive-label share of the job's training file. Fault
injection (rate limiting, auth enforcement, forced failure) is configurable
for exercising the client's retry and error paths.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .remote import parse_training_file
from .textualize import PromptTemplate


@dataclass
class StubState:
    seed: int = 0
    require_auth: bool = False
    rate_limit_first: int = 0     # 429 for this many requests, then serve
    fail_jobs: bool = False       # jobs reach the failed state
    polls_until_done: int = 2
    template: PromptTemplate = field(default_factory=PromptTemplate)
    files: dict = field(default_factory=dict)
    jobs: dict = field(default_factory=dict)
    requests_seen: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)


def _prompt_score(state: StubState, model_id: str, prompt: str) -> float:
    """Deterministic pseudo-probability for a (model, prompt) pair."""
    prior = state.jobs.get(model_id, {}).get("positive_share", 0.5)
    digest = hashlib.sha256(f"{state.seed}|{model_id}|{prompt}".encode("utf-8")).digest()
    jitter = (int.from_bytes(digest[:8], "big") / 2 ** 64 - 0.5) * 0.4
    return min(max(prior + jitter, 0.01), 0.99)


class _StubHandler(BaseHTTPRequestHandler):
    state: StubState  # set by make_server

    def log_message(self, *args):  # silence default stderr chatter
        pass

    def _send(self, code: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _gate(self) -> bool:
        """Shared fault-injection checks; returns False when already handled."""
        state = self.state
        with state.lock:
            state.requests_seen += 1
            if state.rate_limit_first > 0:
                state.rate_limit_first -= 1
                self._send(429, {"error": "rate limited, slow down"})
                return False
        if state.require_auth:
            header = self.headers.get("Authorization", "")
            if not header.startswith("Bearer ") or not header[len("Bearer "):].strip():
                self._send(401, {"error": "missing or invalid credentials"})
                return False
        return True

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        return json.loads(self.rfile.read(length).decode("utf-8")) if length else {}

    def do_POST(self):
        if not self._gate():
            return
        state = self.state
        if self.path == "/files":
            body = self._body()
            with state.lock:
                file_id = f"file-{len(state.files) + 1:04d}"
                state.files[file_id] = body.get("content", "")
            self._send(200, {"file_id": file_id})
        elif self.path == "/fine-tunes":
            body = self._body()
            file_id = body.get("file_id")
            if file_id not in state.files:
                self._send(500, {"error": f"unknown file {file_id}"})
                return
            pairs = parse_training_file(state.files[file_id].encode("utf-8"))
            positive = " " + state.template.positive_word
            share = sum(1 for _, completion in pairs if completion == positive) / len(pairs) if pairs else 0.5
            with state.lock:
                job_id = f"job-{len(state.jobs) + 1:04d}"
                state.jobs[job_id] = {
                    "state": "pending",
                    "polls": 0,
                    "positive_share": share,
                    "model_id": f"model-{job_id}",
                }
                # the fine-tuned model answers completions under its model id
                state.jobs[state.jobs[job_id]["model_id"]] = {"positive_share": share}
            self._send(200, {"job_id": job_id, "state": "pending"})
        elif self.path == "/completions":
            body = self._body()
            model_id = body.get("model", "")
            prompt = body.get("prompt", "")
            score = _prompt_score(state, model_id, prompt)
            pos_token = " " + state.template.positive_word.split()[0]
            neg_token = " " + state.template.negative_word.split()[0]
            completion = pos_token if score >= 0.5 else neg_token
            payload = {"completion": completion}
            if body.get("probabilities"):
                payload["token_probabilities"] = {pos_token: score, neg_token: 1.0 - score}
            self._send(200, payload)
        else:
            self._send(500, {"error": f"unknown path {self.path}"})

    def do_GET(self):
        if not self._gate():
            return
        state = self.state
        if self.path.startswith("/fine-tunes/"):
            job_id = self.path.rsplit("/", 1)[1]
            job = state.jobs.get(job_id)
            if job is None or "state" not in job:
                self._send(500, {"error": f"unknown job {job_id}"})
                return
            with state.lock:
                job["polls"] += 1
                if job["state"] == "pending":
                    job["state"] = "running"
                elif job["state"] == "running" and job["polls"] >= state.polls_until_done:
                    job["state"] = "failed" if state.fail_jobs else "succeeded"
            payload = {"job_id": job_id, "state": job["state"]}
            if job["state"] == "succeeded":
                payload["model_id"] = job["model_id"]
            if job["state"] == "failed":
                payload["message"] = "training diverged (stub failure mode)"
            self._send(200, payload)
        else:
            self._send(500, {"error": f"unknown path {self.path}"})


def make_server(port: int = 0, state: StubState | None = None) -> ThreadingHTTPServer:
    """Build (but do not start) a stub server; port 0 picks a free port."""
    state = state or StubState()
    handler = type("BoundStubHandler", (_StubHandler,), {"state": state})
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    server.stub_state = state
    return server


class StubServerThread:
    """Run the stub server on a background thread (context manager)."""

    def __init__(self, state: StubState | None = None):
        self.server = make_server(0, state)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def __enter__(self) -> "StubServerThread":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()


def serve_forever(port: int, seed: int = 0, require_auth: bool = False) -> None:
    """Blocking entry point used by the command-line subcommand."""
    server = make_server(port, StubState(seed=seed, require_auth=require_auth))
    host, bound_port = server.server_address
    print(f"stub fine-tune service listening on http://{host}:{bound_port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
