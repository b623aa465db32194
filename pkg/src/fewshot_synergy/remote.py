"""Client for an external fine-tune/completion service.

The workflow mirrors a hosted fine-tuning API: upload a line-delimited
prompt/completion training file, create a fine-tune job, poll until it
reaches a terminal state, then classify prompts through 1-token completions
with per-token probabilities. A bundled stub server (``stub_server``)
implements the same endpoints for offline testing.

Credentials come from an environment variable and are never written to
manifests, logs, or error messages.
"""

from __future__ import annotations

import json
import os
import time
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass, field
from typing import Sequence

from .errors import (
    AuthenticationError,
    EmptyTrainingSetError,
    RateLimitExceededError,
    RemoteServerError,
    RemoteTimeoutError,
    UnparseableAnswerWarning,
)
from .textualize import PromptTemplate, SerializedExample

DEFAULT_API_KEY_ENV = "SYNERGY_API_KEY"
TERMINAL_STATES = ("succeeded", "failed")

# Auto rule for the learning-rate multiplier when the caller does not pin one:
# tiny shot sets get the most conservative multiplier.
LR_MULTIPLIER_THRESHOLDS = ((32, 0.05), (128, 0.1))
LR_MULTIPLIER_LARGE = 0.2


def choose_lr_multiplier(n_examples: int) -> float:
    for limit, multiplier in LR_MULTIPLIER_THRESHOLDS:
        if n_examples < limit:
            return multiplier
    return LR_MULTIPLIER_LARGE


@dataclass(frozen=True)
class FineTuneRequest:
    examples: Sequence[SerializedExample]
    base_model: str = "base-small"
    epochs: int = 4
    lr_multiplier: float | None = None  # None selects by training-set size

    def resolved_lr_multiplier(self) -> float:
        if self.lr_multiplier is not None:
            if self.lr_multiplier not in (0.05, 0.1, 0.2):
                raise ValueError(f"lr_multiplier must be one of 0.05, 0.1, 0.2, got {self.lr_multiplier}")
            return self.lr_multiplier
        return choose_lr_multiplier(len(self.examples))


@dataclass
class RemoteJob:
    job_id: str
    state: str
    model_id: str | None = None
    lr_multiplier: float | None = None
    retries: int = 0
    last_message: str = ""


@dataclass
class ClassifyResult:
    score: float
    used_probabilities: bool
    unparseable: bool = False


def serialize_training_file(examples: Sequence[SerializedExample],
                            template: PromptTemplate = PromptTemplate()) -> bytes:
    """Line-delimited records with exactly two string fields per line.

    Completions must be one of the template's answer words and carry a single
    leading space (the convention the completion endpoint tokenizes against);
    the file ends with a newline.
    """
    examples = list(examples)
    if not examples:
        raise EmptyTrainingSetError("refusing to serialize an empty training set")
    template.validate()
    lines = []
    for ex in examples:
        if ex.completion not in template.answer_words:
            raise ValueError(f"completion {ex.completion!r} is not one of the answer words "
                             f"{template.answer_words}")
        lines.append(json.dumps({"prompt": ex.prompt, "completion": " " + ex.completion}))
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_training_file(payload: bytes) -> list[tuple[str, str]]:
    pairs = []
    for line in payload.decode("utf-8").splitlines():
        if line.strip():
            record = json.loads(line)
            pairs.append((record["prompt"], record["completion"]))
    return pairs


class FineTuneClient:
    """HTTP client with retry/backoff for the fine-tune service endpoints."""

    def __init__(self, endpoint: str, api_key_env: str = DEFAULT_API_KEY_ENV,
                 timeout: float = 60.0, poll_interval: float = 0.05,
                 max_retries: int = 5, backoff: float = 0.05):
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.poll_interval = poll_interval
        self.max_retries = max_retries
        self.backoff = backoff

    def _api_key(self) -> str:
        return os.environ.get(self.api_key_env, "")

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        """One HTTP exchange with bounded retries on rate limiting.

        Error messages keep the server's response body but never the request
        headers, so credentials cannot leak through exceptions or logs.
        """
        url = self.endpoint + path
        payload = json.dumps(body).encode("utf-8") if body is not None else None
        attempt = 0
        while True:
            request = urllib.request.Request(url, data=payload, method=method)
            request.add_header("Content-Type", "application/json")
            request.add_header("Authorization", f"Bearer {self._api_key()}")
            try:
                with urllib.request.urlopen(request, timeout=30.0) as response:
                    return json.loads(response.read().decode("utf-8"))
            except urllib.error.HTTPError as err:
                detail = err.read().decode("utf-8", errors="replace")
                if err.code == 401:
                    raise AuthenticationError("service rejected credentials", last_response=detail) from None
                if err.code == 429:
                    attempt += 1
                    if attempt > self.max_retries:
                        raise RateLimitExceededError(
                            f"rate limited {attempt} times, retry budget exhausted",
                            last_response=detail) from None
                    time.sleep(self.backoff * (2 ** (attempt - 1)))
                    continue
                raise RemoteServerError(f"server returned {err.code}", last_response=detail) from None
            except urllib.error.URLError as err:
                raise RemoteServerError(f"endpoint unreachable: {err.reason}") from None

    def upload_training_file(self, payload: bytes) -> str:
        response = self._request("POST", "/files", {
            "purpose": "fine-tune",
            "content": payload.decode("utf-8"),
        })
        return response["file_id"]

    def submit_and_await(self, request: FineTuneRequest, timeout: float | None = None) -> RemoteJob:
        """Upload the training file, create the job, and poll to completion.

        Polling backs off exponentially from ``poll_interval``. A deadline of
        zero (or expiry) raises :class:`RemoteTimeoutError`; a failed job
        raises :class:`RemoteServerError`.
        """
        deadline_in = self.timeout if timeout is None else timeout
        started = time.monotonic()
        if request.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {request.epochs}")
        multiplier = request.resolved_lr_multiplier()
        if deadline_in <= 0:
            raise RemoteTimeoutError("timeout budget is zero")
        file_id = self.upload_training_file(serialize_training_file(request.examples))
        created = self._request("POST", "/fine-tunes", {
            "file_id": file_id,
            "base_model": request.base_model,
            "epochs": request.epochs,
            "lr_multiplier": multiplier,
        })
        job = RemoteJob(job_id=created["job_id"], state=created["state"], lr_multiplier=multiplier)
        wait = self.poll_interval
        while job.state not in TERMINAL_STATES:
            if time.monotonic() - started > deadline_in:
                raise RemoteTimeoutError(f"job {job.job_id} still {job.state} after {deadline_in}s")
            time.sleep(wait)
            wait = min(wait * 2, 1.0)
            status = self._request("GET", f"/fine-tunes/{job.job_id}")
            job.state = status["state"]
            job.model_id = status.get("model_id")
            job.last_message = status.get("message", "")
        if job.state == "failed":
            raise RemoteServerError(f"job {job.job_id} failed", last_response=job.last_message)
        return job

    def classify(self, model_id: str, prompt: str,
                 template: PromptTemplate = PromptTemplate()) -> ClassifyResult:
        """Positive-class score from a 1-token completion.

        With token probabilities available the score is the normalized mass
        of the positive answer word's first token against the negative's.
        Without them the matched answer word scores 1.0/0.0; an unmatched
        completion is recorded and scored 0.5.
        """
        template.validate()
        response = self._request("POST", "/completions", {
            "model": model_id,
            "prompt": prompt,
            "max_tokens": 1,
            "probabilities": True,
        })
        pos_token = " " + template.positive_word.split()[0]
        neg_token = " " + template.negative_word.split()[0]
        probabilities = response.get("token_probabilities") or {}
        p_pos = float(probabilities.get(pos_token, 0.0))
        p_neg = float(probabilities.get(neg_token, 0.0))
        if p_pos + p_neg > 0.0:
            return ClassifyResult(score=p_pos / (p_pos + p_neg), used_probabilities=True)
        completion = (response.get("completion") or "").strip()
        if completion == template.positive_word.split()[0]:
            return ClassifyResult(score=1.0, used_probabilities=False)
        if completion == template.negative_word.split()[0]:
            return ClassifyResult(score=0.0, used_probabilities=False)
        warnings.warn(f"completion {completion!r} matches neither answer word",
                      UnparseableAnswerWarning)
        return ClassifyResult(score=0.5, used_probabilities=False, unparseable=True)
