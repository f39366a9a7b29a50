"""JSON chat-completions client over HTTPS, usable as judge or key-info extractor."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Callable, Optional

import httpx

from coa.backends.base import RetryPolicy, call_with_retry
from coa.errors import BackendError, ConfigError

log = logging.getLogger(__name__)


def _digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class ChatCompletionsClient:
    """POST ``{base_url}/chat/completions`` and return the first choice's content.

    Transport errors, 429 and 5xx responses are retried with exponential
    backoff; other 4xx responses fail immediately. Each exchange appends one
    line of request/response SHA-256 digests to ``log_dir/remote_calls.jsonl``.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key: Optional[str] = None,
        api_key_env: str = "COA_API_KEY",
        temperature: float = 0.0,
        timeout: float = 60.0,
        retry: RetryPolicy = RetryPolicy(),
        max_concurrency: Optional[int] = 4,
        log_dir: str | os.PathLike | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not base_url or not model:
            raise ConfigError("remote backend needs both base_url and model")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(api_key_env)
        self.temperature = temperature
        self.retry = retry
        self.max_concurrency = max_concurrency
        self.log_dir = Path(log_dir) if log_dir else None
        self.name = f"chat[{model}]"
        self._sleep = sleep
        self._log_lock = threading.Lock()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _log(self, request: bytes, response: bytes, status: int) -> None:
        if self.log_dir is None:
            return
        self.log_dir.mkdir(parents=True, exist_ok=True)
        row = {"backend": self.name, "status": status,
               "request_sha256": _digest(request), "response_sha256": _digest(response)}
        with self._log_lock, open(self.log_dir / "remote_calls.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    def _post_once(self, body: bytes) -> str:
        resp = self._client.post(f"{self.base_url}/chat/completions", content=body)
        self._log(body, resp.content, resp.status_code)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"{self.name}: HTTP {resp.status_code}: {resp.text[:200]}",
                               backend=self.name)
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"{self.name}: malformed response body: {exc}", backend=self.name) from exc

    def chat(self, messages: list[dict[str, str]]) -> str:
        body = json.dumps({"model": self.model, "messages": messages,
                           "temperature": self.temperature}, sort_keys=True).encode("utf-8")
        return call_with_retry(lambda: self._post_once(body), policy=self.retry, backend=self.name,
                               retry_on=(_Transient, httpx.TransportError), sleep=self._sleep)


class _Transient(Exception):
    pass
