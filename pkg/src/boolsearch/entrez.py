"""Rate-limited, cached PubMed ``esearch`` client and the result-count validator."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Callable

import httpx

from .matcher import RetrievalResult

__all__ = [
    "ApiError",
    "EntrezClient",
    "EntrezConfig",
    "EntrezError",
    "NetworkError",
    "QuerySyntaxRejected",
    "RateLimiter",
    "ValidityPolicy",
    "validate_count",
]

log = logging.getLogger(__name__)

EUTILS = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"


class EntrezError(RuntimeError):
    pass


class NetworkError(EntrezError):
    pass


class ApiError(EntrezError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class QuerySyntaxRejected(EntrezError):
    """PubMed refused the query itself; retrying will not help."""


@dataclass(frozen=True)
class EntrezConfig:
    base_url: str = EUTILS
    api_key: str | None = None
    max_results: int = 100_000
    rate_limit: float = 3.0
    timeout: float = 30.0
    retry_backoff: tuple[float, ...] = (1.0, 2.0, 4.0)
    date_type: str = "edat"
    cache_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.rate_limit <= 0:
            raise ValueError("rate_limit must be positive")
        if self.max_results < 1:
            raise ValueError("max_results must be at least 1")
        if self.date_type not in ("edat", "pdat", "mdat"):
            raise ValueError(f"unsupported date type {self.date_type!r}")


@dataclass(frozen=True)
class ValidityPolicy:
    min_count: int = 1
    max_count: int = 1_000_000

    def __post_init__(self) -> None:
        if self.min_count < 1:
            raise ValueError("min_count must be at least 1")
        if self.max_count < self.min_count:
            raise ValueError("max_count must be >= min_count")


def validate_count(result: RetrievalResult | int, policy: ValidityPolicy = ValidityPolicy()) -> bool:
    count = result if isinstance(result, int) else result.count
    return policy.min_count <= count <= policy.max_count


class RateLimiter:
    """Spaces request starts at least ``1 / rate`` seconds apart, across threads."""

    def __init__(
        self,
        rate: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = float("-inf")

    def wait(self) -> None:
        with self._lock:
            now = self._clock()
            if now < self._next:
                self._sleep(self._next - now)
                now = self._next
            self._next = now + self.interval


def _atomic_write(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, path)


class EntrezClient:
    """Thin ``esearch.fcgi`` wrapper.

    Every request passes through one rate gate; transient failures (network
    errors, HTTP 429 and 5xx) are retried following ``retry_backoff``.
    Responses are cached as one JSON file per request when ``cache_dir`` is
    configured, so reruns do not hit the network.
    """

    def __init__(
        self,
        config: EntrezConfig = EntrezConfig(),
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self._http = httpx.Client(timeout=config.timeout, transport=transport)
        self._sleep = sleep
        self._gate = RateLimiter(config.rate_limit, clock=clock, sleep=sleep)
        self.requests_sent = 0

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "EntrezClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def params(self, query_text: str, search_date: date | None) -> dict[str, str]:
        params = {
            "db": "pubmed",
            "term": query_text,
            "retmax": str(self.config.max_results),
            "retmode": "json",
        }
        if search_date is not None:
            params.update(
                datetype=self.config.date_type,
                mindate="1900/01/01",
                maxdate=search_date.strftime("%Y/%m/%d"),
            )
        if self.config.api_key:
            params["api_key"] = self.config.api_key
        return params

    def cache_key(self, query_text: str, search_date: date | None) -> str:
        raw = json.dumps(
            [query_text, search_date.isoformat() if search_date else None,
             self.config.max_results, self.config.date_type],
        )
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    def _get(self, params: dict[str, str]) -> dict:
        url = f"{self.config.base_url.rstrip('/')}/esearch.fcgi"
        delays = list(self.config.retry_backoff)
        attempt = 0
        while True:
            self._gate.wait()
            self.requests_sent += 1
            try:
                resp = self._http.get(url, params=params)
            except httpx.TransportError as exc:
                problem: Exception = NetworkError(f"esearch request failed: {exc}")
            else:
                if resp.status_code == 200:
                    try:
                        payload = resp.json()
                    except ValueError:
                        raise ApiError("esearch returned non-JSON body", 200) from None
                    error = str(payload.get("error", ""))
                    if not error or "rate limit" not in error.lower():
                        return payload
                    problem = NetworkError(f"esearch throttled: {error}")
                elif resp.status_code == 429 or resp.status_code >= 500:
                    problem = NetworkError(f"esearch HTTP {resp.status_code}")
                else:
                    raise ApiError(f"esearch HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
            if attempt >= len(delays):
                raise problem
            log.warning("%s; retrying in %.1fs", problem, delays[attempt])
            self._sleep(delays[attempt])
            attempt += 1

    @staticmethod
    def parse_response(payload: dict) -> RetrievalResult:
        if "error" in payload:
            raise ApiError(f"esearch error: {payload['error']}")
        result = payload.get("esearchresult")
        if not isinstance(result, dict):
            raise ApiError("esearch response lacks 'esearchresult'")
        if "ERROR" in result:
            raise QuerySyntaxRejected(str(result["ERROR"]))
        try:
            count = int(result["count"])
            ids = [str(i) for i in result.get("idlist", [])]
        except (KeyError, TypeError, ValueError):
            raise ApiError("esearch response has no usable count/idlist") from None
        return RetrievalResult(frozenset(ids), count, truncated=count > len(ids))

    def esearch(self, query_text: str, search_date: date | None = None) -> RetrievalResult:
        if not query_text.strip():
            raise ValueError("query text must be non-empty")
        cache_path = None
        if self.config.cache_dir is not None:
            cache_path = Path(self.config.cache_dir) / f"{self.cache_key(query_text, search_date)}.json"
            if cache_path.exists():
                return self.parse_response(json.loads(cache_path.read_text(encoding="utf-8"))["response"])
        payload = self._get(self.params(query_text, search_date))
        if cache_path is not None:
            _atomic_write(
                cache_path,
                {"query": query_text,
                 "search_date": search_date.isoformat() if search_date else None,
                 "response": payload},
            )
        return self.parse_response(payload)

    search = esearch
