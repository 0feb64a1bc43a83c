"""Concurrent, polite, resumable downloading driven by a manifest.

Every state change is appended to a newline-delimited JSON journal and
flushed to disk before the next step, so a killed run can be replayed
and resumed.  Files land under a ``.part`` name and are renamed into
place only after size and checksum checks pass.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from .manifest import ManifestEntry, dumps_manifest

log = logging.getLogger(__name__)

PENDING, IN_FLIGHT, DONE, FAILED = "pending", "in_flight", "done", "failed"


class ConfigError(ValueError):
    pass


class JournalExists(ConfigError):
    pass


class FetchError(Exception):
    def __init__(self, reason: str, transient: bool = True):
        super().__init__(reason)
        self.reason = reason
        self.transient = transient


@dataclass(frozen=True)
class PolitenessPolicy:
    max_global_concurrency: int = 8
    max_per_host_concurrency: int = 4
    bytes_per_second_cap: float | None = None
    max_attempts: int = 5
    base_backoff: float = 0.5
    backoff_factor: float = 2.0
    jitter: bool = True
    timeout: float = 30.0
    chunk_size: int = 65536

    def __post_init__(self):
        for name in ("max_global_concurrency", "max_per_host_concurrency", "max_attempts", "chunk_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.bytes_per_second_cap is not None and self.bytes_per_second_cap <= 0:
            raise ConfigError("bytes_per_second_cap must be positive")
        if self.base_backoff < 0 or self.backoff_factor < 1 or self.timeout <= 0:
            raise ConfigError("backoff and timeout settings out of range")

    def backoff(self, attempt: int, rng: random.Random) -> float:
        """Delay after failed attempt number ``attempt`` (1-based); full jitter draws from [0, cap]."""
        cap = self.base_backoff * self.backoff_factor ** (attempt - 1)
        return rng.uniform(0.0, cap) if self.jitter else cap


class TokenBucket:
    """Byte-rate limiter shared by all workers.

    Callers reserve tokens up front and sleep off any deficit, so over
    any window of length W at most ``capacity + rate * W`` bytes pass.
    """

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ConfigError("rate must be positive")
        self.rate = float(rate)
        self.capacity = float(capacity if capacity is not None else rate / 4.0)
        self._tokens = self.capacity
        self._clock, self._sleep = clock, sleep
        self._last = clock()
        self._lock = threading.Lock()

    def consume(self, n: int) -> float:
        """Take ``n`` tokens, blocking as needed; returns the time slept."""
        with self._lock:
            now = self._clock()
            self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
            self._last = now
            self._tokens -= n
            wait = -self._tokens / self.rate if self._tokens < 0 else 0.0
        if wait > 0:
            self._sleep(wait)
        return wait


@dataclass
class EntryState:
    status: str = PENDING
    attempts: int = 0
    reason: str = ""
    bytes: int = 0
    checksum: str = ""
    started: float | None = None
    finished: float | None = None


@dataclass
class DownloadJournal:
    """Replayable per-entry state backed by an append-only event file."""

    path: Path | None
    states: dict[int, EntryState] = field(default_factory=dict)
    manifest_digest: str = ""
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _apply(self, ev: dict) -> None:
        kind = ev["event"]
        if kind == "open":
            self.manifest_digest = ev.get("manifest", "")
            return
        st = self.states.setdefault(ev["i"], EntryState())
        if kind == IN_FLIGHT:
            st.status, st.attempts = IN_FLIGHT, ev["attempt"]
            st.started = st.started or ev["t"]
        elif kind == "retry":
            st.status, st.reason = PENDING, ev["reason"]
        elif kind == DONE:
            st.status, st.bytes, st.checksum, st.finished, st.reason = DONE, ev["bytes"], ev["checksum"], ev["t"], ""
        elif kind == FAILED:
            st.status, st.reason, st.finished = FAILED, ev["reason"], ev["t"]
            st.attempts = ev.get("attempt", st.attempts)
        elif kind == PENDING:
            st.status = PENDING

    def record(self, event: str, i: int | None = None, **fields) -> None:
        ev = {"event": event, "t": time.time(), **({"i": i} if i is not None else {}), **fields}
        line = json.dumps(ev, sort_keys=True) + "\n"
        with self._lock:
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()
                    os.fsync(fh.fileno())
            self._apply(ev)

    @classmethod
    def replay(cls, path) -> "DownloadJournal":
        j = cls(Path(path))
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        for n, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                ev = json.loads(line)
            except json.JSONDecodeError:
                if n == len(lines) - 1:
                    break  # torn final write from a crash
                raise
            j._apply(ev)
        return j

    def count(self, status: str) -> int:
        return sum(1 for s in self.states.values() if s.status == status)

    def done_indices(self) -> list[int]:
        return sorted(i for i, s in self.states.items() if s.status == DONE)

    @property
    def bytes_done(self) -> int:
        return sum(s.bytes for s in self.states.values() if s.status == DONE)

    @property
    def exit_code(self) -> int:
        return 1 if self.count(FAILED) else 0

    def summary(self) -> dict:
        return {"done": self.count(DONE), "failed": self.count(FAILED), "pending": self.count(PENDING),
                "in_flight": self.count(IN_FLIGHT), "bytes": self.bytes_done,
                "failures": {str(i): {"reason": s.reason, "attempts": s.attempts}
                             for i, s in sorted(self.states.items()) if s.status == FAILED}}


def manifest_digest(entries) -> str:
    return "sha256:" + hashlib.sha256(dumps_manifest(entries).encode()).hexdigest()


def file_matches(path: Path, entry: ManifestEntry, checksum: str = "") -> bool:
    if not path.is_file():
        return False
    if entry.expected_bytes is not None and path.stat().st_size != entry.expected_bytes:
        return False
    want = entry.checksum or checksum
    if want:
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
        return "sha256:" + h.hexdigest() == want
    return True


def _interleave(groups: list[list[int]]) -> list[int]:
    order, seen = [], set()
    for pos in range(max((len(g) for g in groups), default=0)):
        for g in groups:
            if pos < len(g) and g[pos] not in seen:
                seen.add(g[pos])
                order.append(g[pos])
    return order


class Downloader:
    def __init__(self, entries: list[ManifestEntry], root, journal: DownloadJournal, policy: PolitenessPolicy, *,
                 client: httpx.Client | None = None, seed: int = 0, sleep=time.sleep, on_chunk=None):
        self.entries, self.root, self.journal, self.policy = entries, Path(root), journal, policy
        self.seed, self.sleep, self.on_chunk = seed, sleep, on_chunk
        self.bucket = TokenBucket(policy.bytes_per_second_cap) if policy.bytes_per_second_cap else None
        self._hosts: dict[str, threading.Semaphore] = {}
        self._hosts_lock = threading.Lock()
        self._own_client = client is None
        self.client = client or httpx.Client(
            timeout=policy.timeout,
            limits=httpx.Limits(max_connections=policy.max_global_concurrency,
                                max_keepalive_connections=policy.max_global_concurrency))

    def _host_slot(self, host: str) -> threading.Semaphore:
        with self._hosts_lock:
            return self._hosts.setdefault(host, threading.Semaphore(self.policy.max_per_host_concurrency))

    def _fetch(self, entry: ManifestEntry) -> tuple[int, str]:
        final = self.root / entry.dest
        final.parent.mkdir(parents=True, exist_ok=True)
        part = final.with_name(final.name + ".part")
        h, n = hashlib.sha256(), 0
        try:
            with self.client.stream("GET", entry.url) as resp:
                if resp.status_code != 200:
                    code = resp.status_code
                    raise FetchError(f"http {code}", transient=code >= 500 or code in (408, 429))
                with open(part, "wb") as fh:
                    for chunk in resp.iter_bytes(self.policy.chunk_size):
                        if self.bucket is not None:
                            self.bucket.consume(len(chunk))
                        if self.on_chunk is not None:
                            self.on_chunk(len(chunk))
                        fh.write(chunk)
                        h.update(chunk)
                        n += len(chunk)
                    fh.flush()
                    os.fsync(fh.fileno())
        except httpx.HTTPError as exc:
            raise FetchError(f"network: {type(exc).__name__}") from None
        digest = "sha256:" + h.hexdigest()
        if entry.expected_bytes is not None and n != entry.expected_bytes:
            raise FetchError(f"size mismatch: got {n}, expected {entry.expected_bytes}")
        if entry.checksum is not None and digest != entry.checksum:
            raise FetchError("checksum mismatch")
        os.replace(part, final)
        return n, digest

    def run_entry(self, i: int) -> None:
        entry = self.entries[i]
        rng = random.Random(f"{self.seed}:{i}")
        slot = self._host_slot(entry.host)
        for attempt in range(1, self.policy.max_attempts + 1):
            with slot:
                self.journal.record(IN_FLIGHT, i, attempt=attempt)
                try:
                    n, digest = self._fetch(entry)
                except FetchError as exc:
                    err = exc
                else:
                    self.journal.record(DONE, i, attempt=attempt, bytes=n, checksum=digest, dest=entry.dest)
                    return
            if not err.transient or attempt == self.policy.max_attempts:
                self.journal.record(FAILED, i, attempt=attempt, reason=err.reason)
                return
            self.journal.record("retry", i, attempt=attempt, reason=err.reason)
            self.sleep(self.policy.backoff(attempt, rng))

    def run(self, order: list[int]) -> None:
        try:
            with ThreadPoolExecutor(max_workers=self.policy.max_global_concurrency) as pool:
                for fut in [pool.submit(self.run_entry, i) for i in order]:
                    fut.result()
        finally:
            if self._own_client:
                self.client.close()


def download_all(entries: list[ManifestEntry], root, journal_path, policy: PolitenessPolicy | None = None, *,
                 groups: list[list[int]] | None = None, resume: bool = False, client: httpx.Client | None = None,
                 seed: int = 0, sleep=time.sleep, on_chunk=None) -> DownloadJournal:
    """Fetch every entry named by ``groups`` (default: all) and return the journal.

    With ``resume`` an existing journal is replayed: entries whose files
    verify stay done and the rest are retried.  Without it an existing
    journal is an error.
    """
    policy = policy or PolitenessPolicy()
    journal_path = Path(journal_path)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    digest = manifest_digest(entries)
    if journal_path.exists():
        if not resume:
            raise JournalExists(f"{journal_path} exists; pass resume to continue it")
        journal = DownloadJournal.replay(journal_path)
        if journal.manifest_digest and journal.manifest_digest != digest:
            raise ConfigError("journal belongs to a different manifest")
    else:
        journal_path.parent.mkdir(parents=True, exist_ok=True)
        journal = DownloadJournal(journal_path)
        journal.record("open", manifest=digest, entries=len(entries))
    wanted = _interleave(groups) if groups is not None else list(range(len(entries)))
    for i in wanted:
        if not 0 <= i < len(entries):
            raise ConfigError(f"group refers to entry {i}, manifest has {len(entries)}")
    todo = []
    for i in wanted:
        st = journal.states.get(i)
        if st is not None and st.status == DONE and file_matches(root / entries[i].dest, entries[i], st.checksum):
            continue
        if st is not None and st.status != PENDING:
            journal.record(PENDING, i)
        todo.append(i)
    if todo:
        Downloader(entries, root, journal, policy, client=client, seed=seed, sleep=sleep, on_chunk=on_chunk).run(todo)
    return journal
