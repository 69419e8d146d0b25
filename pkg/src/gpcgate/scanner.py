"""Bounded-concurrency probe of sites' ``/.well-known/gpc.json``.

Each site yields exactly one :class:`ScanReport`, in input order; per-site
failures are recorded in the report and never abort the run. The optional
probe compares ``Set-Cookie`` counts with and without the signal and
reports only that observation.
"""
from __future__ import annotations

import datetime as _dt
import enum
import ipaddress
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import httpx

from .signal import SIGNAL_HEADER, SIGNAL_VALUE, WELL_KNOWN_PATH, MalformedRecord, parse_well_known
from .timefmt import format_ts, utcnow

MAX_REDIRECTS = 3
MAX_BODY_BYTES = 64 * 1024
REDIRECT_CODES = frozenset({301, 302, 303, 307, 308})

# Two-label public suffixes common enough to matter for redirect checks.
_SECOND_LEVEL_SUFFIXES = frozenset({
    "co.uk", "org.uk", "ac.uk", "gov.uk", "me.uk", "ltd.uk", "plc.uk",
    "com.au", "net.au", "org.au", "edu.au", "gov.au",
    "co.nz", "org.nz", "co.jp", "ne.jp", "or.jp", "co.kr", "co.in", "co.za",
    "com.br", "com.mx", "com.ar", "com.tr", "com.cn", "com.tw", "com.hk", "com.sg",
})

_LABEL = re.compile(r"^(?!-)[a-z0-9-]{1,63}(?<!-)$")


class InvalidArgs(ValueError):
    pass


class WellKnownOutcome(str, enum.Enum):
    SUPPORTED = "Supported"
    DECLARED_FALSE = "Declared_false"
    MISSING = "Missing"
    MALFORMED = "Malformed"
    UNREACHABLE = "Unreachable"


@dataclass(frozen=True)
class ProbeResult:
    set_cookie_without_signal: Optional[int] = None
    set_cookie_with_signal: Optional[int] = None
    error: Optional[str] = None

    @property
    def signal_echoed_change(self) -> Optional[bool]:
        if self.error is not None:
            return None
        return self.set_cookie_without_signal != self.set_cookie_with_signal

    def to_json(self) -> dict:
        return {
            "signal_echoed_change": self.signal_echoed_change,
            "set_cookie_without_signal": self.set_cookie_without_signal,
            "set_cookie_with_signal": self.set_cookie_with_signal,
            "error": self.error,
        }


@dataclass(frozen=True)
class ScanReport:
    site: str
    outcome: WellKnownOutcome
    fetched_at: _dt.datetime
    last_update: Optional[str] = None
    reason: Optional[str] = None
    probe: Optional[ProbeResult] = None

    def to_json(self) -> dict:
        well_known: dict = {"outcome": self.outcome.value}
        if self.outcome is WellKnownOutcome.SUPPORTED:
            well_known["last_update"] = self.last_update
        if self.reason is not None:
            well_known["reason"] = self.reason
        return {
            "site": self.site,
            "well_known": well_known,
            "probe": self.probe.to_json() if self.probe is not None else None,
            "fetched_at": format_ts(self.fetched_at),
        }


def _split_site(site: str) -> tuple[str, Optional[int]]:
    text = site.strip().lower().rstrip(".")
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = rest[1:] if rest.startswith(":") else None
    elif text.count(":") == 1:
        host, port = text.split(":")
    else:
        host, port = text, None
    if port is not None:
        if not port.isdigit() or not 0 < int(port) < 65536:
            raise ValueError(f"bad port in {site!r}")
        return host, int(port)
    return host, None


def _is_ip(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
        return True
    except ValueError:
        return False


def validate_site(site: str) -> str:
    """Return the normalized ``host[:port]`` or raise ValueError."""
    host, port = _split_site(site)
    if not _is_ip(host):
        labels = host.split(".")
        if len(host) > 253 or not all(_LABEL.match(label) for label in labels):
            raise ValueError(f"not a domain: {site!r}")
    shown = f"[{host}]" if ":" in host else host
    return f"{shown}:{port}" if port is not None else shown


def registrable_domain(host: str) -> str:
    """Best-effort registrable domain; IP literals stand for themselves."""
    host = host.strip("[]").lower().rstrip(".")
    if _is_ip(host):
        return host
    labels = host.split(".")
    if len(labels) >= 3 and ".".join(labels[-2:]) in _SECOND_LEVEL_SUFFIXES:
        return ".".join(labels[-3:])
    return ".".join(labels[-2:])


class _Deadline:
    def __init__(self, seconds: float):
        self.end = time.monotonic() + seconds

    def remaining(self) -> float:
        left = self.end - time.monotonic()
        if left <= 0:
            raise httpx.TimeoutException("site deadline exceeded")
        return left


class Scanner:
    """Reusable scanner; ``max_in_flight`` records the observed peak."""

    def __init__(self, parallelism: int = 8, timeout: float = 10.0, probe: bool = False,
                 scheme: str = "https", verify: bool = True):
        if not isinstance(parallelism, int) or parallelism < 1:
            raise InvalidArgs("parallelism must be a positive integer")
        if not timeout or timeout <= 0:
            raise InvalidArgs("timeout must be positive")
        if scheme not in ("https", "http"):
            raise InvalidArgs(f"unsupported scheme {scheme!r}")
        self.parallelism = parallelism
        self.timeout = float(timeout)
        self.probe = probe
        self.scheme = scheme
        self.verify = verify
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0

    def _track(self, delta: int) -> None:
        with self._lock:
            self.in_flight += delta
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def _get(self, client: httpx.Client, url, deadline: _Deadline, headers=None):
        """GET ``url`` within the site deadline; returns (response, body)."""
        self._track(+1)
        try:
            with client.stream("GET", url, headers=headers,
                               timeout=httpx.Timeout(deadline.remaining())) as resp:
                chunks, size = [], 0
                for chunk in resp.iter_bytes():
                    deadline.remaining()
                    size += len(chunk)
                    if size > MAX_BODY_BYTES:
                        raise MalformedRecord("body too large")
                    chunks.append(chunk)
                return resp, b"".join(chunks)
        finally:
            self._track(-1)

    def _fetch_well_known(self, client, site: str, deadline: _Deadline) -> ScanReport:
        url = httpx.URL(f"{self.scheme}://{site}{WELL_KNOWN_PATH}")
        origin = registrable_domain(url.host)
        for _ in range(MAX_REDIRECTS + 1):
            resp, body = self._get(client, url, deadline)
            if resp.status_code in REDIRECT_CODES and "location" in resp.headers:
                url = url.join(resp.headers["location"])
                if registrable_domain(url.host) != origin:
                    return self._report(site, WellKnownOutcome.MALFORMED, reason="cross-domain redirect")
                continue
            break
        else:
            return self._report(site, WellKnownOutcome.MALFORMED, reason="too many redirects")
        if resp.status_code in (404, 410):
            return self._report(site, WellKnownOutcome.MISSING)
        if resp.status_code != 200:
            return self._report(site, WellKnownOutcome.UNREACHABLE, reason=f"HTTP {resp.status_code}")
        record = parse_well_known(body)
        if record.gpc_supported:
            return self._report(site, WellKnownOutcome.SUPPORTED, last_update=record.last_update)
        return self._report(site, WellKnownOutcome.DECLARED_FALSE)

    def _probe(self, client, site: str, deadline: _Deadline) -> ProbeResult:
        url = f"{self.scheme}://{site}/"
        try:
            without, _ = self._get(client, url, deadline)
            with_signal, _ = self._get(client, url, deadline, headers={SIGNAL_HEADER: SIGNAL_VALUE})
        except httpx.TimeoutException:
            return ProbeResult(error="timeout")
        except (httpx.HTTPError, MalformedRecord, OSError) as exc:
            return ProbeResult(error=f"{type(exc).__name__}: {exc}")
        return ProbeResult(
            len(without.headers.get_list("set-cookie")),
            len(with_signal.headers.get_list("set-cookie")),
        )

    @staticmethod
    def _report(site, outcome, **kw) -> ScanReport:
        return ScanReport(site=site, outcome=outcome, fetched_at=utcnow(), **kw)

    def scan_one(self, client: httpx.Client, site: str) -> ScanReport:
        try:
            site = validate_site(site)
        except ValueError as exc:
            return self._report(site, WellKnownOutcome.UNREACHABLE, reason=f"invalid site: {exc}")
        deadline = _Deadline(self.timeout)
        try:
            report = self._fetch_well_known(client, site, deadline)
        except MalformedRecord as exc:
            report = self._report(site, WellKnownOutcome.MALFORMED, reason=exc.reason)
        except httpx.TimeoutException:
            report = self._report(site, WellKnownOutcome.UNREACHABLE, reason="timeout")
        except (httpx.HTTPError, OSError) as exc:
            report = self._report(site, WellKnownOutcome.UNREACHABLE,
                                  reason=f"{type(exc).__name__}: {exc}")
        if self.probe:
            report = ScanReport(report.site, report.outcome, report.fetched_at, report.last_update,
                                report.reason, self._probe(client, site, deadline))
        return report

    def scan(self, sites) -> list[ScanReport]:
        sites = list(sites)
        limits = httpx.Limits(max_connections=self.parallelism,
                              max_keepalive_connections=self.parallelism)
        with httpx.Client(follow_redirects=False, trust_env=False, verify=self.verify,
                          limits=limits) as client:
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                return list(pool.map(lambda s: self.scan_one(client, s), sites))


def scan(sites, parallelism: int, timeout: float, probe: bool = False,
         scheme: str = "https") -> list[ScanReport]:
    return Scanner(parallelism, timeout, probe, scheme).scan(sites)
