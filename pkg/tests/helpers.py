"""Shared test helpers: policies, random generators, local HTTP fixtures."""
from __future__ import annotations

import random
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from gpcgate.engine import GroundsAssessment, LegalBasis, ProcessingActivity
from gpcgate.gateway import PolicyOptions, Purpose, SitePolicy
from gpcgate.roles import EntityActivityBinding


def ad_policy(**options):
    return SitePolicy(
        site="news.example",
        policy_version="v1",
        purposes=(
            Purpose("p1", ProcessingActivity.CROSS_CONTEXT_AD_TARGETING, "adnet-X", LegalBasis.CONSENT),
        ),
        bindings=(EntityActivityBinding("adnet-X", "p1"),),
        options=PolicyOptions(**options),
    )


def payment_policy():
    return SitePolicy(
        site="shop.example",
        policy_version="v2",
        purposes=(
            Purpose("p2", ProcessingActivity.SHARE_WITH_THIRD_PARTY, "payments-Y",
                    LegalBasis.CONTRACT_PERFORMANCE),
            Purpose("fraud", ProcessingActivity.SHARE_WITH_THIRD_PARTY, "payments-Y",
                    LegalBasis.LEGITIMATE_INTERESTS,
                    GroundsAssessment(True, "fraud prevention essential")),
        ),
        bindings=(
            EntityActivityBinding("payments-Y", "p2", acts_on_behalf_of_controller=True),
            EntityActivityBinding("payments-Y", "fraud", determines_purposes_and_means=True),
        ),
    )


_FLAG_PATTERNS = [(True, False, True), (False, True, False), (False, False, False), (True, False, False)]
_SIGNAL_VALUES = [None, "1", "1", "0", "", " 1 ", "true"]


def random_policy(rng: random.Random) -> SitePolicy:
    entities = [f"ent-{i}" for i in range(rng.randint(1, 4))]
    purposes, bindings = [], []
    for i in range(rng.randint(1, 6)):
        pid = f"p{i}"
        entity = rng.choice(entities)
        basis = rng.choice(list(LegalBasis))
        grounds = None
        if basis is LegalBasis.LEGITIMATE_INTERESTS:
            grounds = rng.choice([None, GroundsAssessment(False), GroundsAssessment(True, f"reason {i}")])
        purposes.append(Purpose(pid, rng.choice(list(ProcessingActivity)), entity, basis, grounds))
        d, o, t = rng.choice(_FLAG_PATTERNS)
        bindings.append(EntityActivityBinding(entity, pid, d, o, t))
    return SitePolicy(f"site{rng.randrange(100)}.example", f"v{rng.randrange(9)}", tuple(purposes),
                      tuple(bindings), PolicyOptions(rng.random() < 0.3))


def random_headers(rng: random.Random):
    headers = [("Accept", "*/*")]
    for _ in range(rng.choice([1, 1, 1, 2])):
        value = rng.choice(_SIGNAL_VALUES)
        if value is not None:
            headers.append((rng.choice(["Sec-GPC", "sec-gpc", "SEC-GPC"]), value))
    return headers


class InFlight:
    """Counts concurrent requests across fixture servers."""

    def __init__(self):
        self.lock = threading.Lock()
        self.now = 0
        self.peak = 0

    def __enter__(self):
        with self.lock:
            self.now += 1
            self.peak = max(self.peak, self.now)

    def __exit__(self, *exc):
        with self.lock:
            self.now -= 1


class FixtureServer:
    """Local HTTP server; ``routes`` maps path -> (status, headers, body, delay)."""

    def __init__(self, routes, counter: InFlight | None = None):
        self.routes = routes
        self.counter = counter or InFlight()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_GET(self):
                with outer.counter:
                    status, headers, body, delay = outer.routes.get(
                        self.path, (404, {}, b"not found", 0))
                    if callable(body):
                        body = body(self)
                    if delay:
                        time.sleep(delay)
                    if callable(headers):
                        headers = headers(self)
                    try:
                        self.send_response(status)
                        for name, value in (headers.items() if isinstance(headers, dict) else headers):
                            self.send_header(name, value)
                        self.send_header("Content-Length", str(len(body)))
                        self.end_headers()
                        self.wfile.write(body)
                    except (BrokenPipeError, ConnectionResetError):
                        pass

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self.httpd.block_on_close = False
        self.thread = threading.Thread(target=self.httpd.serve_forever, args=(0.05,), daemon=True)

    @property
    def site(self) -> str:
        return f"127.0.0.1:{self.httpd.server_address[1]}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
