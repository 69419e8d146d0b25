"""``gate`` command line: serve, scan, export-table.

Every option can also be set through ``GPCGATE_<FLAG>`` (for example
``GPCGATE_POLICY`` or ``GPCGATE_PARALLELISM``); flags win over env vars.
"""
from __future__ import annotations

import json
import logging
import signal
import sys

import click

from .engine import IoFailure, write_decision_table
from .gateway import AuditLog, Gateway, PolicyInvalid, load_policy, make_server
from .ledger import LedgerStore, StorageUnavailable
from .scanner import InvalidArgs, Scanner
from .signal import MalformedRecord, WellKnownRecord

logger = logging.getLogger("gpcgate")


def _env(name: str) -> str:
    return "GPCGATE_" + name.upper().replace("-", "_")


def _listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise click.BadParameter(f"expected HOST:PORT, got {value!r}")
    return host.strip("[]") or "0.0.0.0", int(port)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    """Global Privacy Control enforcement gateway."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--policy", envvar=_env("policy"), required=True, type=click.Path(dir_okay=False))
@click.option("--listen", envvar=_env("listen"), default="127.0.0.1:8080", show_default=True)
@click.option("--ledger", envvar=_env("ledger"), type=click.Path(file_okay=False),
              help="Ledger directory; omit for stateless evaluation.")
@click.option("--audit", envvar=_env("audit"), type=click.Path(dir_okay=False),
              help="Audit log file (newline-delimited JSON).")
@click.option("--well-known", "well_known", envvar=_env("well_known"), default="true",
              type=click.Choice(["true", "false"]), show_default=True)
@click.option("--well-known-last-update", envvar=_env("well_known_last_update"), default=None)
def serve(policy, listen, ledger, audit, well_known, well_known_last_update):
    """Run the decision gateway."""
    try:
        site_policy = load_policy(policy)
    except PolicyInvalid as exc:
        raise click.ClickException(f"policy invalid: {exc}")
    try:
        record = WellKnownRecord(well_known == "true", well_known_last_update)
    except MalformedRecord as exc:
        raise click.BadParameter(exc.reason, param_hint="--well-known-last-update")
    store = None
    if ledger:
        try:
            store = LedgerStore(ledger)
        except StorageUnavailable as exc:
            logger.warning("%s; continuing without a ledger", exc)
    sink = AuditLog(audit, keep_records=False)
    gateway = Gateway(site_policy, store, sink, record)
    host, port = _listen(listen)
    server = make_server(gateway, host, port)
    logger.info("gateway for %s (policy %s) on %s:%d", site_policy.site,
                site_policy.policy_version, *server.server_address[:2])
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        if store is not None:
            store.write_snapshot()


@main.command()
@click.option("--sites", envvar=_env("sites"), required=True,
              help="File with one domain per line, or - for stdin.")
@click.option("--parallelism", envvar=_env("parallelism"), type=int, default=8, show_default=True)
@click.option("--timeout", envvar=_env("timeout"), type=float, default=10.0, show_default=True,
              help="Per-site timeout in seconds.")
@click.option("--probe", envvar=_env("probe"), is_flag=True,
              help="Also compare Set-Cookie counts with and without the signal.")
@click.option("--scheme", envvar=_env("scheme"), default="https", type=click.Choice(["https", "http"]),
              show_default=True)
@click.option("--out", envvar=_env("out"), required=True, help="Output file, or - for stdout.")
def scan(sites, parallelism, timeout, probe, scheme, out):
    """Check sites for /.well-known/gpc.json support."""
    with click.open_file(sites, "r") as fh:
        names = [line.strip() for line in fh if line.strip() and not line.lstrip().startswith("#")]
    try:
        scanner = Scanner(parallelism, timeout, probe, scheme)
    except InvalidArgs as exc:
        raise click.UsageError(str(exc))
    reports = scanner.scan(names)
    with click.open_file(out, "w") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_json(), separators=(",", ":")) + "\n")
    click.echo(f"scanned {len(reports)} sites (peak concurrency {scanner.max_in_flight})", err=True)


@main.command("export-table")
@click.option("--out", envvar=_env("out"), required=True, type=click.Path(dir_okay=False))
def export_table(out):
    """Write the full decision table as CSV."""
    try:
        write_decision_table(out)
    except IoFailure as exc:
        raise click.ClickException(str(exc))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
