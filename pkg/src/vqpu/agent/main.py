"""``vqpu-agent``: run the execution-plane agent, or garbage-collect run directories.

Exit codes: 0 clean shutdown, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import signal
import sys
import time
from pathlib import Path

from .config import AgentConfig, ConfigError
from .controller import FINALISED_FILE, Agent

EXIT_OK = 0
EXIT_CONFIG = 2


def gc(work_dir: Path, older_than_s: float, dry_run: bool = False) -> list[Path]:
    """Remove finalised run directories whose marker is older than the threshold."""
    cutoff = time.time() - older_than_s
    removed = []
    for marker in sorted(work_dir.glob(f"*/{FINALISED_FILE}")):
        if marker.stat().st_mtime <= cutoff:
            removed.append(marker.parent)
            if not dry_run:
                shutil.rmtree(marker.parent)
    return removed


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="vqpu-agent", description="vQPU execution-plane agent")
    ap.add_argument("--config", help="configuration file (default: $VQPU_AGENT_CONFIG)")
    ap.add_argument("--log-level", default="info")
    sub = ap.add_subparsers(dest="verb")
    sub.add_parser("run", help="claim and execute tasks until interrupted (default)")
    p_gc = sub.add_parser("gc", help="delete finalised run directories")
    p_gc.add_argument("--older-than-days", type=float, default=7.0)
    p_gc.add_argument("--dry-run", action="store_true")
    args = ap.parse_args(argv)

    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    logging.getLogger("httpx").setLevel(logging.WARNING)
    try:
        config = AgentConfig.load(args.config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.verb == "gc":
        removed = gc(Path(config.work_dir), args.older_than_days * 86400, args.dry_run)
        print(json.dumps({"removed": [str(p) for p in removed], "dry_run": args.dry_run}))
        return EXIT_OK

    agent = Agent(config)

    def _shutdown(signum, frame):
        agent._stop.set()

    signal.signal(signal.SIGTERM, _shutdown)
    signal.signal(signal.SIGINT, _shutdown)
    agent.start()
    agent.wait()
    agent.stop()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
