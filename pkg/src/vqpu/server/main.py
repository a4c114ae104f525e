"""``vqpu-server``: run the control plane under uvicorn."""

from __future__ import annotations

import argparse
import logging
import sys

import uvicorn

from ..fixtures import IDEAL_DEVICE, NOISY_DEVICE, load_fixture
from .app import create_app
from .config import ServerConfig
from .service import ControlPlane

log = logging.getLogger("vqpu.server")


def build(config: ServerConfig, seed_fixtures: bool = False) -> ControlPlane:
    service = ControlPlane(config)
    if seed_fixtures:
        for device_id in (NOISY_DEVICE, IDEAL_DEVICE):
            if service.devices.authoritative(device_id) is None:
                service.devices.put(device_id, load_fixture(device_id).to_dict(), by="bootstrap")
    return service


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="vqpu-server", description="Run the vQPU control plane.")
    ap.add_argument("--bind", help="host:port (overrides VQPU_BIND_ADDR)")
    ap.add_argument("--seed-fixtures", action="store_true", help="register the packaged hh20 devices if absent")
    ap.add_argument("--log-level", default="warning")
    args = ap.parse_args(argv)

    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    config = ServerConfig.from_env()
    if args.bind:
        config.bind_addr = args.bind
    if not config.api_keys_file:
        print("VQPU_API_KEYS_FILE must name an API key table", file=sys.stderr)
        return 2
    service = build(config, args.seed_fixtures)
    app = create_app(service)
    try:
        uvicorn.run(app, host=config.host, port=config.port, log_level=args.log_level, access_log=False)
    finally:
        service.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
