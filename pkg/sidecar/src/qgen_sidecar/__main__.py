"""Run the sidecar: `qgen-sidecar [--config sidecar.json] [--port N]`."""

from __future__ import annotations

import argparse
import logging

import uvicorn

from .app import create_app
from .config import ensure_port_free, load_config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qgen-sidecar", description=__doc__)
    parser.add_argument("--config", help="JSON config file (SIDECAR_* env vars override)")
    parser.add_argument("--port", type=int, help="override the configured port")
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO)
    config = load_config(args.config)
    if args.port is not None:
        config.port = args.port
    ensure_port_free(config.port, args.host)
    uvicorn.run(create_app(config), host=args.host, port=config.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
