"""Command-line launcher: ``regen-service [--port N] [--backend mock]``.

Defaults come from the environment: ``REGEN_PORT``, ``REGEN_BACKEND`` and
``REGEN_MODEL_PATH``.
"""

from __future__ import annotations

import argparse
import os

import uvicorn

from regen_service.app import create_app
from regen_service.backends import load_backend


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regen-service",
        description="HTTP sidecar serving the image-regeneration protocol")
    parser.add_argument("--host", default=os.environ.get("REGEN_HOST",
                                                         "127.0.0.1"))
    parser.add_argument("--port", type=int,
                        default=int(os.environ.get("REGEN_PORT", "8000")))
    parser.add_argument("--backend",
                        default=os.environ.get("REGEN_BACKEND", "mock"),
                        choices=("mock", "diffusion"))
    parser.add_argument("--model-path",
                        default=os.environ.get("REGEN_MODEL_PATH"))
    parser.add_argument("--log-level", default="info")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    backend = load_backend(args.backend, args.model_path)
    app = create_app(backend)
    uvicorn.run(app, host=args.host, port=args.port,
                log_level=args.log_level)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
