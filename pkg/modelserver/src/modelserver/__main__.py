"""Serve a classifier over HTTP: python -m modelserver [flags]."""

from __future__ import annotations

import argparse

import uvicorn

from .app import create_app
from .models import ServerConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advmark-modelserver")
    parser.add_argument("--model", default="squeezenet1_0",
                        help="torchvision model name or 'tinycnn'")
    parser.add_argument("--classes", type=int, default=1000)
    parser.add_argument("--weights", choices=["random", "pretrained"], default="random",
                        help="'pretrained' needs downloadable weights; 'random' is seeded")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--layer", action="append", dest="layers",
                        help="activation layer to expose (repeatable, shallow first)")
    parser.add_argument("--input-size", type=int, nargs=2, default=(224, 224),
                        metavar=("W", "H"))
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8008)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ServerConfig(
        model=args.model,
        num_classes=args.classes,
        weights=args.weights,
        seed=args.seed,
        layers=tuple(args.layers) if args.layers else None,
        input_size=tuple(args.input_size),
        host=args.host,
        port=args.port,
    )
    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
