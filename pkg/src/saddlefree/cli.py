"""Command-line front end.

Each subcommand reads a TOML experiment file and posts it to the
experiment service, then prints the returned artifact manifest.  By
default the service runs in-process over an ASGI transport (no
sockets); ``--server`` targets a running instance instead, and
``serve`` starts one.

Exit codes: 0 success, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from typing import Optional

import httpx

from .config import ConfigError, load_toml

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

COMMAND_ROUTES = {
    "optimize": "/experiments/optimize",
    "compare": "/experiments/compare",
    "critical-points": "/experiments/critical-points",
    "spectrum": "/experiments/spectrum",
    "search": "/experiments/search",
}

_COMMAND_HELP = {
    "optimize": "run one optimizer and write its trajectory",
    "compare": "run several optimizers from a shared start",
    "critical-points": "survey critical points around trained models",
    "spectrum": "write eigenvalue spectra and histograms",
    "search": "random hyperparameter search only (no comparison runs)",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saddlefree",
        description="Optimization experiments driven by TOML configs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, route_help in _COMMAND_HELP.items():
        cmd = sub.add_parser(name, help=route_help)
        cmd.add_argument("--config", required=True,
                         help="TOML experiment file")
        cmd.add_argument("--out", default=None,
                         help="output directory (overrides the config)")
        cmd.add_argument("--seed", type=int, default=None,
                         help="master seed (overrides the config)")
        cmd.add_argument("--jobs", type=int, default=None,
                         help="worker count (overrides the config)")
        cmd.add_argument("--server", default=None,
                         help="URL of a running service "
                              "(default: run in-process)")
    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _request(server: Optional[str], route: str, body: dict) -> httpx.Response:
    """POST ``body`` to ``route`` on a running server, or in-process."""
    if server is not None:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(route, json=body)

    from .service import create_app

    async def _post() -> httpx.Response:
        # Same routes and status codes as a deployed instance, no sockets;
        # app exceptions become HTTP 500s rather than tracebacks.
        transport = httpx.ASGITransport(app=create_app(),
                                        raise_app_exceptions=False)
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://service",
                                     timeout=None) as client:
            return await client.post(route, json=body)

    return asyncio.run(_post())


def _detail(response: httpx.Response) -> str:
    try:
        payload = response.json()
    except ValueError:
        return response.text
    if isinstance(payload, dict) and "detail" in payload:
        detail = payload["detail"]
        return detail if isinstance(detail, str) else json.dumps(detail)
    return json.dumps(payload)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service import create_app
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    try:
        document = load_toml(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        document["seed"] = args.seed
    body = {"config": document}
    if args.out is not None:
        body["out"] = args.out
    if args.jobs is not None:
        body["jobs"] = args.jobs

    try:
        response = _request(args.server, COMMAND_ROUTES[args.command], body)
    except httpx.HTTPError as exc:
        print(f"service unreachable: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    if response.status_code == 200:
        report = response.json()
        print(f"{report['kind']}: wrote {len(report['artifacts'])} "
              f"artifact(s) to {report['out_dir']}")
        for name in report["artifacts"]:
            print(f"  {name}")
        return EXIT_OK
    if response.status_code == 422:
        print(f"config error: {_detail(response)}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"run failed (HTTP {response.status_code}): {_detail(response)}",
          file=sys.stderr)
    return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
