import asyncio
import json
from pathlib import Path

import httpx
import pytest

from saddlefree import __version__
from saddlefree.cli import (COMMAND_ROUTES, EXIT_CONFIG, EXIT_OK,
                            EXIT_RUNTIME, build_parser, main)
from saddlefree.service import SERVICE_NAME, create_app


def call(route: str, body: dict = None, method: str = "post"):
    async def _go() -> httpx.Response:
        transport = httpx.ASGITransport(app=create_app(),
                                        raise_app_exceptions=False)
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://t",
                                     timeout=None) as client:
            if method == "get":
                return await client.get(route)
            return await client.post(route, json=body)

    return asyncio.run(_go())


def optimize_config(**overrides):
    doc = {
        "kind": "optimize",
        "seed": 5,
        "objective": {"surface": {"kind": "classical_saddle"}},
        "optimizers": [{"method": "gd", "learning_rate": 0.05,
                        "max_epochs": 3}],
    }
    doc.update(overrides)
    return doc


OPTIMIZE_TOML = """\
kind = "optimize"
seed = 5

[objective.surface]
kind = "classical_saddle"

[[optimizers]]
method = "gd"
learning_rate = 0.05
max_epochs = 3
"""


# ------------------------------------------------------------------- service

def test_health():
    response = call("/health", method="get")
    assert response.status_code == 200
    assert response.json() == {"status": "ok", "service": SERVICE_NAME}


def test_optimize_endpoint_runs_and_reports(tmp_path):
    out = str(tmp_path / "svc")
    response = call("/experiments/optimize",
                    {"config": optimize_config(), "out": out})
    assert response.status_code == 200
    report = response.json()
    assert report["kind"] == "optimize"
    assert report["out_dir"] == out
    assert report["artifacts"] == ["summary.json", "trajectory.csv"]
    assert (Path(out) / "trajectory.csv").exists()
    assert report["summary"]["method"] == "gd"


def test_kind_must_match_route(tmp_path):
    response = call("/experiments/compare",
                    {"config": optimize_config(),
                     "out": str(tmp_path / "x")})
    assert response.status_code == 422
    assert "optimize" in response.json()["detail"]
    assert not (tmp_path / "x").exists()


def test_invalid_config_is_422(tmp_path):
    bad = optimize_config(optimizers=[])
    response = call("/experiments/optimize",
                    {"config": bad, "out": str(tmp_path / "x")})
    assert response.status_code == 422


def test_extra_request_field_is_rejected(tmp_path):
    response = call("/experiments/optimize",
                    {"config": optimize_config(),
                     "out": str(tmp_path / "x"), "verbose": True})
    assert response.status_code == 422


def test_runtime_config_error_is_422(tmp_path):
    doc = {
        "kind": "compare",
        "objective": {"surface": {"kind": "gaussian_quadratic", "n": 3}},
        "optimizers": [{"method": "msgd", "max_epochs": 2}],
        "search": {"samples": 2, "max_epochs": 2},
    }
    response = call("/experiments/compare",
                    {"config": doc, "out": str(tmp_path / "x")})
    assert response.status_code == 422
    assert "msgd" in response.json()["detail"]


def test_runtime_failure_is_500(tmp_path):
    doc = {
        "kind": "compare",
        "objective": {"surface": {"kind": "gutter", "start": [1.0, 0.0]}},
        "search": {"samples": 2, "max_epochs": 3},
    }
    response = call("/experiments/search",
                    {"config": doc, "out": str(tmp_path / "f")})
    assert response.status_code == 500
    assert "diverged" in response.json()["detail"]
    assert (tmp_path / "f" / "trials.csv").exists()


def test_search_endpoint_accepts_compare_configs(tmp_path):
    doc = {
        "kind": "compare", "seed": 2,
        "objective": {"surface": {"kind": "gaussian_quadratic", "n": 4}},
        "search": {"samples": 2, "max_epochs": 3},
    }
    response = call("/experiments/search",
                    {"config": doc, "out": str(tmp_path / "s")})
    assert response.status_code == 200
    assert response.json()["kind"] == "search"
    assert response.json()["artifacts"] == ["summary.json", "trials.csv"]


def test_critical_points_endpoint(tmp_path):
    doc = {
        "kind": "critical_points", "seed": 1,
        "objective": {"surface": {"kind": "classical_saddle"}},
        "critical_points": {"n_jobs": 3, "max_iters": 30},
    }
    response = call("/experiments/critical-points",
                    {"config": doc, "out": str(tmp_path / "cp")})
    assert response.status_code == 200
    report = response.json()
    assert report["summary"]["n_jobs"] == 3
    assert "critical_points.csv" in report["artifacts"]


def test_jobs_override_travels_through(tmp_path):
    out = str(tmp_path / "j")
    first = call("/experiments/optimize",
                 {"config": optimize_config(), "out": out})
    bytes_one = (Path(out) / "trajectory.csv").read_bytes()
    again = call("/experiments/optimize",
                 {"config": optimize_config(), "out": out, "jobs": 4})
    assert first.status_code == again.status_code == 200
    assert (Path(out) / "trajectory.csv").read_bytes() == bytes_one


# ----------------------------------------------------------------------- cli

def test_parser_covers_all_commands():
    parser = build_parser()
    for name in COMMAND_ROUTES:
        args = parser.parse_args([name, "--config", "x.toml"])
        assert args.command == name
        assert args.config == "x.toml"
    serve = parser.parse_args(["serve", "--port", "9000"])
    assert serve.command == "serve" and serve.port == 9000
    with pytest.raises(SystemExit):
        parser.parse_args(["optimize"])  # --config is required
    with pytest.raises(SystemExit):
        parser.parse_args(["frobnicate", "--config", "x.toml"])


def test_cli_optimize_success(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(OPTIMIZE_TOML)
    out = tmp_path / "cli_out"
    code = main(["optimize", "--config", str(cfg), "--out", str(out)])
    assert code == EXIT_OK
    captured = capsys.readouterr()
    assert "optimize: wrote 2 artifact(s)" in captured.out
    assert "trajectory.csv" in captured.out
    assert (out / "summary.json").exists()


def test_cli_seed_override(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(OPTIMIZE_TOML)
    out = tmp_path / "seeded"
    code = main(["optimize", "--config", str(cfg), "--out", str(out),
                 "--seed", "9"])
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["seed"] == 9


def test_cli_missing_config_file(tmp_path, capsys):
    code = main(["optimize", "--config", str(tmp_path / "nope.toml")])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_invalid_toml(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("kind = [oops\n")
    code = main(["optimize", "--config", str(cfg)])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_kind_route_mismatch(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(OPTIMIZE_TOML)
    code = main(["compare", "--config", str(cfg),
                 "--out", str(tmp_path / "x")])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_schema_error_is_config_exit(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('kind = "optimize"\n')  # objective section missing
    code = main(["optimize", "--config", str(cfg)])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_runtime_failure_exit(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(
        'kind = "compare"\n'
        '[objective.surface]\n'
        'kind = "gutter"\n'
        'start = [1.0, 0.0]\n'
        '[search]\n'
        'samples = 2\n'
        'max_epochs = 3\n')
    code = main(["search", "--config", str(cfg),
                 "--out", str(tmp_path / "x")])
    assert code == EXIT_RUNTIME
    assert "run failed (HTTP 500)" in capsys.readouterr().err


def test_cli_unreachable_server(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(OPTIMIZE_TOML)
    code = main(["optimize", "--config", str(cfg),
                 "--server", "http://127.0.0.1:9"])
    assert code == EXIT_RUNTIME
    assert "service unreachable" in capsys.readouterr().err


def test_version_is_exposed():
    assert __version__ == "1.0.0"
