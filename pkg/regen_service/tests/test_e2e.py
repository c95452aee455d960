"""End-to-end: the trainer's remote predictor against a live mock service.

Launches the service on a free port, then drives the training CLI as a
subprocess with its service URL pointed at it, through one full bootstrap
interval on a synthetic scene.  The only coupling to the trainer package
is its public command line and the wire protocol.
"""

import os
import socket
import subprocess
import threading
import time

import pytest
import uvicorn
import yaml

from regen_service.app import create_app
from regen_service.backends import MockBackend


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture()
def live_service():
    app = create_app(MockBackend())
    counts = {"regenerate": 0}

    @app.middleware("http")
    async def count_requests(request, call_next):
        if request.url.path == "/v1/regenerate":
            counts["regenerate"] += 1
        return await call_next(request)

    port = _free_port()
    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port,
                                           log_level="error"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 20
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("service did not start")
        time.sleep(0.05)
    yield port, counts
    server.should_exit = True
    thread.join(timeout=10)


def _run_cli(args, env=None):
    return subprocess.run(["bootsplat", *args], capture_output=True,
                          text=True, timeout=600, env=env)


def test_primary_client_completes_bootstrap_interval(tmp_path, live_service):
    port, counts = live_service
    scene_dir = tmp_path / "scene"
    out_dir = tmp_path / "run"

    made = _run_cli(["make-toy-scene", "--out", str(scene_dir),
                     "--gaussians", "20", "--cameras", "6", "--size", "24",
                     "--seed", "5"])
    assert made.returncode == 0, made.stderr

    cfg_file = tmp_path / "boot.yaml"
    cfg_file.write_text(yaml.safe_dump({
        "bootstrap": {
            "enabled": True,
            "predictor": "remote",
            "mode": "consecutive",
            "intervals": [2],
            "interval_length": 3,
            "lambda_switch": 1,
            "s_r_start": 0.1,
            "s_r_end": 0.1,
        },
    }))

    env = dict(os.environ,
               BOOTSPLAT_SERVICE_URL=f"http://127.0.0.1:{port}")
    trained = _run_cli(["train", "--scene", str(scene_dir),
                        "--out", str(out_dir), "--iters", "6",
                        "--seed", "3", "--config", str(cfg_file)], env=env)
    assert trained.returncode == 0, trained.stderr

    # 6 ring cameras with every 8th held out -> 5 training anchors; the
    # two edge batches carry 4 variants and the three interior ones 6.
    assert counts["regenerate"] == 4 + 6 + 6 + 6 + 4
    assert (out_dir / "final.bsplat").exists()


def test_health_over_the_wire(live_service):
    port, _ = live_service
    import requests

    r = requests.get(f"http://127.0.0.1:{port}/v1/health", timeout=10)
    assert r.status_code == 200
    assert r.json()["status"] == "ok"
