"""End-to-end: the attack toolkit drives this server over real HTTP."""

import json
import socket
import subprocess
import sys
import threading
import time

import numpy as np
import pytest
import requests
import uvicorn
from PIL import Image

from modelserver import ServerConfig, create_app


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="module")
def served_tinycnn():
    port = free_port()
    config = ServerConfig(model="tinycnn", num_classes=8, seed=3, input_size=(64, 64))
    server = uvicorn.Server(uvicorn.Config(create_app(config), host="127.0.0.1",
                                           port=port, log_level="error"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{port}"
    for _ in range(100):
        try:
            if requests.get(f"{base}/info", timeout=1).status_code == 200:
                break
        except requests.RequestException:
            time.sleep(0.1)
    else:
        pytest.fail("server did not come up")
    yield base
    server.should_exit = True
    thread.join(timeout=5)


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("assets")
    hosts = root / "hosts"
    hosts.mkdir()
    rng = np.random.default_rng(42)
    for k in range(5):
        arr = rng.integers(60, 196, size=(64, 64, 3)).astype(np.uint8)
        Image.fromarray(arr).save(hosts / f"host_{k}.png")
    wm = np.zeros((16, 16, 4), dtype=np.uint8)
    wm[:, :, 3] = 255
    Image.fromarray(wm).save(root / "wm.png")
    return root


def test_full_attack_against_served_model(served_tinycnn, image_dir, tmp_path):
    out_dir = tmp_path / "run"
    cmd = [
        sys.executable, "-m", "advmark.cli", "attack",
        "--host", str(image_dir / "hosts"), "--watermark", str(image_dir / "wm.png"),
        "--scale", "1/4", "--oracle", served_tinycnn,
        "--seed", "0", "--budget", "150", "--generations", "2", "--population", "6",
        "--out", str(out_dir),
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr

    records = [json.loads(line) for line in (out_dir / "results.jsonl").read_text().splitlines()]
    assert len(records) == 5
    for record in records:
        assert isinstance(record["success"], bool)
        assert record["queries"] <= 150
        assert 0.0 <= record["clean_prob_t"] <= 1.0
        assert 0.0 <= record["final_prob_t"] <= 1.0
        if record["success"]:
            assert record["final_class"] != record["true_class"]
            assert 0 <= record["alpha"] <= 255
    summary = json.loads((out_dir / "summary.json").read_text())
    assert 0.0 <= summary["success_rate"] <= 1.0
    assert summary["success_rate"] == pytest.approx(
        sum(r["success"] for r in records) / len(records)
    )
    print(f"e2e success_rate={summary['success_rate']:.2f} "
          f"queries={[r['queries'] for r in records]}")


def test_analysis_sweep_against_served_model(served_tinycnn, image_dir, tmp_path):
    out_dir = tmp_path / "profiles"
    cmd = [
        sys.executable, "-m", "advmark.cli", "analyze",
        "--host", str(image_dir / "hosts" / "host_0.png"), "--watermark", str(image_dir / "wm.png"),
        "--scale", "1/4", "--oracle", served_tinycnn,
        "--seed", "1", "--budget", "80", "--generations", "1", "--population", "4",
        "--out", str(out_dir),
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    data = json.loads((out_dir / "profiles.json").read_text())
    layers = list(data["adversarial_average"])
    assert layers == ["conv1", "conv2", "fc"]
    assert all(value >= 0 for value in data["adversarial_average"].values())
