import socket
import threading
import time

import pytest
import requests
import uvicorn

from qgen_sidecar.app import create_app
from qgen_sidecar.config import SidecarConfig


def _free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class LiveServer:
    def __init__(self, config: SidecarConfig):
        self.port = _free_port()
        self.base_url = f"http://127.0.0.1:{self.port}"
        uv_config = uvicorn.Config(
            create_app(config), host="127.0.0.1", port=self.port, log_level="warning"
        )
        self.server = uvicorn.Server(uv_config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def start(self):
        self.thread.start()
        deadline = time.monotonic() + 15
        while time.monotonic() < deadline:
            try:
                if requests.get(f"{self.base_url}/health", timeout=1).status_code == 200:
                    return self
            except requests.RequestException:
                time.sleep(0.05)
        raise RuntimeError("sidecar did not come up in time")

    def stop(self):
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture(scope="session")
def live_sidecar():
    server = LiveServer(SidecarConfig()).start()
    yield server.base_url
    server.stop()
