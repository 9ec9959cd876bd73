import json
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from minicloud.config import (
    MasterConfig,
    PlatformConfig,
    ProvisioningConfig,
    Role,
    UserAccount,
)
from minicloud.client import PlatformClient
from minicloud.foundation.accounting import PriceSheet
from minicloud.master import Master
from minicloud.provisioning import PoolConfig, PoolKind, ProvisioningPolicy

ADMIN_TOKEN = "admin-token-000000000000"
ALICE_TOKEN = "alice-token-000000000000"
BOB_TOKEN = "bob-token-00000000000000"
WORKER_TOKEN = "worker-token-0000000000"


def wait_until(predicate, timeout=15.0, interval=0.05, message="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise TimeoutError(f"timed out after {timeout}s waiting for {message}")


def base_config(**master_overrides) -> PlatformConfig:
    master = MasterConfig(heartbeat_period=0.4, sweep_interval=0.15,
                          dispatch_interval=0.05, sla_interval=0.25)
    for key, value in master_overrides.items():
        setattr(master, key, value)
    return PlatformConfig(
        master=master,
        price_sheet=PriceSheet.make("1/600"),
        provisioning=ProvisioningConfig(
            policy=ProvisioningPolicy(target_pending_per_slot=4, cooldown=30.0,
                                      enabled=False),
            eval_period=0.3),
        pools=[],
        users=[
            UserAccount(user_id="admin", role=Role.ADMIN, api_token=ADMIN_TOKEN,
                        display_name="Operator"),
            UserAccount(user_id="alice", role=Role.DEVELOPER, api_token=ALICE_TOKEN),
            UserAccount(user_id="bob", role=Role.DEVELOPER, api_token=BOB_TOKEN),
        ],
        worker_token=WORKER_TOKEN,
    )


class PlatformHarness:
    """In-process master plus real worker subprocesses."""

    def __init__(self, tmp: Path, config: PlatformConfig = None):
        self.tmp = tmp
        self.config = config or base_config()
        self.master = Master(self.config, state_dir=tmp / "state")
        self.master.start()
        self.workers: dict[str, subprocess.Popen] = {}
        self._worker_seq = 0

    # -- clients ---------------------------------------------------------------

    def client(self, token: str = ALICE_TOKEN) -> PlatformClient:
        return PlatformClient(self.master.api_url, token)

    @property
    def admin(self) -> PlatformClient:
        return self.client(ADMIN_TOKEN)

    # -- workers ----------------------------------------------------------------

    def spawn_worker(self, node_id: str = None, capacity: int = 1,
                     labels: str = "", pool: str = None) -> str:
        self._worker_seq += 1
        node_id = node_id or f"tw{self._worker_seq:03d}"
        argv = [sys.executable, "-m", "minicloud.cli", "worker",
                "--master", f"{self.master.tcp_address[0]}:{self.master.tcp_address[1]}",
                "--api", self.master.api_url,
                "--token", WORKER_TOKEN,
                "--node-id", node_id,
                "--capacity", str(capacity)]
        if labels:
            argv += ["--labels", labels]
        if pool:
            argv += ["--pool", pool]
        log = open(self.tmp / f"{node_id}.log", "w")
        proc = subprocess.Popen(argv, stdout=log, stderr=subprocess.STDOUT,
                                start_new_session=True)
        self.workers[node_id] = proc
        return node_id

    def spawn_workers(self, n: int, capacity: int = 1) -> list:
        ids = [self.spawn_worker(capacity=capacity) for _ in range(n)]
        self.wait_for_alive(len(self.alive_nodes()) + 0, minimum=len(ids))
        return ids

    def alive_nodes(self) -> list:
        return [n for n in self.admin.nodes() if n["state"] == "Alive"]

    def wait_for_alive(self, _ignored=0, minimum: int = 1, timeout: float = 15.0):
        return wait_until(
            lambda: len(self.alive_nodes()) >= minimum and self.alive_nodes(),
            timeout=timeout, message=f"{minimum} alive nodes")

    def kill_worker(self, node_id: str) -> None:
        """SIGKILL: the node disappears without deregistering."""
        proc = self.workers.pop(node_id)
        proc.kill()
        proc.wait()

    def events(self) -> list:
        return self.master.event_log.all_events()

    def stop(self) -> None:
        for node_id, proc in list(self.workers.items()):
            proc.terminate()
        for node_id, proc in list(self.workers.items()):
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self.workers.clear()
        self.master.stop()


@pytest.fixture
def platform(tmp_path):
    harness = PlatformHarness(tmp_path)
    yield harness
    harness.stop()


@pytest.fixture
def platform_factory(tmp_path):
    harnesses = []

    def make(config: PlatformConfig = None, subdir: str = None) -> PlatformHarness:
        root = tmp_path / (subdir or f"p{len(harnesses)}")
        root.mkdir(parents=True, exist_ok=True)
        harness = PlatformHarness(root, config)
        harnesses.append(harness)
        return harness

    yield make
    for harness in harnesses:
        harness.stop()
