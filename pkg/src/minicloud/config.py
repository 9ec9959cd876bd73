"""Platform configuration: a TOML file with documented keys only.

Sections: [master] timings and limits, [billing] the price sheet,
[provisioning] the elasticity policy, [[pools]] resource pool definitions,
[[users]] accounts with bearer tokens, [worker] the node-side shared token,
[dashboard] optional static console root.
"""

from __future__ import annotations

import enum
import secrets
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib  # Python >= 3.11
except ImportError:  # pragma: no cover
    import tomli as tomllib

from .errors import ValidationFailed
from .foundation.accounting import PriceSheet
from .provisioning import PoolConfig, PoolKind, ProvisioningPolicy

MIN_TOKEN_LENGTH = 16


class Role(str, enum.Enum):
    DEVELOPER = "Developer"
    ADMIN = "Admin"
    WORKER = "Worker"  # internal principal for node-side staging access


def new_token() -> str:
    return secrets.token_hex(16)


@dataclass
class UserAccount:
    user_id: str
    role: Role
    api_token: str
    display_name: str = ""

    def __post_init__(self):
        if not self.user_id:
            raise ValidationFailed("user_id must be nonempty")
        if len(self.api_token) < MIN_TOKEN_LENGTH:
            raise ValidationFailed(
                f"token for {self.user_id} is shorter than {MIN_TOKEN_LENGTH} characters")

    def to_doc(self, with_token: bool = False) -> dict:
        doc = {"user_id": self.user_id, "role": self.role.value,
               "display_name": self.display_name}
        if with_token:
            doc["api_token"] = self.api_token
        return doc


@dataclass
class MasterConfig:
    bind_host: str = "127.0.0.1"
    tcp_port: int = 0  # 0 = pick a free port
    api_port: int = 0
    state_dir: str = "platform-state"
    heartbeat_period: float = 1.0
    sweep_interval: float = 0.5
    dispatch_interval: float = 0.05
    sla_interval: float = 0.5
    max_attempts: int = 3
    frame_limit: int = 16 * 1024 * 1024
    storage_cap: int = 256 * 1024 * 1024

    def validate(self) -> None:
        for name in ("heartbeat_period", "sweep_interval", "dispatch_interval", "sla_interval"):
            if getattr(self, name) <= 0:
                raise ValidationFailed(f"master.{name} must be > 0")
        if self.max_attempts < 1:
            raise ValidationFailed("master.max_attempts must be >= 1")


@dataclass
class ProvisioningConfig:
    policy: ProvisioningPolicy = field(default_factory=ProvisioningPolicy)
    eval_period: float = 1.0

    def validate(self) -> None:
        if self.eval_period <= 0:
            raise ValidationFailed("provisioning.eval_period must be > 0")


@dataclass
class PlatformConfig:
    master: MasterConfig = field(default_factory=MasterConfig)
    price_sheet: PriceSheet = field(default_factory=lambda: PriceSheet.make("1/600"))
    provisioning: ProvisioningConfig = field(default_factory=ProvisioningConfig)
    pools: list = field(default_factory=list)
    users: list = field(default_factory=list)
    worker_token: str = ""
    dashboard_root: Optional[str] = None

    def validate(self, base_dir: Optional[Path] = None) -> None:
        self.master.validate()
        self.provisioning.validate()
        seen_users = set()
        seen_tokens = set()
        for account in self.users:
            if account.user_id in seen_users:
                raise ValidationFailed(f"duplicate user_id {account.user_id}")
            if account.api_token in seen_tokens:
                raise ValidationFailed(f"duplicate token for {account.user_id}")
            seen_users.add(account.user_id)
            seen_tokens.add(account.api_token)
        if self.worker_token and len(self.worker_token) < MIN_TOKEN_LENGTH:
            raise ValidationFailed("worker.token is too short")
        seen_pools = set()
        for pool in self.pools:
            if pool.pool_id in seen_pools:
                raise ValidationFailed(f"duplicate pool_id {pool.pool_id}")
            seen_pools.add(pool.pool_id)
            if pool.max_nodes < 0 or pool.node_capacity < 1 or pool.spinup_delay < 0:
                raise ValidationFailed(f"pool {pool.pool_id} has invalid limits")
        if self.dashboard_root is not None:
            root = Path(self.dashboard_root)
            if base_dir is not None and not root.is_absolute():
                root = base_dir / root
            if not root.is_dir():
                raise ValidationFailed(f"dashboard.root {root} does not exist")

    def admin_accounts(self) -> list[UserAccount]:
        return [u for u in self.users if u.role is Role.ADMIN]


def _parse_user(doc: dict) -> UserAccount:
    return UserAccount(
        user_id=doc.get("user_id", ""),
        role=Role(doc.get("role", "Developer")),
        api_token=doc.get("token") or new_token(),
        display_name=doc.get("name", ""),
    )


def _parse_pool(doc: dict) -> PoolConfig:
    try:
        kind = PoolKind(doc.get("kind", "MockPublic"))
    except ValueError:
        raise ValidationFailed(f"unknown pool kind {doc.get('kind')!r}")
    return PoolConfig(
        pool_id=doc.get("pool_id", ""),
        kind=kind,
        max_nodes=int(doc.get("max_nodes", 0)),
        cost_rate=float(doc.get("cost_rate", 0.0)),
        spinup_delay=float(doc.get("spinup_delay", 2.0)),
        node_capacity=int(doc.get("node_capacity", 1)),
        node_labels=tuple(doc.get("node_labels", ())),
    )


def parse_config(text: str) -> PlatformConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationFailed(f"config is not valid TOML: {exc}") from exc

    config = PlatformConfig()
    master_doc = doc.get("master", {})
    for key, value in master_doc.items():
        if not hasattr(config.master, key):
            raise ValidationFailed(f"unknown key master.{key}")
        setattr(config.master, key, type(getattr(config.master, key))(value))

    billing = doc.get("billing", {})
    if billing:
        config.price_sheet = PriceSheet.make(
            billing.get("rate_per_node_second", "1/600"),
            billing.get("currency", "credits"))

    prov = doc.get("provisioning", {})
    if prov:
        config.provisioning = ProvisioningConfig(
            policy=ProvisioningPolicy(
                target_pending_per_slot=int(prov.get("target_pending_per_slot", 4)),
                cooldown=float(prov.get("cooldown", 30.0)),
                enabled=bool(prov.get("enabled", True))),
            eval_period=float(prov.get("eval_period", 1.0)))

    config.pools = [_parse_pool(p) for p in doc.get("pools", [])]
    config.users = [_parse_user(u) for u in doc.get("users", [])]
    config.worker_token = doc.get("worker", {}).get("token", "") or new_token()
    dashboard = doc.get("dashboard", {})
    if dashboard.get("root"):
        config.dashboard_root = dashboard["root"]
    return config


def load_config(path: str | Path) -> PlatformConfig:
    path = Path(path)
    config = parse_config(path.read_text(encoding="utf-8"))
    config.validate(base_dir=path.parent)
    return config
