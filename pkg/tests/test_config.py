from decimal import Decimal

import pytest

from minicloud.config import PlatformConfig, Role, load_config, parse_config
from minicloud.errors import ValidationFailed
from minicloud.provisioning import PoolKind

FULL = """
[master]
bind_host = "127.0.0.1"
tcp_port = 7001
api_port = 7002
heartbeat_period = 0.5
max_attempts = 2

[billing]
rate_per_node_second = "1/600"
currency = "credits"

[provisioning]
enabled = true
target_pending_per_slot = 4
cooldown = 12.5
eval_period = 0.5

[[pools]]
pool_id = "mock"
kind = "MockPublic"
max_nodes = 6
cost_rate = 0.01
spinup_delay = 2.0

[[users]]
user_id = "root"
name = "Operator"
role = "Admin"
token = "admin-token-0123456789"

[[users]]
user_id = "alice"
role = "Developer"
token = "alice-token-0123456789"

[worker]
token = "worker-token-0123456789"
"""


class TestParse:
    def test_full_document(self):
        config = parse_config(FULL)
        config.validate()
        assert config.master.tcp_port == 7001
        assert config.master.heartbeat_period == 0.5
        assert config.master.max_attempts == 2
        assert config.price_sheet.rate_per_node_second * 600 == Decimal(1)
        assert config.provisioning.policy.cooldown == 12.5
        assert config.pools[0].kind is PoolKind.MOCK_PUBLIC
        assert config.pools[0].max_nodes == 6
        assert [u.user_id for u in config.users] == ["root", "alice"]
        assert config.users[0].role is Role.ADMIN
        assert config.worker_token == "worker-token-0123456789"

    def test_defaults(self):
        config = parse_config("")
        config.validate()
        assert config.master.heartbeat_period == 1.0
        assert config.master.max_attempts == 3
        assert config.provisioning.policy.target_pending_per_slot == 4
        assert config.pools == []

    def test_unknown_master_key_rejected(self):
        with pytest.raises(ValidationFailed):
            parse_config("[master]\nwarp_speed = 9\n")

    def test_invalid_toml_rejected(self):
        with pytest.raises(ValidationFailed):
            parse_config("this is not toml ===")

    def test_duplicate_users_rejected(self):
        config = parse_config(FULL + """
[[users]]
user_id = "alice"
role = "Developer"
token = "token-token-0123456789"
""")
        with pytest.raises(ValidationFailed):
            config.validate()

    def test_short_token_rejected(self):
        with pytest.raises(ValidationFailed):
            parse_config('[[users]]\nuser_id = "u"\ntoken = "short"\n')

    def test_missing_token_generated(self):
        config = parse_config('[[users]]\nuser_id = "u"\nrole = "Admin"\n')
        assert len(config.users[0].api_token) == 32

    def test_bad_pool_kind(self):
        with pytest.raises(ValidationFailed):
            parse_config('[[pools]]\npool_id = "p"\nkind = "Imaginary"\n')

    def test_nonpositive_duration_rejected(self):
        config = parse_config("[master]\nheartbeat_period = 0.0\n")
        with pytest.raises(ValidationFailed):
            config.validate()

    def test_missing_dashboard_root_rejected(self, tmp_path):
        config = parse_config('[dashboard]\nroot = "nope-does-not-exist"\n')
        with pytest.raises(ValidationFailed):
            config.validate(base_dir=tmp_path)


class TestLoadConfig:
    def test_round_trip_from_file(self, tmp_path):
        path = tmp_path / "platform.toml"
        path.write_text(FULL, encoding="utf-8")
        config = load_config(path)
        assert config.master.api_port == 7002
