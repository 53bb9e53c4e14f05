"""Flat ``key = value`` configuration with ``PH_*`` environment overrides.

Example::

    # provholder.conf
    key_store      = keys.phk
    object_record  = record.phr
    providers      = main, mirror, stamps
    provider.main   = simple:stores/main
    provider.mirror = simple:stores/mirror
    provider.stamps = timestamp:timestamp.json
    select.execution = main, mirror, stamps
    batch_size     = 16
    batch_interval = 10
    poll_period    = 5
    resubmit_after = 3
    authority      = mock            # or http://host:port
    mock.delay_cycles = 2            # "never" keeps submissions pending
    mock.failure_rate = 0.0

Relative paths resolve against ``data_dir``, which defaults to the directory
holding the config file, or ``./ph-data`` without one. An environment
variable ``PH_<KEY>`` overrides a key, with ``.`` spelled ``__`` and ``-``
spelled ``_`` (for instance ``PH_BATCH_SIZE`` or ``PH_PROVIDER__MAIN``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .encoding import Kind
from .errors import ConfigError

DEFAULTS: dict[str, str] = {
    "key_store": "keys.phk",
    "object_record": "record.phr",
    "lock_file": "provholder.lock",
    "providers": "simple, timestamp",
    "provider.simple": "simple:simple",
    "provider.timestamp": "timestamp:timestamp.json",
    "batch_size": "16",
    "batch_interval": "10",
    "poll_period": "5",
    "resubmit_after": "3",
    "max_queue": "",
    "authority": "mock",
    "mock.delay_cycles": "2",
    "mock.failure_rate": "0",
    "mock.seed": "0",
    "mock.state": "authority.json",
    "durable": "true",
}

PROVIDER_TYPES = ("simple", "timestamp")


@dataclass(frozen=True)
class ProviderSpec:
    id: str
    type: str
    path: Path


@dataclass
class Config:
    data_dir: Path
    key_store: Path
    object_record: Path
    lock_file: Path
    providers: list[ProviderSpec]
    selection: dict[Kind, list[str]] = field(default_factory=dict)
    batch_size: int = 16
    batch_interval: float = 10.0
    poll_period: float = 5.0
    resubmit_after: int = 3
    max_queue: int | None = None
    authority: str = "mock"
    mock_delay_cycles: int | None = 2
    mock_failure_rate: float = 0.0
    mock_seed: int = 0
    mock_state: Path | None = None
    durable: bool = True

    def provider(self, provider_id: str) -> ProviderSpec:
        for spec in self.providers:
            if spec.id == provider_id:
                return spec
        raise ConfigError(f"no provider {provider_id!r} in the roster")

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.resubmit_after < 1:
            raise ConfigError("resubmit_after must be >= 1")
        if self.poll_period <= 0 or self.batch_interval < 0:
            raise ConfigError("poll_period must be > 0 and batch_interval >= 0")
        if not 0.0 <= self.mock_failure_rate <= 1.0:
            raise ConfigError("mock.failure_rate must lie in [0, 1]")
        if not self.providers:
            raise ConfigError("at least one provider is required")
        paths = [self.key_store, self.object_record, self.lock_file]
        paths += [p.path for p in self.providers]
        if self.authority == "mock" and self.mock_state is not None:
            paths.append(self.mock_state)
        resolved = [p.resolve() for p in paths]
        if len(set(resolved)) != len(resolved):
            raise ConfigError("configured paths must be distinct")
        ids = [p.id for p in self.providers]
        if len(set(ids)) != len(ids):
            raise ConfigError("provider ids must be unique")
        for kind, chosen in self.selection.items():
            for pid in chosen:
                if pid not in ids:
                    raise ConfigError(f"select.{kind.label} names unknown provider {pid!r}")


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def _env_name(key: str) -> str:
    return "PH_" + key.upper().replace(".", "__").replace("-", "_")


def _apply_env(values: dict[str, str], env: Mapping[str, str]) -> None:
    known = set(DEFAULTS) | set(values) | {"data_dir"}
    known |= {f"select.{k.label}" for k in Kind}
    roster = env.get(_env_name("providers"), values.get("providers", ""))
    known |= {f"provider.{pid.strip()}" for pid in roster.split(",") if pid.strip()}
    for key in known:
        name = _env_name(key)
        if name in env:
            values[key] = env[name]


def _list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def load_config(
    path: str | os.PathLike | None = None,
    *,
    data_dir: str | os.PathLike | None = None,
    env: Mapping[str, str] | None = None,
) -> Config:
    """Read ``path`` (if given and present), apply env overrides, validate."""
    env = os.environ if env is None else env
    values = dict(DEFAULTS)
    base = Path.cwd()
    loaded = False
    if path is not None:
        path = Path(path)
        if path.exists():
            file_values = parse_text(path.read_text(encoding="utf-8"))
            if "providers" in file_values:
                for key in [k for k in values if k.startswith("provider.")]:
                    del values[key]
            values.update(file_values)
            base = path.resolve().parent
            loaded = True
        elif path.name != "provholder.conf":
            raise ConfigError(f"config file {path} does not exist")
    _apply_env(values, env)
    if data_dir is not None:
        values["data_dir"] = str(data_dir)
    root = Path(values.get("data_dir") or (base if loaded else base / "ph-data"))
    if not root.is_absolute():
        root = base / root

    def p(value: str) -> Path:
        q = Path(value).expanduser()
        return q if q.is_absolute() else root / q

    try:
        providers = []
        for pid in _list(values["providers"]):
            spec = values.get(f"provider.{pid}")
            if not spec:
                raise ConfigError(f"provider {pid!r} listed but provider.{pid} is not set")
            ptype, sep, ppath = spec.partition(":")
            if not sep or ptype not in PROVIDER_TYPES or not ppath:
                raise ConfigError(f"provider.{pid} must look like 'simple:<dir>' or 'timestamp:<file>'")
            providers.append(ProviderSpec(pid, ptype, p(ppath)))
        selection = {}
        for kind in Kind:
            chosen = values.get(f"select.{kind.label}")
            if chosen:
                selection[kind] = _list(chosen)
        delay = values["mock.delay_cycles"].strip().lower()
        cfg = Config(
            data_dir=root,
            key_store=p(values["key_store"]),
            object_record=p(values["object_record"]),
            lock_file=p(values["lock_file"]),
            providers=providers,
            selection=selection,
            batch_size=int(values["batch_size"]),
            batch_interval=float(values["batch_interval"]),
            poll_period=float(values["poll_period"]),
            resubmit_after=int(values["resubmit_after"]),
            max_queue=int(values["max_queue"]) if values.get("max_queue") else None,
            authority=values["authority"],
            mock_delay_cycles=None if delay in ("never", "none", "") else int(delay),
            mock_failure_rate=float(values["mock.failure_rate"]),
            mock_seed=int(values["mock.seed"]),
            mock_state=p(values["mock.state"]) if values.get("mock.state") else None,
            durable=values["durable"].strip().lower() in ("1", "true", "yes", "on"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from None
    cfg.validate()
    return cfg
