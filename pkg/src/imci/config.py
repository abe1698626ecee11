"""``key = value`` configuration files.

Values are typed by their defaults; unknown keys are rejected so typos do
not silently fall back to defaults. Command-line settings override the file.
"""

from __future__ import annotations

from pathlib import Path

DEFAULTS: dict[str, object] = {
    "phase1.workers": 4,
    "phase2.workers": 4,
    "precommit.threshold": 8192,
    "poll.interval_ms": 1.0,
    "router.threshold": 1000.0,
    "strong.timeout_ms": 1000.0,
    "query.batch_size": 1024,
    "group.size": 65536,
    "page.capacity": 64,
    "replay.batch_limit": 16384,
    "locator.flush_threshold": 4096,
    "locator.max_runs": 8,
    "compaction.enabled": False,
    "compaction.every_batches": 16,
    "checkpoint.min_interval_ms": 1000.0,
    "checkpoint.replay_image": True,
    "log.sync": "commit",
    "log.segment_bytes": 64 * 1024 * 1024,
    "tables": 100,
    "zipf.theta": 0.99,
    "proxy.host": "127.0.0.1",
    "proxy.port": 0,
}

DESCRIPTIONS = {
    "phase1.workers": "page-partitioned physical replay workers (W1)",
    "phase2.workers": "primary-key-partitioned apply workers (W2)",
    "precommit.threshold": "buffered statements before a transaction is pre-committed",
    "poll.interval_ms": "replica wake-up interval when no new log is announced",
    "router.threshold": "row-path cost above which queries use the column path",
    "strong.timeout_ms": "wait for a caught-up replica before a strong read falls back to the writer",
    "query.batch_size": "rows per batch in the column pipeline",
    "group.size": "rows per row group",
    "page.capacity": "rows per leaf page in the row store",
    "replay.batch_limit": "log entries fetched per replay batch",
    "locator.flush_threshold": "memtable entries before the RID locator flushes a run",
    "locator.max_runs": "immutable runs kept before the locator merges",
    "compaction.enabled": "run column-index compaction on the replay thread",
    "compaction.every_batches": "replay batches between compaction passes",
    "checkpoint.min_interval_ms": "minimum spacing of flush-triggered checkpoints",
    "checkpoint.replay_image": "also save buffer-pool pages and open transactions so new nodes skip re-parsing old log",
    "log.sync": "fsync policy: commit, always or none",
    "log.segment_bytes": "redo segment size before rolling to a new file",
    "tables": "tables in the synthetic catalog created by init",
    "zipf.theta": "skew of write_only_zipf key choice",
    "proxy.host": "proxy listen address",
    "proxy.port": "proxy listen port (0 = pick a free one)",
}


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, str):
        raw = raw.strip()
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        low = str(raw).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return str(raw)


class Config(dict):
    def __init__(self, values: dict | None = None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise KeyError(f"unknown config key {key!r}")
        self[key] = _coerce(key, value)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "Config":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{source}:{n}: expected 'key = value'")
            k, v = line.split("=", 1)
            try:
                cfg.set(k.strip(), v)
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{source}:{n}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "Config":
        p = Path(path)
        cfg = cls.parse(p.read_text(), str(p)) if p.exists() else cls()
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg.set(k, v)
        return cfg

    def dump(self) -> str:
        lines = []
        for k in DEFAULTS:
            lines.append(f"# {DESCRIPTIONS[k]}")
            v = self[k]
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def replay_config(self):
        from .replication import ReplayConfig

        return ReplayConfig(
            phase1_workers=self["phase1.workers"],
            phase2_workers=self["phase2.workers"],
            precommit_threshold=self["precommit.threshold"],
            poll_interval_ms=self["poll.interval_ms"],
            group_size=self["group.size"],
            batch_limit=self["replay.batch_limit"],
            locator_flush=self["locator.flush_threshold"],
            locator_max_runs=self["locator.max_runs"],
            compaction=self["compaction.enabled"],
            compaction_every=self["compaction.every_batches"],
        )
