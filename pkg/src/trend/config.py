"""Run configuration and its flat, sectioned text format.

Example::

    [run]
    env = point_reach
    mode = trend
    total_steps = 20000

    [query]
    noise = 0.4

Every field of :class:`RunConfig` belongs to exactly one section; unknown
sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .envs import EnvKind

MODES = ("trend", "trend_no_demo", "pebble", "pebble_demo", "self_teach")


class ConfigError(ValueError):
    pass


def _section(name: str, **kw):
    return field(metadata={"section": name}, **kw)


@dataclass
class RunConfig:
    # [run]
    env: str = _section("run", default="point_reach")
    mode: str = _section("run", default="trend")
    seed: int = _section("run", default=0)
    total_steps: int = _section("run", default=20_000)
    reward_source: str = _section("run", default="learned")  # learned | true
    annotator: str = _section("run", default="scripted")  # scripted | mock_vlm
    vlm_fixture: str = _section("run", default="")

    # [trend]
    gamma_rate: Optional[float] = _section("trend", default=None)
    schedule: Optional[str] = _section("trend", default=None)  # tri | self
    lambda_bc: float = _section("trend", default=4.0)
    n_demos: Optional[int] = _section("trend", default=None)
    alpha_start: float = _section("trend", default=0.5)
    alpha_end: float = _section("trend", default=0.25)
    alpha_horizon_frac: float = _section("trend", default=0.5)
    reselect: str = _section("trend", default="minibatch")  # minibatch | session

    # [reward]
    reward_hidden: tuple = _section("reward", default=(64, 64, 64))
    reward_lr: float = _section("reward", default=3e-4)
    reward_output: str = _section("reward", default="identity")
    reward_epochs: int = _section("reward", default=50)
    reward_batch: int = _section("reward", default=64)
    segment_len: int = _section("reward", default=50)
    tau_tie: float = _section("reward", default=1e-9)
    exclude_ties: bool = _section("reward", default=False)

    # [query]
    noise: float = _section("query", default=0.0)
    budget: int = _section("query", default=1400)
    per_session: int = _section("query", default=20)
    pool: int = _section("query", default=200)
    session_interval: int = _section("query", default=2000)
    count_skips: bool = _section("query", default=True)

    # [sac]
    sac_hidden: tuple = _section("sac", default=(64, 64))
    sac_lr: float = _section("sac", default=3e-4)
    alpha_ent: float = _section("sac", default=0.1)
    discount: float = _section("sac", default=0.99)
    tau: float = _section("sac", default=0.005)
    batch_size: int = _section("sac", default=256)
    buffer_capacity: int = _section("sac", default=100_000)
    learning_starts: int = _section("sac", default=1000)

    # [bc]
    bc_epochs: int = _section("bc", default=500)
    bc_lr: float = _section("bc", default=1e-3)
    bc_early_stop: bool = _section("bc", default=True)

    # [eval]
    eval_interval: int = _section("eval", default=2000)
    eval_episodes: int = _section("eval", default=20)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # resolved, mode-dependent values
    @property
    def effective_gamma(self) -> float:
        if self.gamma_rate is not None:
            return self.gamma_rate
        return 1.0 if self.mode in ("pebble", "pebble_demo") else 0.6

    @property
    def effective_schedule(self) -> str:
        if self.schedule is not None:
            return self.schedule
        return "tri" if self.mode in ("trend", "trend_no_demo") else "self"

    @property
    def effective_demos(self) -> int:
        if self.n_demos is not None:
            return self.n_demos
        return 0 if self.mode in ("pebble", "trend_no_demo") else 1

    def validate(self) -> "RunConfig":
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        try:
            EnvKind(self.env)
        except ValueError:
            bad("env", f"unknown env {self.env!r} (choose from {[k.value for k in EnvKind]})")
        if self.mode not in MODES:
            bad("mode", f"unknown mode {self.mode!r} (choose from {list(MODES)})")
        if self.reward_source not in ("learned", "true"):
            bad("reward_source", "must be 'learned' or 'true'")
        if self.annotator not in ("scripted", "mock_vlm"):
            bad("annotator", "must be 'scripted' or 'mock_vlm'")
        if self.annotator == "mock_vlm" and not self.vlm_fixture:
            bad("vlm_fixture", "required when annotator = mock_vlm")
        g, sched, nd = self.effective_gamma, self.effective_schedule, self.effective_demos
        if not 0.0 < g <= 1.0:
            bad("gamma_rate", f"must be in (0, 1], got {g}")
        if sched not in ("tri", "self"):
            bad("schedule", f"must be 'tri' or 'self', got {sched!r}")
        if not 0 <= nd <= 3:
            bad("n_demos", f"must be 0-3, got {nd}")
        if self.reselect not in ("minibatch", "session"):
            bad("reselect", "must be 'minibatch' or 'session'")
        if self.reward_output not in ("identity", "tanh"):
            bad("reward_output", "must be 'identity' or 'tanh'")
        if self.mode == "pebble" and (g != 1.0 or sched != "self" or nd != 0):
            bad("mode", "pebble requires gamma_rate = 1.0, schedule = self, n_demos = 0")
        if self.mode == "pebble_demo" and (g != 1.0 or sched != "self" or nd < 1):
            bad("mode", "pebble_demo requires gamma_rate = 1.0, schedule = self, n_demos >= 1")
        if self.mode == "trend_no_demo" and nd != 0:
            bad("mode", "trend_no_demo requires n_demos = 0")
        if self.mode == "self_teach" and sched != "self":
            bad("mode", "self_teach requires schedule = self")
        if not 0.0 <= self.noise <= 1.0:
            bad("noise", f"must be in [0, 1], got {self.noise}")
        if self.per_session > self.pool:
            bad("per_session", f"must not exceed pool ({self.pool})")
        if self.segment_len < 1 or self.segment_len > 100:
            bad("segment_len", "must be in [1, episode length 100]")
        for name in ("total_steps", "batch_size", "eval_interval", "eval_episodes",
                     "session_interval", "reward_batch", "per_session", "pool", "buffer_capacity"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("budget", "reward_epochs", "bc_epochs", "learning_starts"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if not (0.0 <= self.alpha_end <= self.alpha_start <= 1.0):
            bad("alpha_start", "need 0 <= alpha_end <= alpha_start <= 1")
        if nd == 0 and self.learning_starts < 2 * 100:
            bad("learning_starts", "needs at least two full episodes (200 steps) of warmup")
        if self.reward_source == "learned" and self.learning_starts > self.eval_interval:
            bad("learning_starts", "first reward session must precede the first evaluation")
        return self


def _field_sections() -> dict[str, dict[str, dataclasses.Field]]:
    out: dict[str, dict[str, dataclasses.Field]] = {}
    for f in fields(RunConfig):
        out.setdefault(f.metadata["section"], {})[f.name] = f
    return out


def _convert(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    default = f.default
    if raw.lower() in ("none", "") and f.type.startswith("Optional"):
        return None
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    kind = f.type.replace("Optional[", "").rstrip("]")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str  # keep key case; keys are field names
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sections = _field_sections()
    values = {}
    for sec in parser.sections():
        if sec not in sections:
            raise ConfigError(f"{source}: unknown section [{sec}] (known: {sorted(sections)})")
        for key, raw in parser.items(sec):
            if key not in sections[sec]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
            try:
                values[key] = _convert(sections[sec][key], raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{sec}] {key}: {exc}") from None
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def dump_config(config: RunConfig) -> str:
    lines = []
    for sec, fs in _field_sections().items():
        lines.append(f"[{sec}]")
        for name in fs:
            v = getattr(config, name)
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            lines.append(f"{name} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
