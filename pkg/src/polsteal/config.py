"""Flat ``key = value`` experiment configs, seed streams, and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .attack import AttackConfig
from .envs import DEFAULTS, EnvSpec
from .errors import ConfigError

OUTPUT_ROOT_VAR = "POLSTEAL_OUTPUT_ROOT"

# labeled offsets: each consumer draws from its own stream, so toggling one
# feature (e.g. the defense) leaves every other stream untouched
STREAM_OFFSETS = {"victim": 0, "attack": 1_000_003, "defense": 2_000_003, "eval": 3_000_017, "analysis": 4_000_037}


def stream_seed(seed: int, label: str) -> int:
    return int(seed) + STREAM_OFFSETS[label]


@dataclass(frozen=True)
class VictimSection:
    trajectories: int = 100
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 300
    batch_size: int = 1024
    learning_rate: float = 1e-3
    target_loss: float = 1e-3
    dir: str = ""


@dataclass(frozen=True)
class AttackSection:
    init: str = "standard"
    total_budget: int = 2_000_000
    reserved_budget: int = 200_000
    base_budget: int = 20_000
    attacker_budget: int | None = None
    epochs_per_iter: int = 5
    family: str = "diagonal"
    fixed_evaluator_budget: bool = True
    use_reward_model: bool = True
    prune: bool = True
    dynamic_bc_budget: bool = True
    reward_steps: int = 400
    reward_hidden: tuple[int, ...] = (256,)
    policy_hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 128
    final_patience: int = 20
    final_max_epochs: int = 2000
    eval_episodes: int = 8


@dataclass(frozen=True)
class DefenseSection:
    enabled: bool = False


@dataclass(frozen=True)
class AnalysisSection:
    count: int = 200
    points_per_dist: int = 10_000
    z_max: float = 4.0
    hidden: tuple[int, ...] = (64, 64)
    batch_size: int = 128
    learning_rate: float = 1e-3
    lambdas: tuple[float, ...] = (0.5, 1.0, 2.0)
    zs: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    queries_per_point: int = 100_000


_ENV_FIELDS = [f.name for f in dataclasses.fields(EnvSpec) if f.name not in ("name", "r_min")]


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    env_name: str = "linear_reach"
    env: dict = field(default_factory=dict)
    victim: VictimSection = VictimSection()
    attack: AttackSection = AttackSection()
    defense: DefenseSection = DefenseSection()
    analysis: AnalysisSection = AnalysisSection()

    def env_overrides(self) -> dict:
        return dict(self.env)

    def attack_config(self, ref=None) -> AttackConfig:
        """AttackConfig for this experiment; the shifted protocol needs the reference fit."""
        a = dataclasses.asdict(self.attack)
        init = a.pop("init")
        a.pop("eval_episodes")
        if init == "shifted3sigma":
            if ref is None:
                raise ConfigError("attack.init = shifted3sigma needs the victim's reference statistics")
            a["init_mu"] = tuple((ref.mu_star + 3.0 * ref.sigma_star).tolist())
            a["init_sigma"] = tuple(ref.sigma_star.tolist())
        return AttackConfig(seed=stream_seed(self.seed, "attack"), **a)

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_VAR)
        return Path(root) if root else Path(self.output_dir)

    def victim_dir(self) -> Path:
        return Path(self.victim.dir) if self.victim.dir else self.output_path() / "victim"


_SECTIONS = {"victim": VictimSection, "attack": AttackSection, "defense": DefenseSection, "analysis": AnalysisSection}


def _env_defaults(name) -> dict:
    if name not in DEFAULTS:
        raise ConfigError(f"unknown environment {name!r}")
    base = {f.name: f.default for f in dataclasses.fields(EnvSpec) if f.name in _ENV_FIELDS}
    base.update(DEFAULTS[name])
    return base


def _hints(cls):
    return typing.get_type_hints(cls)


def _coerce(text: str, hint, key):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if text.lower() == "none":
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(text, inner[0], key)
    if origin is tuple:
        if not text:
            return ()
        return tuple(_coerce(part, args[0], key) for part in text.split(","))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {text!r} as {hint.__name__}") from exc
    raise ConfigError(f"{key}: unsupported type {hint}")


def _env_hint(name):
    return _hints(EnvSpec)[name]


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def parse_config(text: str, origin="<config>") -> ExperimentConfig:
    """Parse ``key = value`` lines; unknown keys and malformed lines raise ConfigError."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        raw[key] = (value, lineno)
    try:
        return build_config({k: v for k, (v, _) in raw.items()})
    except ConfigError as exc:
        key = getattr(exc, "key", None)
        if key in raw:
            raise ConfigError(f"{origin}:{raw[key][1]}: {exc}") from None
        raise


def _fail(key, msg):
    err = ConfigError(msg)
    err.key = key
    return err


def build_config(values: dict) -> ExperimentConfig:
    """Resolve a flat mapping of string values into a fully materialized config."""
    top, env, sections = {}, {}, {name: {} for name in _SECTIONS}
    env_name = values.get("env.name", "linear_reach")
    if env_name not in DEFAULTS:
        raise _fail("env.name", f"unknown environment {env_name!r}")
    for key, text in values.items():
        if key in ("seed", "output_dir"):
            top[key] = _coerce(text, int if key == "seed" else str, key)
            continue
        if key == "env.name":
            continue
        prefix, _, name = key.partition(".")
        if prefix == "env" and name in _ENV_FIELDS:
            try:
                env[name] = _coerce(text, _env_hint(name), key)
            except ConfigError as exc:
                raise _fail(key, str(exc)) from None
        elif prefix in _SECTIONS and name in _hints(_SECTIONS[prefix]):
            try:
                sections[prefix][name] = _coerce(text, _hints(_SECTIONS[prefix])[name], key)
            except ConfigError as exc:
                raise _fail(key, str(exc)) from None
        else:
            raise _fail(key, f"unknown key {key!r}")
    resolved_env = _env_defaults(env_name)
    resolved_env.update(env)
    try:
        # validate the environment now rather than at first use
        EnvSpec(name=env_name, **resolved_env)
        built = {name: cls(**sections[name]) for name, cls in _SECTIONS.items()}
        if built["attack"].init not in ("standard", "shifted3sigma"):
            raise ConfigError(f"attack.init must be standard or shifted3sigma, got {built['attack'].init!r}")
        AttackConfig(**{k: v for k, v in dataclasses.asdict(built["attack"]).items() if k not in ("init", "eval_episodes")})
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(env_name=env_name, env=resolved_env, **top, **built)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Fully materialized ``key = value`` text; parsing it returns an equal config."""
    lines = [f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}", f"env.name = {cfg.env_name}"]
    for name in _ENV_FIELDS:
        lines.append(f"env.{name} = {_format(cfg.env[name])}")
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read a config file, then apply ``key=value`` override strings."""
    text = Path(path).read_text(encoding="utf-8")
    if overrides:
        extra = []
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            extra.append(item)
        keys = {o.split("=", 1)[0].strip() for o in extra}
        kept = [ln for ln in text.splitlines() if ln.split("#", 1)[0].split("=", 1)[0].strip() not in keys]
        text = "\n".join(kept + [o.replace("=", " = ", 1) for o in extra])
    return parse_config(text, str(path))


def sha256_of(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).name.encode())
        h.update(b"\0")
        h.update(Path(p).read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def content_hash(config_text: str, input_files=()) -> str:
    """Hash of the resolved config plus the bytes of every input artifact."""
    h = hashlib.sha256(config_text.encode("utf-8"))
    if input_files:
        h.update(sha256_of(input_files).encode())
    return h.hexdigest()


def write_manifest(directory, cfg: ExperimentConfig, command, started, finished, artifacts: dict, inputs=()) -> Path:
    from . import __version__

    text = serialize_config(cfg)
    doc = {
        "command": command,
        "tool_version": __version__,
        "seed": cfg.seed,
        "started": started,
        "finished": finished,
        "config": text,
        "artifacts": artifacts,
        "inputs": sorted(str(p) for p in inputs),
        "input_hash": content_hash(text, inputs),
        # CSV bodies only: JSON reports carry wall-clock timings
        "artifact_hash": sha256_of([p for p in artifacts.values() if Path(p).suffix == ".csv"]),
    }
    path = Path(directory) / "manifest.json"
    Path(directory).mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def config_from_manifest(path) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text())
    return parse_config(doc["config"], f"{path}:config")
