"""Run configuration files: loading, overrides, validation and wiring."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .errors import ConfigError, IcdAgentsError
from .gateway import (
    CachingProvider,
    Gateway,
    RemoteProvider,
    ReplayProvider,
    ScriptProvider,
    TranscriptLog,
)
from .icd import build_candidate_set, load_dictionary, read_code_list
from .workflow import Mode, WorkflowConfig

PATH_KEYS = ("corpus", "dictionary", "candidates", "cache", "output_dir", "soap", "evidence", "labels")
INPUT_PATHS = ("corpus", "dictionary", "candidates", "evidence", "labels")
SECRET_KEYS = ("api_key", "key", "token", "secret", "password")

DEFAULTS: dict[str, Any] = {
    "paths": {},
    "workflow": {
        "mode": "MAC1",
        "agent_set": None,
        "confrontation": True,
        "external_knowledge": True,
        "n_candidates": 50,
        "parallelism": 1,
        "retry_budget": 2,
        "split": None,
    },
    "gateway": {
        "model_id": "gpt-4",
        "temperature": 0.1,
        "token_budget": 8000,
        "max_response_tokens": 1024,
    },
    "provider": {
        "kind": "replay",
        "endpoint_env": "ICDAGENTS_ENDPOINT",
        "api_key_env": "ICDAGENTS_API_KEY",
        "requests_per_minute": 60,
        "max_attempts": 5,
        "timeout": 120,
    },
    "evaluation": {"evidence_threshold": 0.6},
}


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``section.key=value``; the value is read as YAML."""
    dotted, sep, raw = assignment.partition("=")
    if not sep or not dotted.strip():
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    keys = dotted.strip().split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-mapping {dotted!r}")
    node[keys[-1]] = yaml.safe_load(raw) if raw.strip() else None


@dataclass
class RunConfig:
    data: dict
    base_dir: Path
    source: Path | None = None
    _workflow: WorkflowConfig | None = field(default=None, repr=False)

    def section(self, name: str) -> dict:
        return self.data.get(name) or {}

    def path(self, key: str) -> Path | None:
        value = self.section("paths").get(key)
        if value in (None, ""):
            return None
        p = Path(value).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.path("output_dir") or self.base_dir / "out"

    @property
    def mode(self) -> Mode:
        return Mode(self.section("workflow").get("mode", "MAC1"))

    def workflow_config(self) -> WorkflowConfig:
        if self._workflow is None:
            self._workflow = build_workflow_config(self)
        return self._workflow

    def snapshot(self) -> dict:
        return json.loads(json.dumps(self.data, default=str))


def load_config(source: str | Path | Mapping, overrides: Sequence[str] = ()) -> RunConfig:
    if isinstance(source, Mapping):
        raw, base, path = dict(source), Path.cwd(), None
    else:
        path = Path(source)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.resolve().parent
    if not isinstance(raw, Mapping):
        raise ConfigError("config file must hold a mapping")
    data = _merge(DEFAULTS, raw)
    for item in overrides:
        apply_override(data, item)
    cfg = RunConfig(data, base, path)
    validate(cfg)
    return cfg


def _find_secrets(node: Any, trail: str = "") -> list[str]:
    found = []
    if isinstance(node, Mapping):
        for k, v in node.items():
            here = f"{trail}.{k}" if trail else str(k)
            if str(k).lower() in SECRET_KEYS and v:
                found.append(here)
            found += _find_secrets(v, here)
    return found


def validate(cfg: RunConfig) -> None:
    """Reject a bad configuration before any completion is requested."""
    unknown = set(cfg.data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    secrets = _find_secrets(cfg.data)
    if secrets:
        raise ConfigError(
            f"secrets must come from environment variables, not the config file: {secrets}"
        )
    stray = set(cfg.section("paths")) - set(PATH_KEYS)
    if stray:
        raise ConfigError(f"unknown path key(s): {sorted(stray)}")
    for key in INPUT_PATHS:
        p = cfg.path(key)
        if p is not None and not p.exists():
            raise ConfigError(f"paths.{key} does not exist: {p}")
    kind = cfg.section("provider").get("kind")
    if kind not in ("remote", "replay", "script"):
        raise ConfigError(f"provider.kind must be remote, replay or script, got {kind!r}")
    if kind == "script":
        script = cfg.section("provider").get("script")
        if not script or not _resolve(cfg, script).exists():
            raise ConfigError("provider.kind=script needs an existing provider.script file")
    for f in cfg.section("provider").get("replay_files") or ():
        if not _resolve(cfg, f).exists():
            raise ConfigError(f"replay file does not exist: {f}")
    try:
        cfg.workflow_config()
    except ConfigError:
        raise
    except IcdAgentsError as exc:
        raise ConfigError(str(exc)) from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid workflow settings: {exc}") from exc


def _resolve(cfg: RunConfig, value: str | Path) -> Path:
    p = Path(value).expanduser()
    return p if p.is_absolute() else cfg.base_dir / p


def build_workflow_config(cfg: RunConfig) -> WorkflowConfig:
    wf = cfg.section("workflow")
    gw = cfg.section("gateway")
    candidates = None
    if wf.get("external_knowledge", True):
        dictionary, codes = cfg.path("dictionary"), cfg.path("candidates")
        if dictionary is None or codes is None:
            raise ConfigError("external_knowledge needs paths.dictionary and paths.candidates")
        n_c = wf.get("n_candidates", 50)
        code_list = read_code_list(codes)
        if n_c in ("all", None):
            n_c = len(code_list)
        candidates = build_candidate_set(load_dictionary(dictionary), code_list, int(n_c))
    extra = {}
    if wf.get("dispute_patterns"):
        extra["dispute_patterns"] = tuple(wf["dispute_patterns"])
    return WorkflowConfig(
        mode=wf.get("mode", "MAC1"),
        agent_set=wf.get("agent_set"),
        confrontation=bool(wf.get("confrontation", True)),
        external_knowledge=bool(wf.get("external_knowledge", True)),
        candidate_set=candidates,
        model_id=str(gw.get("model_id", "gpt-4")),
        temperature=float(gw.get("temperature", 0.1)),
        token_budget=int(gw.get("token_budget", 8000)),
        max_response_tokens=int(gw.get("max_response_tokens", 1024)),
        parallelism=int(wf.get("parallelism", 1)),
        retry_budget=int(wf.get("retry_budget", 2)),
        **extra,
    )


def build_provider(cfg: RunConfig):
    prov = cfg.section("provider")
    kind = prov["kind"]
    if kind == "remote":
        return RemoteProvider.from_env(
            endpoint_env=prov.get("endpoint_env", "ICDAGENTS_ENDPOINT"),
            key_env=prov.get("api_key_env", "ICDAGENTS_API_KEY"),
            endpoint=prov.get("endpoint"),
            max_attempts=int(prov.get("max_attempts", 5)),
            requests_per_minute=prov.get("requests_per_minute"),
            timeout=float(prov.get("timeout", 120)),
        )
    if kind == "script":
        rules = yaml.safe_load(_resolve(cfg, prov["script"]).read_text(encoding="utf-8"))
        if isinstance(rules, Mapping):
            rules = rules.get("rules", [])
        return ScriptProvider.from_rules(rules or [])
    return ReplayProvider.from_files(_resolve(cfg, f) for f in prov.get("replay_files") or ())


def build_gateway(cfg: RunConfig, transcript: Path | None = None) -> tuple[Gateway, CachingProvider | None]:
    """Provider behind the on-disk cache (when configured), wrapped in a Gateway."""
    provider = build_provider(cfg)
    cache = None
    cache_path = cfg.path("cache")
    if cache_path is not None:
        cache = CachingProvider(provider, cache_path)
        provider = cache
    log = TranscriptLog(transcript) if transcript else None
    return Gateway(provider, transcript=log), cache
