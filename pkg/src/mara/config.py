"""Engine configuration, stored as YAML.

Example::

    providers:
      embed: {kind: mock, dim: 64, seed: 0}
      generate: {kind: heuristic}
      judge: {kind: exact}
    fusion:
      preset: infovqa          # any explicit key below overrides the preset
      ablation: full
    sec: {window_size: 3, stride: 3, max_memory_entries: 5, enable_feedback: false}
    decomposition: {coarse: 2x2, fine: 2x2}
    paths: {index: build/index.bin, corpus: build/corpus, templates: null}

Unknown keys are rejected with their dotted path.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from mara.corpus import DecompositionConfig
from mara.errors import InvalidConfig, MaraError
from mara.qre import ABLATIONS, PRESETS, FusionConfig
from mara.sec import SecConfig


class ConfigError(InvalidConfig):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


_PROVIDER_KEYS = {
    "mock": {"kind", "dim", "seed"},
    "heuristic": {"kind"},
    "scripted": {"kind", "script"},
    "exact": {"kind"},
    "llm": {"kind", "generator"},
    "http": {"kind", "endpoint", "model", "api_key_env", "timeout", "max_inflight", "retries", "backoff", "dim"},
}
_PROVIDER_ROLES = {
    "embed": ("mock", "http"),
    "generate": ("heuristic", "scripted", "http"),
    "judge": ("exact", "llm"),
}
_DEFAULT_PROVIDERS = {"embed": {"kind": "mock", "dim": 64, "seed": 0},
                      "generate": {"kind": "heuristic"},
                      "judge": {"kind": "exact"}}
_FUSION_KEYS = {"preset", "g_c", "g_f", "inv_tau_c", "inv_tau_f", "tau_c", "tau_f", "ablation", "gate_weights"}
_SEC_KEYS = {"window_size", "stride", "max_memory_entries", "enable_feedback", "strict_parse", "max_tokens",
             "temperature"}
_PATH_KEYS = {"index", "corpus", "templates"}


@dataclass
class EngineConfig:
    providers: dict = field(default_factory=lambda: json.loads(json.dumps(_DEFAULT_PROVIDERS)))
    fusion: FusionConfig = field(default_factory=FusionConfig)
    sec: SecConfig = field(default_factory=SecConfig)
    decomposition: DecompositionConfig = field(default_factory=DecompositionConfig)
    paths: dict = field(default_factory=dict)
    gate_weights: str | None = None

    def to_dict(self) -> dict:
        fusion = {"g_c": self.fusion.g_c, "g_f": self.fusion.g_f, "tau_c": self.fusion.tau_c,
                  "tau_f": self.fusion.tau_f, "ablation": self.fusion.ablation}
        if self.gate_weights:
            fusion["gate_weights"] = self.gate_weights
        c, f = self.decomposition.coarse_grid, self.decomposition.fine_grid
        return {
            "providers": json.loads(json.dumps(self.providers)),
            "fusion": fusion,
            "sec": self.sec.to_dict(),
            "decomposition": {"coarse": f"{c[0]}x{c[1]}", "fine": f"{f[0]}x{f[1]}"},
            "paths": dict(self.paths),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def snapshot_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _require_mapping(value, path) -> Mapping:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(section: Mapping, allowed, path):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")


def _number(section, key, path, kind=float):
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    if kind is int and int(v) != v:
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {v!r}")
    return kind(v)


def _parse_providers(raw) -> dict:
    raw = _require_mapping(raw, "providers")
    _reject_unknown(raw, _PROVIDER_ROLES, "providers")
    out = json.loads(json.dumps(_DEFAULT_PROVIDERS))
    for role, profile in raw.items():
        path = f"providers.{role}"
        profile = dict(_require_mapping(profile, path))
        kind = profile.get("kind")
        if kind not in _PROVIDER_ROLES[role]:
            raise ConfigError(f"{path}.kind", f"must be one of {_PROVIDER_ROLES[role]}, got {kind!r}")
        _reject_unknown(profile, _PROVIDER_KEYS[kind], path)
        if kind == "llm":
            gen = dict(_require_mapping(profile.get("generator"), f"{path}.generator"))
            gkind = gen.get("kind")
            if gkind not in _PROVIDER_ROLES["generate"]:
                raise ConfigError(f"{path}.generator.kind", f"unknown generator kind {gkind!r}")
            _reject_unknown(gen, _PROVIDER_KEYS[gkind], f"{path}.generator")
            profile["generator"] = gen
        if kind == "scripted" and not isinstance(profile.get("script", []), list):
            raise ConfigError(f"{path}.script", "expected a list of strings")
        if kind == "mock":
            for key in ("dim", "seed"):
                if key in profile:
                    profile[key] = _number(profile, key, path, int)
        out[role] = profile
    return out


def _parse_fusion(raw) -> tuple[FusionConfig, str | None]:
    raw = _require_mapping(raw, "fusion")
    _reject_unknown(raw, _FUSION_KEYS, "fusion")
    base = FusionConfig()
    if "preset" in raw:
        name = str(raw["preset"]).lower()
        if name not in PRESETS:
            raise ConfigError("fusion.preset", f"unknown preset {raw['preset']!r}; choose from {sorted(PRESETS)}")
        base = FusionConfig.preset(name)
    vals = {"g_c": base.g_c, "g_f": base.g_f, "tau_c": base.tau_c, "tau_f": base.tau_f,
            "ablation": raw.get("ablation", base.ablation)}
    for key in ("g_c", "g_f", "tau_c", "tau_f"):
        if key in raw:
            vals[key] = _number(raw, key, "fusion")
    for level in ("c", "f"):
        key = f"inv_tau_{level}"
        if key in raw:
            if f"tau_{level}" in raw:
                raise ConfigError(f"fusion.{key}", f"give either {key} or tau_{level}, not both")
            inv = _number(raw, key, "fusion")
            if inv <= 0:
                raise ConfigError(f"fusion.{key}", "must be > 0")
            vals[f"tau_{level}"] = 1.0 / inv
    if vals["ablation"] not in ABLATIONS:
        raise ConfigError("fusion.ablation", f"must be one of {ABLATIONS}")
    for key in ("g_c", "g_f"):
        if not 0.0 <= vals[key] <= 1.0:
            raise ConfigError(f"fusion.{key}", f"must lie in [0, 1], got {vals[key]}")
    if vals["g_c"] + vals["g_f"] > 1.0 + 1e-12:
        raise ConfigError("fusion", f"gate-sum violation: g_c + g_f = {vals['g_c'] + vals['g_f']:g} > 1")
    try:
        return FusionConfig(**vals), raw.get("gate_weights")
    except MaraError as exc:
        raise ConfigError("fusion", str(exc)) from exc


def _parse_sec(raw) -> SecConfig:
    raw = _require_mapping(raw, "sec")
    _reject_unknown(raw, _SEC_KEYS, "sec")
    vals: dict[str, Any] = {}
    for key in ("window_size", "stride", "max_memory_entries", "max_tokens"):
        if raw.get(key) is not None:
            vals[key] = _number(raw, key, "sec", int)
    if "temperature" in raw:
        vals["temperature"] = _number(raw, "temperature", "sec")
    for key in ("enable_feedback", "strict_parse"):
        if key in raw:
            if not isinstance(raw[key], bool):
                raise ConfigError(f"sec.{key}", "expected true or false")
            vals[key] = raw[key]
    try:
        return SecConfig(**vals)
    except MaraError as exc:
        raise ConfigError("sec", str(exc)) from exc


def _parse_decomposition(raw) -> DecompositionConfig:
    raw = _require_mapping(raw, "decomposition")
    _reject_unknown(raw, {"coarse", "fine"}, "decomposition")
    try:
        return DecompositionConfig.parse(str(raw.get("coarse", "2x2")), str(raw.get("fine", "2x2")))
    except MaraError as exc:
        raise ConfigError("decomposition", str(exc)) from exc


def config_from_dict(data: Mapping | None) -> EngineConfig:
    data = _require_mapping(data, "")
    _reject_unknown(data, {"providers", "fusion", "sec", "decomposition", "paths"}, "")
    fusion, gate_weights = _parse_fusion(data.get("fusion"))
    paths = dict(_require_mapping(data.get("paths"), "paths"))
    _reject_unknown(paths, _PATH_KEYS, "paths")
    return EngineConfig(
        providers=_parse_providers(data.get("providers")),
        fusion=fusion,
        sec=_parse_sec(data.get("sec")),
        decomposition=_parse_decomposition(data.get("decomposition")),
        paths={k: v for k, v in paths.items() if v is not None},
        gate_weights=gate_weights,
    )


def load_config(path) -> EngineConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from exc
    return config_from_dict(data)


def preset_config(name: str) -> EngineConfig:
    return config_from_dict({"fusion": {"preset": name}})
