"""Run configuration: YAML loading, defaults, and a reproducibility hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml

from .baselines import ResampleConfig
from .errors import ConfigError
from .gateway import ProviderConfig
from .model import ClassThresholds
from .selection import SelectionConfig


@dataclass(frozen=True)
class PathsConfig:
    speed: Path
    sensors: Path
    incidents: Path
    glossary: Path
    out: Path


@dataclass(frozen=True)
class BaselineConfig:
    enabled: bool = True
    knn_k: int = 5
    resample: ResampleConfig = field(default_factory=ResampleConfig)


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment run needs; credentials stay in the environment."""

    paths: PathsConfig
    split_fraction: float = 0.8
    horizons: Tuple[int, ...] = (15, 30)
    thresholds: ClassThresholds = field(default_factory=ClassThresholds)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    providers: Tuple[ProviderConfig, ...] = (ProviderConfig(provider_name="mock"),)
    extraction_mode: str = "rules"  # "rules" or the name of a configured provider
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    validation_per_class: int = 20
    runs: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.split_fraction < 1.0):
            raise ConfigError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if not self.horizons or any(h <= 0 or h % 5 != 0 for h in self.horizons):
            raise ConfigError(f"horizons must be positive multiples of 5, got {self.horizons}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.validation_per_class < 1:
            raise ConfigError("validation_per_class must be >= 1")
        names = [p.provider_name for p in self.providers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate provider names: {names}")
        if self.extraction_mode != "rules" and self.extraction_mode not in names:
            raise ConfigError(
                f"extraction_mode must be 'rules' or a configured provider name, "
                f"got {self.extraction_mode!r}"
            )

    def to_dict(self) -> dict:
        return {
            "paths": {
                "speed": str(self.paths.speed),
                "sensors": str(self.paths.sensors),
                "incidents": str(self.paths.incidents),
                "glossary": str(self.paths.glossary),
                "out": str(self.paths.out),
            },
            "split_fraction": self.split_fraction,
            "horizons": list(self.horizons),
            "thresholds": {
                "mild_max": self.thresholds.mild_max,
                "moderate_max": self.thresholds.moderate_max,
            },
            "selection": {
                "m": self.selection.m,
                "n_candidates": self.selection.n_candidates,
                "k_top": self.selection.k_top,
                "near_boundary_fraction": self.selection.near_boundary_fraction,
            },
            "providers": [
                {
                    "name": p.provider_name,
                    "kind": p.kind,
                    "model_id": p.model_id,
                    "endpoint": p.endpoint,
                    "temperature": p.temperature,
                    "max_output_tokens": p.max_output_tokens,
                    "request_timeout": p.request_timeout,
                    "max_retries": p.max_retries,
                    "max_in_flight": p.max_in_flight,
                    "requests_per_minute": p.requests_per_minute,
                }
                for p in self.providers
            ],
            "extraction_mode": self.extraction_mode,
            "baselines": {
                "enabled": self.baselines.enabled,
                "knn_k": self.baselines.knn_k,
                "resample": {
                    "undersample_ratio": self.baselines.resample.undersample_ratio,
                    "smote_neighbors": self.baselines.resample.smote_neighbors,
                    "target_per_class": self.baselines.resample.target_per_class,
                },
            },
            "validation_per_class": self.validation_per_class,
            "runs": self.runs,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _require(mapping: dict, key: str, context: str) -> object:
    if key not in mapping:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return mapping[key]


def run_config_from_dict(data: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Build a RunConfig from a parsed YAML/JSON mapping.

    Relative paths resolve against base_dir (normally the config file's
    directory).
    """
    base = Path(base_dir) if base_dir is not None else Path(".")

    def resolve(p: object) -> Path:
        path = Path(str(p))
        return path if path.is_absolute() else base / path

    paths_raw = _require(data, "paths", "config")
    paths = PathsConfig(
        speed=resolve(_require(paths_raw, "speed", "paths")),
        sensors=resolve(_require(paths_raw, "sensors", "paths")),
        incidents=resolve(_require(paths_raw, "incidents", "paths")),
        glossary=resolve(_require(paths_raw, "glossary", "paths")),
        out=resolve(_require(paths_raw, "out", "paths")),
    )
    thresholds_raw = data.get("thresholds", {})
    thresholds = ClassThresholds(
        mild_max=float(thresholds_raw.get("mild_max", 0.2)),
        moderate_max=float(thresholds_raw.get("moderate_max", 0.5)),
    )
    selection_raw = data.get("selection", {})
    selection = SelectionConfig(
        m=int(selection_raw.get("m", 12)),
        n_candidates=int(selection_raw.get("n_candidates", 30)),
        k_top=int(selection_raw.get("k_top", 2)),
        near_boundary_fraction=float(selection_raw.get("near_boundary_fraction", 0.5)),
        rng_seed=int(data.get("seed", 0)),
    )
    providers_raw = data.get("providers", [{"name": "mock", "kind": "mock"}])
    providers = tuple(
        ProviderConfig(
            provider_name=str(_require(p, "name", "provider")),
            kind=str(p.get("kind", "mock")),
            model_id=str(p.get("model_id", p.get("name", ""))),
            endpoint=str(p.get("endpoint", "")),
            temperature=float(p.get("temperature", 0.0)),
            max_output_tokens=int(p.get("max_output_tokens", 16)),
            request_timeout=float(p.get("request_timeout", 30.0)),
            max_retries=int(p.get("max_retries", 3)),
            max_in_flight=int(p.get("max_in_flight", 4)),
            requests_per_minute=(
                float(p["requests_per_minute"])
                if p.get("requests_per_minute") is not None
                else None
            ),
        )
        for p in providers_raw
    )
    baselines_raw = data.get("baselines", {})
    resample_raw = baselines_raw.get("resample", {})
    baselines = BaselineConfig(
        enabled=bool(baselines_raw.get("enabled", True)),
        knn_k=int(baselines_raw.get("knn_k", 5)),
        resample=ResampleConfig(
            undersample_ratio=(
                float(resample_raw["undersample_ratio"])
                if resample_raw.get("undersample_ratio") is not None
                else None
            ),
            smote_neighbors=int(resample_raw.get("smote_neighbors", 5)),
            target_per_class=resample_raw.get(
                "target_per_class", "match-majority-after-undersample"
            ),
            rng_seed=int(data.get("seed", 0)),
        ),
    )
    return RunConfig(
        paths=paths,
        split_fraction=float(data.get("split_fraction", 0.8)),
        horizons=tuple(int(h) for h in data.get("horizons", (15, 30))),
        thresholds=thresholds,
        selection=selection,
        providers=providers,
        extraction_mode=str(data.get("extraction_mode", "rules")),
        baselines=baselines,
        validation_per_class=int(data.get("validation_per_class", 20)),
        runs=int(data.get("runs", 3)),
        seed=int(data.get("seed", 0)),
    )


def load_run_config(path: Path, seed_override: Optional[int] = None,
                    out_override: Optional[Path] = None) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    if seed_override is not None:
        data["seed"] = seed_override
    if out_override is not None:
        data.setdefault("paths", {})["out"] = str(out_override)
    return run_config_from_dict(data, base_dir=path.parent)
