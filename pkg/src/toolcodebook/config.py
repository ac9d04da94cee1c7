"""Run configuration: one structured-text file (YAML or JSON), unknown keys rejected."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .trainer import StageConfig, stage_configs


class ConfigKeyError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 1
    registry: str | None = None
    tools: list[str] | None = None
    per_tool: int = 200
    plain_samples: int = 400
    echo_samples: int = 400
    corpus_dir: str | None = None
    output_dir: str = "runs/default"

    C: int = 16
    D: int = 32
    H: int = 48
    P_patch: int = 4
    N: int = 50
    K: int = 3
    policy: str = "vision-text-tool"
    visual_noise: float = 0.5

    stages: list[dict] | None = None
    steps_per_1k: dict[str, int] = field(default_factory=lambda: {"prior": 400, "1": 100, "2": 400, "3": 400})
    groups: str | list[list[str]] = "5x2"
    strategy: str = "colt"
    rounds: int = 2
    plain_mix: float = 0.25
    straight_through_stage2: bool = True
    scoring: str = "name_only"
    eval_max_len: int = 8
    weight_decay: float = 0.0

    def stage_list(self) -> tuple[StageConfig, ...]:
        if self.stages is None:
            return stage_configs(self.preset)
        base = {c.stage: c for c in stage_configs(self.preset)}
        for d in self.stages:
            d = dict(d)
            s = int(d.pop("stage"))
            base[s] = replace(base[s], **d)
        return tuple(base[s] for s in sorted(base))

    def stage(self, n: int) -> StageConfig:
        return {c.stage: c for c in self.stage_list()}[n]

    def resolved(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(c) for c in self.stage_list()]
        return d


PRESETS = {
    "desk": {},
    "paper": {"preset": "paper", "N": 50, "K": 3, "per_tool": 5000},
}


def from_dict(d: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigKeyError(f"unknown config keys: {unknown}")
    base = dict(PRESETS.get(d.get("preset", "desk"), {}))
    base.update(d)
    cfg = RunConfig(**base)
    if cfg.preset not in PRESETS:
        raise ConfigKeyError(f"unknown preset {cfg.preset!r}")
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return apply_env(from_dict(d or {}))


def apply_env(cfg: RunConfig) -> RunConfig:
    """Only the output dir and seed may come from the environment."""
    if os.environ.get("TOOLCB_OUTPUT_DIR"):
        cfg = replace(cfg, output_dir=os.environ["TOOLCB_OUTPUT_DIR"])
    if os.environ.get("TOOLCB_SEED"):
        cfg = replace(cfg, seed=int(os.environ["TOOLCB_SEED"]))
    return cfg


def write_resolved(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.resolved(), sort_keys=True), encoding="utf-8")
