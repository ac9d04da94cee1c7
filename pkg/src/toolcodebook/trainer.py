"""Three-stage training with per-stage trainable masks, plus checkpoints.

stage 1  projector only, plain LM loss
stage 2  codebook + query encoder, prompt-conditioned LM loss + VQ terms
stage 3  projector + codebook + query encoder + decoder, same loss as stage 2
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .codebook import ToolCodebook
from .model import CODEBOOK, DECODER, PARAM_GROUPS, PROJECTOR, QUERY_ENCODER, ModelState, instance_loss
from .numerics import AdamW, LrSchedule, Param, TrainingDivergedError, cosine_decay_lr

log = logging.getLogger(__name__)

STAGE_MASKS = {
    1: frozenset({PROJECTOR}),
    2: frozenset({CODEBOOK, QUERY_ENCODER}),
    3: frozenset({PROJECTOR, CODEBOOK, QUERY_ENCODER, DECODER}),
}
# plain fine-tuning used by the codebook-free baselines: stage 3 minus the inert codebook path
BASELINE_MASK = frozenset({PROJECTOR, DECODER})
ALL_GROUPS = (PROJECTOR, QUERY_ENCODER, DECODER, CODEBOOK)


@dataclass(frozen=True)
class StageConfig:
    stage: int
    lr: float
    batch_size: int
    epochs: int = 1
    lam1: float = 1.0
    lam2: float = 0.25
    warmup_steps: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3 (got {self.stage})")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.lr < 0:
            raise ValueError(f"bad stage config {self}")


FULL_STAGES = (
    StageConfig(1, 1e-4, 256),
    StageConfig(2, 1e-4, 128),
    StageConfig(3, 1e-5, 128),
)
# CPU-scale schedule: batch ratio kept at 2 : 1 : 1; stage 3 does not take the
# tenfold lr cut because the small decoder learns nothing within budget at 1e-3
DESK_STAGES = (
    StageConfig(1, 1e-2, 32),
    StageConfig(2, 1e-2, 16),
    StageConfig(3, 1e-2, 16),
)


def trainable_mask(stage: int) -> frozenset[str]:
    return STAGE_MASKS[stage]


def model_params(state: ModelState, codebook: ToolCodebook | None) -> dict[str, dict[str, Param]]:
    groups = {g: {n: state.params[n] for n in names} for g, names in PARAM_GROUPS.items()}
    if codebook is not None:
        groups[CODEBOOK] = {"prompts": codebook.prompts}
    return groups


def apply_mask(state: ModelState, codebook: ToolCodebook | None, trainable) -> None:
    for g, params in model_params(state, codebook).items():
        for p in params.values():
            p.trainable = g in trainable


def group_checksum(state: ModelState, codebook: ToolCodebook | None, group: str) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model_params(state, codebook)[group].items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def checksums(state, codebook) -> dict[str, str]:
    return {g: group_checksum(state, codebook, g) for g in model_params(state, codebook)}


def batch_schedule(n: int, batch_size: int, total_steps: int, seed) -> list[np.ndarray]:
    """Epoch-wise shuffled batches, cycling through fresh permutations as needed."""
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    while len(out) < total_steps:
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            out.append(perm[s : s + batch_size])
            if len(out) == total_steps:
                break
    return out


def steps_for(n: int, cfg: StageConfig, steps_per_1k: int | None = None) -> int:
    if steps_per_1k is not None:
        return max(1, math.ceil(steps_per_1k * n / 1000))
    return cfg.epochs * math.ceil(n / cfg.batch_size)


@dataclass
class StageRun:
    stage: int
    total_steps: int
    log: list[dict] = field(default_factory=list)
    step: int = 0


def run_stage(
    cfg: StageConfig,
    state: ModelState,
    codebook: ToolCodebook | None,
    data,
    *,
    K: int = 0,
    seed=0,
    total_steps: int | None = None,
    straight_through: bool = True,
    mask=None,
    optimizer: AdamW = AdamW(),
    start_step: int = 0,
    stop_step: int | None = None,
    tag: str = "",
) -> StageRun:
    """Train one stage on ``data`` (list of Instance).

    Stage 1 always runs unconditioned (K = 0). ``mask`` overrides the stage's
    trainable groups (used by the codebook-free baselines). ``start_step`` /
    ``stop_step`` let a run be interrupted and resumed with an identical log.
    """
    if not data:
        raise ValueError("run_stage needs data")
    if cfg.stage == 1:
        K = 0
    trainable = trainable_mask(cfg.stage) if mask is None else frozenset(mask)
    apply_mask(state, codebook, trainable)
    total = total_steps or steps_for(len(data), cfg)
    schedule = LrSchedule(cfg.lr, total, cfg.warmup_steps)
    batches = batch_schedule(len(data), cfg.batch_size, total, seed)
    params = [p for g in model_params(state, codebook).values() for p in g.values()]
    run = StageRun(cfg.stage, total, step=start_step)
    end = total if stop_step is None else min(stop_step, total)

    for step in range(start_step, end):
        for p in params:
            p.zero_grad()
        idx = batches[step]
        scale = 1.0 / len(idx)
        sums = {"total": 0.0, "lm": 0.0, "quant": 0.0, "commit": 0.0}
        for i in idx:
            out = instance_loss(
                state, codebook, data[i], K=K, lam1=cfg.lam1, lam2=cfg.lam2,
                straight_through=straight_through, scale=scale,
            )
            sums["total"] += out.total * scale
            sums["lm"] += out.lm * scale
            sums["quant"] += out.quant * scale
            sums["commit"] += out.commit * scale
        if not math.isfinite(sums["total"]):
            raise TrainingDivergedError("non-finite loss", step=step)
        lr = cosine_decay_lr(schedule, step)
        for p in params:
            if p.trainable:
                try:
                    optimizer.step(p, lr)
                except TrainingDivergedError as e:
                    raise TrainingDivergedError(str(e), step=step) from None
        run.log.append({"step": step, "stage": cfg.stage, "tag": tag, "lr": lr, **sums})
        run.step = step + 1
    return run


# ---- checkpoints ------------------------------------------------------------

MAGIC = b"TCBCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    state: ModelState
    codebook: ToolCodebook | None
    config: dict
    meta: dict = field(default_factory=dict)


def _sections(state, codebook):
    out = {}
    for name, p in state.params.items():
        out[name] = p
    if codebook is not None:
        out["codebook.prompts"] = codebook.prompts
    return out


def save_checkpoint(path, state: ModelState, codebook: ToolCodebook | None, config: dict, meta: dict | None = None) -> None:
    payload = bytearray()
    sections = []
    for name, p in sorted(_sections(state, codebook).items()):
        for part, arr in (("value", p.value), ("m", p.m), ("v", p.v)):
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            sections.append({"name": f"{name}/{part}", "shape": list(arr.shape), "offset": len(payload), "nbytes": len(data)})
            payload += data
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(config),
        "config": config,
        "dims": {"V": state.V, "C": state.C, "D": state.D, "H": state.H, "policy": state.policy},
        "adam_steps": {n: p.steps for n, p in sorted(_sections(state, codebook).items())},
        "trainable": {n: p.trainable for n, p in sorted(_sections(state, codebook).items())},
        "meta": meta or {},
        "sections": sections,
    }
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    header["checksum"] = hashlib.sha256(body + bytes(payload)).hexdigest()
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", len(blob)) + blob + bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint or truncated header")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + hlen:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen])
    except ValueError:
        raise IntegrityError(f"{path}: corrupt header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    payload = raw[start + hlen :]
    checksum = header.pop("checksum", None)
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    if checksum != hashlib.sha256(body + payload).hexdigest():
        raise IntegrityError(f"{path}: checksum mismatch (truncated or corrupted)")

    arrays = {}
    for s in header["sections"]:
        buf = payload[s["offset"] : s["offset"] + s["nbytes"]]
        arrays[s["name"]] = np.frombuffer(buf, dtype="<f8").reshape(s["shape"]).astype(np.float64)
    names = sorted({n.rsplit("/", 1)[0] for n in arrays})
    params = {}
    for n in names:
        p = Param(arrays[f"{n}/value"], trainable=header["trainable"][n])
        p.m, p.v = arrays[f"{n}/m"], arrays[f"{n}/v"]
        p.steps = header["adam_steps"][n]
        params[n] = p
    dims = header["dims"]
    prompts = params.pop("codebook.prompts", None)
    state = ModelState(params, V=dims["V"], C=dims["C"], D=dims["D"], H=dims["H"], policy=dims["policy"])
    codebook = ToolCodebook(prompts) if prompts is not None else None
    return Checkpoint(state, codebook, header["config"], header["meta"])


def stage_configs(preset: str = "desk", **overrides) -> tuple[StageConfig, ...]:
    base = {"paper": FULL_STAGES, "desk": DESK_STAGES}[preset]
    return tuple(replace(c, **overrides) for c in base)


def stage_to_dict(cfg: StageConfig) -> dict:
    return asdict(cfg)
