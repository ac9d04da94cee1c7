"""Tool-stream driver: joint / sequential / rehearsal / codebook strategies."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .codebook import init_codebook
from .config import RunConfig
from .dataset import DEFAULT_REGISTRY, ConfigError, load_registry, read_jsonl, split_train_test, synthesize_corpus, synthesize_plain
from .dataset.registry import api_names
from .metrics import AccuracyMatrix, call_correct
from .model import SyntheticVisualSource, echo_instances, Vocab, build_instance, conditioning_for, generate, init_model, parse_predicted_calls
from .numerics import AdamW
from .trainer import BASELINE_MASK, StageConfig, run_stage, steps_for

log = logging.getLogger(__name__)

JOINT, SEQUENTIAL, REHEARSAL, COLT = "joint", "sequential", "rehearsal", "colt"
DEFAULT_BUFFERS = (10, 30, 50)


@dataclass(frozen=True)
class StreamPlan:
    groups: tuple[tuple[str, ...], ...]
    strategy: str
    buffer_per_tool: int = 0

    def __post_init__(self):
        if not self.groups or any(not g for g in self.groups):
            raise ConfigError("stream plan needs non-empty groups")
        if self.strategy not in (JOINT, SEQUENTIAL, REHEARSAL, COLT):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.strategy == REHEARSAL and self.buffer_per_tool < 1:
            raise ConfigError("rehearsal needs buffer_per_tool >= 1")
        flat = [t for g in self.groups for t in g]
        if len(set(flat)) != len(flat):
            raise ConfigError("a tool appears in more than one group")

    @property
    def tools(self) -> list[str]:
        return [t for g in self.groups for t in g]

    @property
    def label(self) -> str:
        return f"{REHEARSAL}:{self.buffer_per_tool}" if self.strategy == REHEARSAL else self.strategy


def parse_strategy(text: str) -> tuple[str, int]:
    m = re.fullmatch(r"(joint|sequential|colt)|rehearsal:(\d+)", text.strip())
    if not m:
        raise ConfigError(f"bad strategy {text!r}; expected joint, sequential, colt or rehearsal:<n>")
    return (m.group(1), 0) if m.group(1) else (REHEARSAL, int(m.group(2)))


def make_groups(spec, tools) -> tuple[tuple[str, ...], ...]:
    """'5x2' -> five groups of two tools (in order); a list of lists is taken as-is."""
    tools = list(tools)
    if isinstance(spec, (list, tuple)):
        groups = tuple(tuple(g) for g in spec)
    else:
        m = re.fullmatch(r"(\d+)x(\d+)", str(spec).strip())
        if not m:
            raise ConfigError(f"bad group spec {spec!r}")
        n, size = int(m.group(1)), int(m.group(2))
        if n * size != len(tools):
            raise ConfigError(f"group spec {spec} needs {n * size} tools, registry has {len(tools)}")
        groups = tuple(tuple(tools[i * size : (i + 1) * size]) for i in range(n))
    flat = [t for g in groups for t in g]
    if sorted(flat) != sorted(tools):
        raise ConfigError("groups do not cover exactly the tools in scope")
    return groups


def make_plan(cfg: RunConfig, tools) -> StreamPlan:
    strategy, buf = parse_strategy(cfg.strategy)
    return StreamPlan(make_groups(cfg.groups, tools), strategy, buf)


class ReservoirBuffer:
    """Uniform reservoir per tool, capped at ``capacity`` items each."""

    def __init__(self, capacity: int, seed):
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.store: dict[str, list] = {}
        self.seen: dict[str, int] = {}

    def add(self, tool: str, item) -> None:
        slot = self.store.setdefault(tool, [])
        n = self.seen.get(tool, 0)
        if len(slot) < self.capacity:
            slot.append(item)
        else:
            j = int(self.rng.integers(n + 1))
            if j < self.capacity:
                slot[j] = item
        self.seen[tool] = n + 1

    def samples(self) -> list:
        return [x for tool in sorted(self.store) for x in self.store[tool]]

    def audit(self) -> dict[str, int]:
        return {t: len(v) for t, v in sorted(self.store.items())}


@dataclass
class DataBundle:
    registry: tuple
    tools: list[str]
    vocab: Vocab
    train: dict[str, list]
    test: dict[str, list]
    plain: list
    tool_names: set[str]


def load_bundle(cfg: RunConfig) -> DataBundle:
    registry = load_registry(cfg.registry) if cfg.registry else DEFAULT_REGISTRY
    by_name = {t.name: t for t in registry}
    tools = list(cfg.tools) if cfg.tools else [t.name for t in registry]
    missing = [t for t in tools if t not in by_name]
    if missing:
        raise ConfigError(f"tools not in registry: {missing}")
    scope = tuple(by_name[t] for t in tools)
    if cfg.corpus_dir:
        from pathlib import Path

        d = Path(cfg.corpus_dir)
        train_c, test_c = [], []
        for t in tools:
            train_c += read_jsonl(d / f"{t}_instruction_train.jsonl")
            test_c += read_jsonl(d / f"{t}_instruction_test.jsonl")
    else:
        train_c, test_c = split_train_test(synthesize_corpus(scope, cfg.per_tool, cfg.seed), cfg.seed)
    plain_c = synthesize_plain(cfg.plain_samples, cfg.seed)
    vocab = Vocab.build(train_c + test_c + plain_c, registry)
    visual = SyntheticVisualSource(cfg.D, cfg.P_patch, seed=cfg.seed, noise=cfg.visual_noise)

    key_to_tool = {by_name[t].name: t for t in tools}
    train: dict[str, list] = {t: [] for t in tools}
    test: dict[str, list] = {t: [] for t in tools}
    for bucket, convs in ((train, train_c), (test, test_c)):
        for c in convs:
            t = key_to_tool.get(c.tool_key)
            if t is None:
                raise ConfigError(f"record {c.id} calls {c.tool_key!r}, which is not a tool in scope")
            bucket[t].append(build_instance(c, vocab, visual, cfg.rounds))
    plain = [build_instance(c, vocab, visual, cfg.rounds) for c in plain_c]
    return DataBundle(registry, tools, vocab, train, test, plain, api_names(registry))


@dataclass
class ContinualResult:
    plan: StreamPlan
    matrix: AccuracyMatrix
    logs: list[dict] = field(default_factory=list)
    tool_accuracy: list[dict[str, float]] = field(default_factory=list)
    buffer_audit: list[dict[str, int]] = field(default_factory=list)
    training_sets: list[list[str]] = field(default_factory=list)
    state: object = None
    codebook: object = None


def tool_hits(state, codebook, instances, K, bundle: DataBundle, cfg: RunConfig) -> list[int]:
    hits = []
    for inst in instances:
        cond, _ = conditioning_for(state, codebook, inst, K)
        toks = generate(state, cond, cfg.eval_max_len, eos=bundle.vocab.eos)
        pred = parse_predicted_calls(toks, bundle.vocab, bundle.tool_names)
        hits.append(call_correct(pred, inst.reference_calls, cfg.scoring))
    return hits


def evaluate(state, codebook, instances, K, bundle: DataBundle, cfg: RunConfig) -> float:
    hits = tool_hits(state, codebook, instances, K, bundle, cfg)
    return sum(hits) / len(hits) if hits else float("nan")


def mix_plain(data, bundle: DataBundle, cfg: RunConfig, rng) -> list:
    n = int(round(cfg.plain_mix * len(data)))
    if n == 0 or not bundle.plain:
        return list(data)
    pick = rng.choice(len(bundle.plain), size=n, replace=n > len(bundle.plain))
    return list(data) + [bundle.plain[i] for i in pick]


def new_model(bundle: DataBundle, cfg: RunConfig):
    state = init_model(len(bundle.vocab), cfg.C, cfg.D, cfg.H, seed=[cfg.seed, 1], policy=cfg.policy)
    codebook = init_codebook(cfg.N, cfg.C, seed=[cfg.seed, 2])
    return state, codebook


def _spk(cfg: RunConfig) -> dict[str, int]:
    return {str(k): v for k, v in cfg.steps_per_1k.items()}


def pretrain(state, codebook, bundle: DataBundle, cfg: RunConfig, opt: AdamW) -> list:
    """Language prior (stand-in for a pretrained LLM) followed by stage 1 on tool-free data."""
    seed, spk, s1 = cfg.seed, _spk(cfg), cfg.stage(1)
    runs = []
    if spk.get("prior", 0) and bundle.plain:
        prior = StageConfig(3, s1.lr, s1.batch_size, lam1=0.0, lam2=0.0)
        visual = SyntheticVisualSource(cfg.D, cfg.P_patch, seed=seed, noise=cfg.visual_noise)
        data = bundle.plain + echo_instances(bundle.vocab, cfg.echo_samples, visual, seed=[seed, 5])
        runs.append(run_stage(prior, state, codebook, data, K=0, seed=[seed, 10], mask={"projector", "decoder"},
                              total_steps=steps_for(len(data), prior, spk["prior"]), optimizer=opt, tag="prior"))
    if spk.get("1", 0) and bundle.plain:
        runs.append(run_stage(s1, state, codebook, bundle.plain, seed=[seed, 11],
                              total_steps=steps_for(len(bundle.plain), s1, spk["1"]), optimizer=opt, tag="align"))
    return runs


def train_stage(stage: int, state, codebook, data, cfg: RunConfig, opt: AdamW, k: int = 0):
    """Stage 2 or 3 on ``data`` with the codebook active."""
    sc = cfg.stage(stage)
    return run_stage(sc, state, codebook, data, K=cfg.K, seed=[cfg.seed, 20 + stage, k],
                     total_steps=steps_for(len(data), sc, _spk(cfg).get(str(stage))),
                     straight_through=cfg.straight_through_stage2 or stage == 3, optimizer=opt, tag=f"stage{stage}")


def run_continual(plan: StreamPlan, cfg: RunConfig, bundle: DataBundle | None = None) -> ContinualResult:
    bundle = bundle or load_bundle(cfg)
    unknown = [t for t in plan.tools if t not in bundle.train]
    if unknown:
        raise ConfigError(f"plan names tools with no data: {unknown}")
    if sorted(plan.tools) != sorted(bundle.tools):
        raise ConfigError("plan groups must cover exactly the tools in scope")

    seed = cfg.seed
    state, codebook = new_model(bundle, cfg)
    opt = AdamW(weight_decay=cfg.weight_decay)
    use_codebook = plan.strategy in (COLT, JOINT)
    K = cfg.K if use_codebook else 0
    spk = _spk(cfg)
    result = ContinualResult(plan, AccuracyMatrix(len(plan.groups)))
    mix_rng = np.random.default_rng([seed, 3])

    def log_run(run, k):
        for row in run.log:
            result.logs.append({**row, "group": k, "strategy": plan.label})

    for run in pretrain(state, codebook, bundle, cfg, opt):
        log_run(run, 0)

    def train_on(data, k):
        data = mix_plain(data, bundle, cfg, mix_rng)
        if use_codebook:
            for stage in (2, 3):
                log_run(train_stage(stage, state, codebook, data, cfg, opt, k), k)
        else:
            # same optimiser budget as stages 2+3, plain fine-tuning of projector + decoder
            s3 = cfg.stage(3)
            steps = sum(steps_for(len(data), cfg.stage(n), spk.get(str(n))) for n in (2, 3))
            run = run_stage(s3, state, None, data, K=0, seed=[seed, 30, k], total_steps=steps, mask=BASELINE_MASK,
                            optimizer=opt, tag="finetune")
            log_run(run, k)

    groups = plan.groups
    buffer = ReservoirBuffer(plan.buffer_per_tool, seed=[seed, 4]) if plan.strategy == REHEARSAL else None
    if plan.strategy == JOINT:
        everything = [x for g in groups for t in g for x in bundle.train[t]]
        result.training_sets.append(sorted(x.id or "" for x in everything))
        train_on(everything, 0)

    for k, group in enumerate(groups, 1):
        if plan.strategy != JOINT:
            data = [x for t in group for x in bundle.train[t]]
            if buffer is not None:
                data = data + buffer.samples()
            result.training_sets.append(sorted(x.id or "" for x in data))
            train_on(data, k)
            if buffer is not None:
                for t in group:
                    for x in bundle.train[t]:
                        buffer.add(t, x)
                result.buffer_audit.append(buffer.audit())
        per_tool = {}
        for j, g in enumerate(groups[:k], 1):
            # a(k, j) pools the test instances of every tool in group j
            pooled = []
            for t in g:
                hits = tool_hits(state, codebook, bundle.test[t], K, bundle, cfg)
                per_tool[t] = sum(hits) / len(hits) if hits else float("nan")
                pooled += hits
            if not pooled:
                raise ConfigError(f"group {j} has no test instances")
            result.matrix[k, j] = sum(pooled) / len(pooled)
        result.tool_accuracy.append(per_tool)
        log.info("%s group %d: %s", plan.label, k, [round(result.matrix[k, j], 3) for j in range(1, k + 1)])

    result.state, result.codebook = state, codebook
    return result
