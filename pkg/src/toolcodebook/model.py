"""Desk-scale video-LLM stand-in.

Pieces: a frozen synthetic visual source, a linear projector, a token
embedding table, a query encoder with its own embedding table, and a
mean-context decoder (context = mean of visible rows -> tanh layer -> logits).
Every op has a hand-written backward; gradients accumulate into ``Param.grad``.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .codebook import Selection, ToolCodebook, select_topk, straight_through_backward, straight_through_prompt, vq_losses
from .dataset.registry import api_names
from .dataset.schema import Conversation, ToolCall
from .numerics import DTYPE, DegenerateInputError, Param, ShapeError, log_softmax

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
ACT_OPEN, ACT_CLOSE, NEXT_TURN = "<act>", "</act>", "<next>"
SPECIALS = (PAD, UNK, BOS, EOS, ACT_OPEN, ACT_CLOSE, NEXT_TURN)

TOOL_VISION_TEXT = "tool-vision-text"
VISION_TOOL_TEXT = "vision-tool-text"
VISION_TEXT_TOOL = "vision-text-tool"
POLICIES = (TOOL_VISION_TEXT, VISION_TOOL_TEXT, VISION_TEXT_TOOL)
DEFAULT_POLICY = VISION_TEXT_TOOL

PROJECTOR, QUERY_ENCODER, DECODER, CODEBOOK = "projector", "query_encoder", "decoder", "codebook"
PARAM_GROUPS = {
    PROJECTOR: ("proj_W", "proj_b"),
    QUERY_ENCODER: ("query_emb", "query_W"),
    DECODER: ("tok_emb", "dec_W1", "dec_b1", "dec_W2", "dec_b2"),
}

_TOKEN = re.compile(r"[a-z0-9][a-z0-9\-+']*|[^\sa-z0-9]")


class VocabError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        for s in (PAD, UNK, BOS, EOS):
            if s not in tokens:
                raise VocabError(f"vocabulary lacks {s}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, text_or_tokens, strict: bool = True) -> list[int]:
        toks = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
        out = []
        for t in toks:
            i = self.index.get(t)
            if i is None:
                if strict:
                    raise VocabError(f"out-of-vocabulary token {t!r}")
                i = self.index[UNK]
            out.append(i)
        return out

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def build(cls, convs, registry=()) -> "Vocab":
        seen = set()
        for t in registry:
            seen.add(t.name)
            seen.update(t.members)
        for c in convs:
            for turn in c.turns:
                for text in (turn.value, turn.thought):
                    if text:
                        seen.update(tokenize(text))
                for a in turn.actions or ():
                    seen.add(a.api_name)
        seen.difference_update(SPECIALS)
        return cls(list(SPECIALS) + sorted(seen))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls(line.rstrip("\n") for line in f if line.rstrip("\n"))


class SyntheticVisualSource:
    """Frozen stand-in for the vision encoder: a Gaussian cluster per tool key.

    Features depend only on (seed, cluster key, video id), so corpus files on
    disk are enough to rebuild every instance.
    """

    def __init__(self, D: int = 32, P_patch: int = 4, seed: int = 0, noise: float = 0.5):
        self.D, self.P_patch, self.seed, self.noise = D, P_patch, seed, noise
        self._centers: dict[str, np.ndarray] = {}

    def _rng(self, *parts: str):
        return np.random.default_rng([self.seed] + [zlib.crc32(p.encode()) for p in parts])

    def center(self, key: str) -> np.ndarray:
        if key not in self._centers:
            self._centers[key] = self._rng("center", key or "plain").normal(size=(self.P_patch, self.D))
        return self._centers[key]

    def features(self, key: str, video_id: str) -> np.ndarray:
        noise = self._rng("noise", key or "plain", video_id or "").normal(size=(self.P_patch, self.D))
        return self.center(key) + self.noise * noise


@dataclass
class Instance:
    visual_raw: np.ndarray
    instruction_tokens: list[int]
    target_tokens: list[int]
    tool_labels: frozenset[str]
    reference_calls: list[ToolCall] = field(default_factory=list)
    tool_key: str = ""
    id: str | None = None

    def __post_init__(self):
        if not self.target_tokens:
            raise DegenerateInputError("empty target")


def target_tokens_for(conv: Conversation, vocab: Vocab, rounds: int = 2) -> list[int]:
    """<act> names </act> reply [<next> <act> names </act> reply] <eos>"""
    gpt_turns = [t for t in conv.turns if t.role == "gpt"][:rounds]
    toks: list[str] = []
    for i, t in enumerate(gpt_turns):
        if i:
            toks.append(NEXT_TURN)
        toks.append(ACT_OPEN)
        toks.extend(a.api_name for a in t.actions or ())
        toks.append(ACT_CLOSE)
        toks.extend(tokenize(t.value or ""))
    toks.append(EOS)
    return vocab.encode(toks)


def build_instance(conv: Conversation, vocab: Vocab, visual: SyntheticVisualSource, rounds: int = 2) -> Instance:
    return Instance(
        visual_raw=visual.features(conv.tool_key, conv.video or conv.id or ""),
        instruction_tokens=vocab.encode(conv.instruction),
        target_tokens=target_tokens_for(conv, vocab, rounds),
        tool_labels=conv.tool_labels,
        reference_calls=conv.round_one_actions,
        tool_key=conv.tool_key,
        id=conv.id,
    )


def echo_instances(vocab: Vocab, n: int, visual: SyntheticVisualSource, seed) -> list[Instance]:
    """Generic call-format data: 'use the <w> tool' -> <act> w </act>, for random vocabulary words.

    Teaches the decoder the action format and that any word can be emitted;
    it carries no instruction-to-tool knowledge.
    """
    rng = np.random.default_rng(seed)
    words = [t for t in vocab.tokens if t not in SPECIALS]
    lead = [w for w in ("use", "the", "tool", "on", "video", ".") if w in vocab]
    reply = [w for w in ("sure", ".") if w in vocab]
    out = []
    for i in range(n):
        w = words[int(rng.integers(len(words)))]
        instr = lead[:2] + [w] + lead[2:]
        out.append(Instance(
            visual_raw=visual.features("echo", f"echo-{i}"),
            instruction_tokens=vocab.encode(instr),
            target_tokens=vocab.encode([ACT_OPEN, w, ACT_CLOSE] + reply + [EOS]),
            tool_labels=frozenset(),
            tool_key="echo",
            id=f"echo-{i:05d}",
        ))
    return out


def parse_predicted_calls(tokens, vocab: Vocab, tool_names) -> list[ToolCall]:
    """Tool names emitted inside the first <act> ... </act> block."""
    words = vocab.decode(tokens) if tokens and not isinstance(tokens[0], str) else list(tokens)
    calls, inside = [], False
    for w in words:
        if w == ACT_OPEN and not inside:
            inside = True
        elif inside and w in (ACT_CLOSE, EOS, NEXT_TURN):
            break
        elif inside and w in tool_names:
            calls.append(ToolCall(w, {}))
    return calls


@dataclass
class ModelState:
    params: dict[str, Param]
    V: int
    C: int
    D: int
    H: int
    policy: str = DEFAULT_POLICY

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown position policy {self.policy!r}")

    def __getitem__(self, name) -> Param:
        return self.params[name]

    def group(self, name) -> list[Param]:
        return [self.params[n] for n in PARAM_GROUPS[name]]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def init_model(V: int, C: int, D: int, H: int, seed, policy: str = DEFAULT_POLICY) -> ModelState:
    rng = np.random.default_rng(seed)
    params = {
        "proj_W": Param(rng.normal(0, 1 / np.sqrt(D), (D, C))),
        "proj_b": Param(np.zeros(C)),
        "query_emb": Param(rng.normal(0, 1.0, (V, C))),
        "query_W": Param(np.eye(C)),
        "tok_emb": Param(rng.normal(0, 1.0, (V, C))),
        "dec_W1": Param(rng.normal(0, 1 / np.sqrt(C), (H, C))),
        "dec_b1": Param(np.zeros(H)),
        "dec_W2": Param(rng.normal(0, 1 / np.sqrt(H), (V, H))),
        "dec_b2": Param(np.zeros(V)),
    }
    return ModelState(params, V=V, C=C, D=D, H=H, policy=policy)


# ---- differentiable ops -----------------------------------------------------

def project_visual(state: ModelState, visual_raw) -> np.ndarray:
    X = np.asarray(visual_raw, dtype=DTYPE)
    if X.ndim != 2 or X.shape[1] != state.D:
        raise ShapeError(f"visual width {X.shape} does not match projector input {state.D}")
    return X @ state["proj_W"].value + state["proj_b"].value


def project_visual_backward(state: ModelState, visual_raw, grad_hv) -> None:
    state["proj_W"].grad += np.asarray(visual_raw).T @ grad_hv
    state["proj_b"].grad += grad_hv.sum(axis=0)


def _check_ids(tokens, V):
    ids = np.asarray(tokens, dtype=int)
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token index out of range for vocabulary of {V}")
    return ids


def embed_text(state: ModelState, tokens) -> np.ndarray:
    ids = _check_ids(tokens, state.V)
    if ids.size == 0:
        return np.zeros((0, state.C))
    return state["tok_emb"].value[ids]


def embed_text_backward(state: ModelState, tokens, grad_hw) -> None:
    if len(tokens):
        np.add.at(state["tok_emb"].grad, np.asarray(tokens, dtype=int), grad_hw)


def encode_query(state: ModelState, instruction_tokens) -> np.ndarray:
    ids = _check_ids(instruction_tokens, state.V)
    if ids.size == 0:
        raise DegenerateInputError("query encoder needs at least one token")
    pooled = state["query_emb"].value[ids].mean(axis=0)
    return state["query_W"].value @ pooled


def encode_query_backward(state: ModelState, instruction_tokens, grad_q) -> None:
    ids = np.asarray(instruction_tokens, dtype=int)
    pooled = state["query_emb"].value[ids].mean(axis=0)
    W = state["query_W"]
    W.grad += np.outer(grad_q, pooled)
    d_pooled = W.value.T @ grad_q
    np.add.at(state["query_emb"].grad, ids, np.broadcast_to(d_pooled / ids.size, (ids.size, state.C)))


def assemble_sequence(H_v, H_w, prompts, policy: str = DEFAULT_POLICY):
    """Row-concatenate visual, text and prompt rows; returns (matrix, slices by segment)."""
    C = H_v.shape[1]
    if prompts is None or np.size(prompts) == 0:
        prompts = np.zeros((0, C))
    prompts = np.atleast_2d(np.asarray(prompts, dtype=DTYPE))
    if H_w.shape[1] != C or prompts.shape[1] != C:
        raise ShapeError("conditioning widths disagree")
    parts = {"vision": H_v, "text": H_w, "tool": prompts}
    order = policy.split("-")
    if sorted(order) != ["text", "tool", "vision"]:
        raise ValueError(f"unknown position policy {policy!r}")
    slices, start = {}, 0
    for name in order:
        n = parts[name].shape[0]
        slices[name] = slice(start, start + n)
        start += n
    return np.vstack([parts[n] for n in order]), slices


@dataclass
class DecodeResult:
    loss: float
    grad_conditioning: np.ndarray | None
    step_losses: np.ndarray


def decode_lm_loss(state: ModelState, conditioning, target_tokens, backward: bool = True, scale: float = 1.0) -> DecodeResult:
    """Teacher-forced mean token cross-entropy.

    Step i sees the conditioning rows plus the embeddings of target[:i]; its
    context is their mean. With ``backward`` the decoder gradients (times
    ``scale``) are accumulated and d loss / d conditioning is returned.
    """
    y = _check_ids(target_tokens, state.V)
    L = y.size
    if L == 0:
        raise DegenerateInputError("empty target sequence")
    cond = np.asarray(conditioning, dtype=DTYPE)
    M = cond.shape[0]
    if M == 0:
        raise DegenerateInputError("decoder needs at least one conditioning row")
    E = state["tok_emb"].value
    W1, b1 = state["dec_W1"].value, state["dec_b1"].value
    W2, b2 = state["dec_W2"].value, state["dec_b2"].value

    T = E[y]
    prefix = np.zeros((L, state.C))
    if L > 1:
        prefix[1:] = np.cumsum(T[:-1], axis=0)
    counts = M + np.arange(L, dtype=DTYPE)
    ctx = (cond.sum(axis=0) + prefix) / counts[:, None]
    h = np.tanh(ctx @ W1.T + b1)
    logp = log_softmax(h @ W2.T + b2)
    step = -logp[np.arange(L), y]
    loss = float(step.mean())
    if not backward:
        return DecodeResult(loss, None, step)

    d_logits = np.exp(logp)
    d_logits[np.arange(L), y] -= 1.0
    d_logits *= scale / L
    state["dec_W2"].grad += d_logits.T @ h
    state["dec_b2"].grad += d_logits.sum(axis=0)
    d_a = (d_logits @ W2) * (1.0 - h * h)
    state["dec_W1"].grad += d_a.T @ ctx
    state["dec_b1"].grad += d_a.sum(axis=0)
    d_ctx = (d_a @ W1) / counts[:, None]
    # target token t is visible from step t+1 on
    if L > 1:
        tail = np.cumsum(d_ctx[::-1], axis=0)[::-1]
        np.add.at(state["tok_emb"].grad, y[:-1], tail[1:])
    g_row = d_ctx.sum(axis=0)
    return DecodeResult(loss, np.broadcast_to(g_row, (M, state.C)).copy(), step)


def generate(state: ModelState, conditioning, max_len: int, eos: int | None = None) -> list[int]:
    """Greedy decoding; np.argmax already breaks ties toward the lowest index."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    cond = np.asarray(conditioning, dtype=DTYPE)
    E = state["tok_emb"].value
    W1, b1 = state["dec_W1"].value, state["dec_b1"].value
    W2, b2 = state["dec_W2"].value, state["dec_b2"].value
    total, count = cond.sum(axis=0), cond.shape[0]
    out: list[int] = []
    for _ in range(max_len):
        logits = W2 @ np.tanh(W1 @ (total / count) + b1) + b2
        tok = int(np.argmax(logits))
        out.append(tok)
        if tok == eos:
            break
        total = total + E[tok]
        count += 1
    return out


# ---- full pipeline ----------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    lm: float
    quant: float = 0.0
    commit: float = 0.0
    selection: Selection | None = None


def conditioning_for(state: ModelState, codebook: ToolCodebook | None, inst: Instance, K: int):
    """Forward-only conditioning (used for inference)."""
    H_v = project_visual(state, inst.visual_raw)
    H_w = embed_text(state, inst.instruction_tokens)
    prompts, sel = None, None
    if K and codebook is not None:
        q = encode_query(state, inst.instruction_tokens)
        sel = select_topk(codebook, q, K)
        prompts = np.stack([straight_through_prompt(q, codebook.prompts.value[i]) for i in sel.indices])
    cond, _ = assemble_sequence(H_v, H_w, prompts, state.policy)
    return cond, sel


def instance_loss(
    state: ModelState,
    codebook: ToolCodebook | None,
    inst: Instance,
    K: int = 0,
    lam1: float = 0.0,
    lam2: float = 0.0,
    straight_through: bool = True,
    backward: bool = True,
    scale: float = 1.0,
) -> LossBreakdown:
    """LM loss (+ VQ terms when K > 0); gradients land in Param.grad times ``scale``.

    With K = 0 this is the plain unconditioned LM loss.
    """
    H_v = project_visual(state, inst.visual_raw)
    H_w = embed_text(state, inst.instruction_tokens)
    q = sel = prompts = None
    if K:
        if codebook is None:
            raise ValueError("K > 0 needs a codebook")
        q = encode_query(state, inst.instruction_tokens)
        sel = select_topk(codebook, q, K)
        prompts = np.stack([straight_through_prompt(q, codebook.prompts.value[i]) for i in sel.indices])
    cond, slices = assemble_sequence(H_v, H_w, prompts, state.policy)
    dec = decode_lm_loss(state, cond, inst.target_tokens, backward=backward, scale=scale)
    out = LossBreakdown(total=dec.loss, lm=dec.loss, selection=sel)

    vq = None
    if K:
        vq = vq_losses(q, sel, codebook, lam1, lam2)
        out.quant, out.commit = vq.quant_loss, vq.commit_loss
        out.total = dec.loss + vq.loss
    if not backward:
        return out

    g = dec.grad_conditioning
    project_visual_backward(state, inst.visual_raw, g[slices["vision"]])
    embed_text_backward(state, inst.instruction_tokens, g[slices["text"]])
    if K:
        grad_q = scale * vq.grad_query
        if straight_through:
            for row in g[slices["tool"]]:
                gq, _ = straight_through_backward(row)
                grad_q = grad_q + gq
        codebook.prompts.grad += scale * vq.grad_prompts
        encode_query_backward(state, inst.instruction_tokens, grad_q)
    return out
