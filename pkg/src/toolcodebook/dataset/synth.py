"""Deterministic synthetic corpus, the plain-instruction reformat rule and the 9:1 split."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..numerics import DegenerateInputError
from .registry import ToolSpec, check_registry
from .schema import GPT, HUMAN, Conversation, ToolCall, Turn

NO_TOOL_THOUGHT = (
    "The questions can be answered by the information in the context, "
    "without need any external tools."
)
ACK_HUMAN = "Thanks, that answers my question."
ACK_THOUGHT = "The user has what they asked for, so no further action is needed."
ACK_VALUE = "You are welcome. Let me know if you need anything else."

TRAIN_NUM, TRAIN_DEN = 9, 10


class ConfigError(ValueError):
    pass


class StratificationError(ValueError):
    pass


def reformat_plain_instruction(question: str, answer: str, id=None, video=None) -> Conversation:
    if not question or not question.strip() or not answer or not answer.strip():
        raise DegenerateInputError("question and answer must be non-empty")
    return Conversation(
        turns=[
            Turn(HUMAN, question),
            Turn(GPT, answer, thought=NO_TOOL_THOUGHT, actions=[]),
            Turn(HUMAN, ACK_HUMAN),
            Turn(GPT, ACK_VALUE, thought=ACK_THOUGHT, actions=[]),
        ],
        id=id,
        video=video,
    )


# ---- templates --------------------------------------------------------------

VIDEO_NOUNS = ("video", "clip", "footage", "recording")
PREFIXES = ("", "please ", "could you ", "i need you to ", "can you ")
SUFFIXES = ("", " for me", " right now", " please")

INSTRUCTIONS: dict[str, tuple[str, ...]] = {
    "action-recognition": (
        "recognize the action happening in the {v}",
        "tell me what activity the person performs in the {v}",
        "identify the human action shown in this {v}",
        "classify the movement the people are doing in the {v}",
        "figure out which sport or activity appears in the {v}",
        "detect what the subject is doing throughout the {v}",
        "name the action being carried out in the {v}",
        "determine the type of activity in this {v}",
    ),
    "dense-video-caption": (
        "generate captions for every event in the {v}",
        "describe each event in the {v} with a caption",
        "write dense captions for the {v}",
        "produce a timeline of captions for the {v}",
        "caption all the events that happen in the {v}",
        "give a detailed caption for each segment of the {v}",
        "summarize the {v} with event captions",
        "create captions describing the scenes of the {v}",
    ),
    "temporal-action-localization": (
        "find when the main action starts and ends in the {v}",
        "localize the action segments in time within the {v}",
        "give me the start and end timestamps of actions in the {v}",
        "locate the time interval of each action in the {v}",
        "mark the moments where the activity occurs in the {v}",
        "detect the temporal boundaries of actions in the {v}",
        "tell me at which seconds the action begins in the {v}",
        "split the {v} into action intervals with timestamps",
    ),
    "ocr": (
        "read the text that appears in the {v}",
        "extract all written words shown on screen in the {v}",
        "recognize the characters on the signs in the {v}",
        "transcribe the visible text from the {v}",
        "what does the writing in the {v} say",
        "pull out the printed letters from the frames of the {v}",
        "detect and read the subtitles burned into the {v}",
        "get the text on the board in the {v}",
    ),
    "asr": (
        "transcribe the audio content from the {v}",
        "convert the spoken words in the {v} into text",
        "write down what the speaker says in the {v}",
        "give me a transcript of the speech in the {v}",
        "recognize the speech in the {v}",
        "turn the dialogue of the {v} into written text",
        "listen to the {v} and transcribe the narration",
        "produce the speech transcript for the {v}",
    ),
    "video-relation-detection": (
        "detect the relations between objects in the {v}",
        "find how the objects interact with each other in the {v}",
        "identify subject and object relationships in the {v}",
        "describe the spatial relations between things in the {v}",
        "list the object relation triplets in the {v}",
        "tell me which objects are next to or behind each other in the {v}",
        "extract the interactions among objects in the {v}",
        "analyze the relationships of the objects across the {v}",
    ),
    "video-object-segmentation": (
        "segment the objects in the {v}",
        "produce segmentation masks for the objects in the {v}",
        "separate each object from the background in the {v}",
        "outline every object with a mask in the {v}",
        "give me pixel masks of the moving objects in the {v}",
        "cut out the foreground objects in the {v}",
        "track and segment the instances in the {v}",
        "create object masks frame by frame for the {v}",
    ),
    "text-to-video": (
        "generate a {v} of a dog running on the beach",
        "create a short {v} showing a sunset over the sea",
        "make a {v} of a cat playing with a ball",
        "synthesize a {v} of rain falling on a city street",
        "produce a new {v} of a car driving through the forest",
        "render a {v} where a bird flies over mountains",
        "generate an animated {v} of a robot dancing",
        "create a {v} from the description of a busy market",
    ),
    "action-recognition+asr": (
        "recognize the action in the {v} and transcribe the speech",
        "tell me what the person does in the {v} and what they say",
        "identify the activity and write down the spoken words in the {v}",
        "classify the action and give a transcript of the audio in the {v}",
        "detect what is happening and convert the speech to text in the {v}",
        "name the activity in the {v} and transcribe the narration",
        "figure out the action and the dialogue of the {v}",
        "determine the activity and the spoken content in this {v}",
    ),
    "action-recognition+video-object-segmentation": (
        "recognize the action in the {v} and segment the objects",
        "tell me what the person does in the {v} and mask the objects",
        "identify the activity and produce object masks in the {v}",
        "classify the action and separate the objects from the background in the {v}",
        "detect what is happening and segment each object in the {v}",
        "name the activity in the {v} and outline every object",
        "figure out the action and cut out the foreground objects of the {v}",
        "determine the activity and track and segment the instances in this {v}",
    ),
}

THOUGHTS = (
    "I need to use the {name} model to follow the user's request.",
    "Request a process of {display} based on the user's prompt.",
    "The user asks for {display}, so I should call the right tool.",
)
REPLIES = (
    "Sure thing! I'll run the {display} model on the {v}. Please wait while the processing takes place.",
    "Certainly! I will use a {display} model for this {v}. Please wait a moment.",
    "No problem. Starting {display} on the {v} now.",
)
RESULTS: dict[str, tuple[str, ...]] = {
    "action-recognition": ("the person is playing basketball", "a man is riding a bike", "two kids are dancing"),
    "dense-video-caption": ("0s to 5s a woman enters the kitchen; 5s to 9s she cooks", "0s to 4s a crowd gathers"),
    "temporal-action-localization": ("jumping from 3s to 7s", "running from 1s to 12s", "throwing from 4s to 6s"),
    "ocr": ("the sign says open all day", "the board reads welcome home", "the caption says breaking news"),
    "asr": ("hello everyone and welcome to the show", "today we will learn to cook pasta"),
    "video-relation-detection": ("dog next to person; ball in front of dog", "car behind truck"),
    "video-object-segmentation": ("three object masks were produced", "two object masks were produced"),
    "text-to-video": ("a sixteen frame video was generated", "a short video was generated"),
}
DONE_THOUGHTS = (
    "Now that the {display} model has finished, it is time to update the user.",
    "I have completed the {display} process. Now I will report back.",
)
DONE_REPLIES = (
    "The {display} results are ready for your review.",
    "The {display} is complete. You can now review the results.",
)

PLAIN_QA = (
    ("what color is the {obj} in the {v}", "The {obj} is {color}."),
    ("how many {obj}s can you see in the {v}", "There are {n} {obj}s."),
    ("where is the {obj} in the {v}", "The {obj} is {place}."),
    ("is the {obj} in the {v} moving", "{yesno}, the {obj} is {motion}."),
    ("what is the weather like in the {v}", "It looks {weather}."),
)
OBJECTS = ("car", "dog", "ball", "chair", "tree", "boat")
COLORS = ("red", "blue", "green", "white", "black", "yellow")
PLACES = ("on the left", "on the right", "in the middle", "near the door", "behind the table")
WEATHER = ("sunny", "rainy", "cloudy", "snowy")


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _sentence(text: str) -> str:
    text = text.strip()
    return text[0].upper() + text[1:] + ("." if text[-1] not in ".?!" else "")


def make_instruction(tool_name: str, rng) -> str:
    tmpl = _pick(rng, INSTRUCTIONS[tool_name])
    body = _pick(rng, PREFIXES) + tmpl.format(v=_pick(rng, VIDEO_NOUNS)) + _pick(rng, SUFFIXES)
    return _sentence(body)


def _result(tool: ToolSpec, rng) -> str:
    return "; ".join(_pick(rng, RESULTS[m]) for m in tool.members)


def make_tool_conversation(tool: ToolSpec, rng, id=None) -> Conversation:
    if tool.name not in INSTRUCTIONS:
        raise ConfigError(f"no instruction templates for tool {tool.name!r}")
    v = _pick(rng, VIDEO_NOUNS)
    fmt = {"name": tool.name, "display": tool.display, "v": v}
    actions = [ToolCall(m, {}) for m in tool.members]
    return Conversation(
        turns=[
            Turn(HUMAN, make_instruction(tool.name, rng)),
            Turn(GPT, _pick(rng, REPLIES).format(**fmt), thought=_pick(rng, THOUGHTS).format(**fmt), actions=actions),
            Turn(HUMAN, f"{tool.name} output: {_result(tool, rng)}"),
            Turn(GPT, _pick(rng, DONE_REPLIES).format(**fmt), thought=_pick(rng, DONE_THOUGHTS).format(**fmt), actions=[]),
        ],
        id=id,
        video=f"{tool.name}/{id}.mp4" if id is not None else None,
    )


def make_plain_conversation(rng, id=None) -> Conversation:
    q, a = PLAIN_QA[int(rng.integers(len(PLAIN_QA)))]
    fmt = {
        "v": _pick(rng, VIDEO_NOUNS),
        "obj": _pick(rng, OBJECTS),
        "color": _pick(rng, COLORS),
        "n": _pick(rng, ("two", "three", "four", "five")),
        "place": _pick(rng, PLACES),
        "yesno": _pick(rng, ("Yes", "No")),
        "weather": _pick(rng, WEATHER),
    }
    fmt["motion"] = "moving" if fmt["yesno"] == "Yes" else "standing still"
    return reformat_plain_instruction(
        _sentence(q.format(**fmt)).rstrip(".") + "?",
        a.format(**fmt),
        id=id,
        video=f"plain/{id}.mp4" if id is not None else None,
    )


def synthesize_corpus(registry, per_tool: int, seed) -> list[Conversation]:
    """per_tool conversations for every registry tool, in registry order."""
    if not registry:
        raise ConfigError("empty registry")
    if per_tool < 1:
        raise ConfigError("per_tool must be >= 1")
    check_registry(registry)
    out = []
    for ti, tool in enumerate(registry):
        rng = np.random.default_rng([int(seed), ti])
        for i in range(per_tool):
            out.append(make_tool_conversation(tool, rng, id=f"{tool.name}-{i:05d}"))
    return out


def synthesize_plain(n: int, seed) -> list[Conversation]:
    rng = np.random.default_rng([int(seed), 10_007])
    return [make_plain_conversation(rng, id=f"plain-{i:05d}") for i in range(n)]


def split_train_test(corpus, seed) -> tuple[list[Conversation], list[Conversation]]:
    """Per-tool 9:1 split (train gets the floor); outputs keep corpus order."""
    corpus = list(corpus)
    if len(corpus) < 10:
        raise StratificationError(f"corpus of {len(corpus)} records is too small to split")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, c in enumerate(corpus):
        groups[c.tool_key].append(i)
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for key in sorted(groups):
        idx = groups[key]
        if len(idx) < 2:
            raise StratificationError(f"tool {key!r} has {len(idx)} sample(s); need >= 2")
        n_train = len(idx) * TRAIN_NUM // TRAIN_DEN
        perm = rng.permutation(len(idx))
        test_idx.update(idx[j] for j in perm[n_train:])
    train = [c for i, c in enumerate(corpus) if i not in test_idx]
    test = [c for i, c in enumerate(corpus) if i in test_idx]
    return train, test
