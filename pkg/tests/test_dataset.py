import json
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolcodebook.dataset import (
    CODES,
    DEFAULT_REGISTRY,
    NO_TOOL_THOUGHT,
    ConfigError,
    FixtureRewriteClient,
    HttpRewriteClient,
    ParseError,
    RegistryError,
    RewriteServiceError,
    RewriteUnavailable,
    RewriteViolation,
    SchemaError,
    StratificationError,
    ToolSpec,
    llm_rewrite,
    load_registry,
    parse_conversation,
    read_jsonl,
    reformat_plain_instruction,
    rewrite_corpus,
    save_registry,
    serialize_conversation,
    split_train_test,
    synthesize_corpus,
    validate,
    write_jsonl,
)
from toolcodebook.dataset.registry import check_registry
from toolcodebook.numerics import DegenerateInputError

FIXTURES = Path(__file__).parent / "fixtures"
VOS_LINE = (FIXTURES / "vos_two_round.jsonl").read_bytes().rstrip(b"\n")


def vos():
    return parse_conversation(VOS_LINE)


def test_reference_vos_record_parses():
    c = vos()
    assert [t.role for t in c.turns] == ["human", "gpt", "human", "gpt"]
    assert c.instruction == "Please segment the objects in the video."
    assert [(a.api_name, a.api_params) for a in c.round_one_actions] == [("video-object-segmentation", {})]
    assert c.turns[3].actions == []
    assert c.tool_labels == {"video-object-segmentation"}


def test_reference_vos_record_round_trips_bytes():
    assert serialize_conversation(vos()).encode("utf-8") == VOS_LINE
    assert parse_conversation(serialize_conversation(vos())) == vos()


def test_reference_vos_record_validates():
    assert validate(vos(), DEFAULT_REGISTRY).valid
    without = tuple(t for t in DEFAULT_REGISTRY if "video-object-segmentation" not in t.members)
    rep = validate(vos(), without)
    assert rep.codes == ["UNKNOWN_TOOL"]
    assert rep.violations[0].detail == "video-object-segmentation"


def _mutant(fn):
    obj = json.loads(VOS_LINE)
    fn(obj)
    return parse_conversation(json.dumps(obj), strict=False)


MUTANTS = {
    "WRONG_ROUND_COUNT": lambda o: o["conversations"].pop(),
    "MISSING_KEY": lambda o: o["conversations"][1].pop("thoughts"),
    "UNKNOWN_TOOL": lambda o: o["conversations"][1]["actions"][0].update(API_name="teleport"),
    "NON_ALTERNATING_ROLES": lambda o: o["conversations"][2].update({"from": "gpt", "thoughts": "x", "actions": []}),
    "EMPTY_VALUE": lambda o: o["conversations"][3].update(value="  "),
}


@pytest.mark.parametrize("code", CODES)
def test_each_code_fires_on_its_mutant(code):
    rep = validate(_mutant(MUTANTS[code]), DEFAULT_REGISTRY)
    assert rep.codes == [code]


def test_missing_key_names_field_and_turn():
    rep = validate(_mutant(MUTANTS["MISSING_KEY"]), DEFAULT_REGISTRY)
    v = rep.violations[0]
    assert (v.turn, v.detail) == (1, "thought")
    rep = validate(_mutant(lambda o: o["conversations"][3].pop("actions")), DEFAULT_REGISTRY)
    assert [(v.code, v.turn, v.detail) for v in rep.violations] == [("MISSING_KEY", 3, "actions")]


def test_strict_parse_errors():
    obj = json.loads(VOS_LINE)
    obj["conversations"].pop()
    with pytest.raises(SchemaError, match="expected 4 turns"):
        parse_conversation(json.dumps(obj))
    obj = json.loads(VOS_LINE)
    del obj["conversations"][1]["value"]
    with pytest.raises(SchemaError) as e:
        parse_conversation(json.dumps(obj))
    assert (e.value.field, e.value.turn) == ("value", 1)
    with pytest.raises(ParseError) as e:
        parse_conversation('{"conversations": [}')
    assert e.value.offset == 19


def test_parse_error_offset_counts_bytes():
    with pytest.raises(ParseError) as e:
        parse_conversation('{"id": "é", oops}')
    assert e.value.offset == len('{"id": "é", '.encode())


def test_extra_fields_survive_round_trip():
    obj = json.loads(VOS_LINE)
    obj["source"] = "manual"
    obj["conversations"][0]["lang"] = "en"
    obj["conversations"][1]["score"] = 3
    line = json.dumps(obj, ensure_ascii=False)
    assert serialize_conversation(parse_conversation(line)) == line


def test_reformat_rule():
    c = reformat_plain_instruction("What color is the car?", "Red.")
    assert c.turns[1].thought.encode() == (
        b"The questions can be answered by the information in the context, without need any external tools."
    )
    assert c.turns[1].thought == NO_TOOL_THOUGHT
    assert c.turns[1].actions == [] and c.turns[1].value == "Red."
    assert validate(c, ()).valid and validate(c, DEFAULT_REGISTRY).valid
    again = reformat_plain_instruction(c.instruction, c.turns[1].value)
    assert again == c
    with pytest.raises(DegenerateInputError):
        reformat_plain_instruction("", "x")


def test_synthetic_corpus_contract():
    corpus = synthesize_corpus(DEFAULT_REGISTRY, 50, seed=1)
    assert len(corpus) == 500
    assert all(validate(c, DEFAULT_REGISTRY).valid for c in corpus)
    again = synthesize_corpus(DEFAULT_REGISTRY, 50, seed=1)
    assert [serialize_conversation(c) for c in corpus] == [serialize_conversation(c) for c in again]
    comp = [c for c in corpus if c.tool_key == "action-recognition+asr"]
    assert comp and all(sorted(a.api_name for a in c.round_one_actions) == ["action-recognition", "asr"] for c in comp)
    for c in corpus:
        for t in c.turns:
            assert "<" not in (t.value or "")


def test_synth_templates_cover_every_tool():
    from toolcodebook.dataset.synth import INSTRUCTIONS

    for t in DEFAULT_REGISTRY:
        assert len(set(INSTRUCTIONS[t.name])) >= 8


def test_synth_errors():
    with pytest.raises(ConfigError):
        synthesize_corpus((), 5, seed=0)


def test_split_5000_per_tool():
    corpus = synthesize_corpus(DEFAULT_REGISTRY[:1], 5000, seed=2)
    train, test = split_train_test(corpus, seed=2)
    assert (len(train), len(test)) == (4500, 500)


def test_split_ten_and_errors():
    corpus = synthesize_corpus(DEFAULT_REGISTRY[:1], 10, seed=2)
    train, test = split_train_test(corpus, seed=0)
    assert (len(train), len(test)) == (9, 1)
    with pytest.raises(StratificationError):
        split_train_test(corpus[:9], seed=0)
    lonely = synthesize_corpus(DEFAULT_REGISTRY[:2], 9, seed=2)[:10]
    with pytest.raises(StratificationError):
        split_train_test(lonely, seed=0)


@given(st.lists(st.integers(2, 40), min_size=1, max_size=4), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_split_is_a_stratified_partition(sizes, seed):
    corpus = []
    for tool, n in zip(DEFAULT_REGISTRY, sizes):
        corpus += synthesize_corpus((tool,), n, seed=1)
    if len(corpus) < 10:
        return
    train, test = split_train_test(corpus, seed)
    assert Counter(c.id for c in train + test) == Counter(c.id for c in corpus)
    assert not {c.id for c in train} & {c.id for c in test}
    for tool, n in zip(DEFAULT_REGISTRY, sizes):
        assert sum(c.tool_key == tool.name for c in test) == n - (9 * n) // 10
    assert split_train_test(corpus, seed) == (train, test)


def test_jsonl_round_trip(tmp_path):
    corpus = synthesize_corpus(DEFAULT_REGISTRY, 3, seed=4)
    write_jsonl(tmp_path / "c.jsonl", corpus)
    assert read_jsonl(tmp_path / "c.jsonl") == corpus
    text = (tmp_path / "c.jsonl").read_text(encoding="utf-8")
    write_jsonl(tmp_path / "d.jsonl", read_jsonl(tmp_path / "c.jsonl"))
    assert (tmp_path / "d.jsonl").read_text(encoding="utf-8") == text


def test_registry_file_round_trip(tmp_path):
    save_registry(DEFAULT_REGISTRY, tmp_path / "r.json")
    assert load_registry(tmp_path / "r.json") == DEFAULT_REGISTRY
    assert len(DEFAULT_REGISTRY) == 10
    assert sum(t.is_composite for t in DEFAULT_REGISTRY) == 2


def test_registry_rejects_dangling_composite():
    bad = (ToolSpec("asr", "asr"), ToolSpec("asr+ocr", "both", composite_of=("asr", "ocr")))
    with pytest.raises(RegistryError):
        check_registry(bad)


def test_mock_rewrite_keeps_guarded_fields():
    c = vos()
    new = llm_rewrite(c)
    assert [t.role for t in new.turns] == [t.role for t in c.turns]
    assert [t.actions for t in new.turns] == [t.actions for t in c.turns]
    assert new.turns[1].value != c.turns[1].value


def test_rewrite_rejects_renamed_action():
    obj = vos().to_json()
    obj["conversations"][1]["actions"][0]["API_name"] = "ocr"
    with pytest.raises(RewriteViolation) as e:
        llm_rewrite(vos(), FixtureRewriteClient([obj]))
    assert e.value.code == "REWRITE_VIOLATION"


def test_rewrite_offline_mode():
    with pytest.raises(RewriteUnavailable):
        llm_rewrite(vos(), None)
    corpus = [vos(), vos()]
    out, issues = rewrite_corpus(corpus, None)
    assert out == corpus and issues == [(-1, "UNAVAILABLE")]


def test_rewrite_corpus_keeps_rejected_originals():
    bad = vos().to_json()
    bad["conversations"][0]["from"] = "gpt"
    good = vos().to_json()
    good["conversations"][1]["value"] = "On it."
    out, issues = rewrite_corpus([vos(), vos()], FixtureRewriteClient([bad, good]))
    assert out[0] == vos() and out[1].turns[1].value == "On it."
    assert issues == [(0, "REWRITE_VIOLATION")]


def test_http_client_reports_retries():
    client = HttpRewriteClient("http://127.0.0.1:9/rewrite", timeout=0.2, max_retries=2, backoff=0.0)
    with pytest.raises(RewriteServiceError) as e:
        llm_rewrite(vos(), client)
    assert e.value.retries == 2


def test_http_client_wire_format():
    import threading
    from http.server import BaseHTTPRequestHandler, HTTPServer

    seen = {}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen.update(body)
            rec = body["example_record"]
            rec["conversations"][3]["value"] = "All done."
            data = json.dumps({"record": rec}).encode()
            self.send_response(200)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *a):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.handle_request, daemon=True).start()
    try:
        out = llm_rewrite(vos(), HttpRewriteClient(f"http://127.0.0.1:{server.server_port}/", max_retries=0))
    finally:
        server.server_close()
    assert set(seen) == {"system_prompt", "example_record"}
    assert out.turns[3].value == "All done."
