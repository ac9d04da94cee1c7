from .registry import DEFAULT_REGISTRY, RegistryError, ToolSpec, load_registry, save_registry
from .rewrite import (
    FixtureRewriteClient,
    HttpRewriteClient,
    MockRewriteClient,
    RewriteServiceError,
    RewriteUnavailable,
    RewriteViolation,
    llm_rewrite,
    rewrite_corpus,
)
from .schema import (
    Conversation,
    ParseError,
    SchemaError,
    ToolCall,
    Turn,
    parse_conversation,
    read_jsonl,
    serialize_conversation,
    write_jsonl,
)
from .synth import (
    NO_TOOL_THOUGHT,
    ConfigError,
    StratificationError,
    reformat_plain_instruction,
    split_train_test,
    synthesize_corpus,
    synthesize_plain,
)
from .validate import CODES, ValidationReport, Violation, validate
