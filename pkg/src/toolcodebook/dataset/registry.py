"""Tool registry: the eight single tools and two composites."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class ToolSpec:
    name: str
    display: str
    abbrev: str = ""
    specialist: str = ""
    param_schema: dict[str, str] = field(default_factory=dict)
    composite_of: tuple[str, ...] | None = None

    @property
    def members(self) -> tuple[str, ...]:
        return self.composite_of if self.composite_of else (self.name,)

    @property
    def is_composite(self) -> bool:
        return bool(self.composite_of)


def _composite(*members: ToolSpec, display: str, abbrev: str) -> ToolSpec:
    names = tuple(m.name for m in members)
    return ToolSpec(
        name="+".join(sorted(names)),
        display=display,
        abbrev=abbrev,
        specialist=" + ".join(m.specialist for m in members),
        composite_of=names,
    )


AR = ToolSpec("action-recognition", "action recognition", "AR", "VideoMAE")
DVC = ToolSpec("dense-video-caption", "dense video caption", "DVC", "PDVC")
TAL = ToolSpec("temporal-action-localization", "temporal action localization", "TAL", "InternVideo")
OCR = ToolSpec("ocr", "optical character recognition", "OCR", "EasyOCR")
ASR = ToolSpec("asr", "automatic speech recognition", "ASR", "Whisper", {"language": "str"})
VRD = ToolSpec("video-relation-detection", "video relation detection", "VRD", "VidVRD")
VOS = ToolSpec("video-object-segmentation", "video object segmentation", "VOS", "VisTR")
T2V = ToolSpec("text-to-video", "text to video generation", "T2V", "Text2Video-Zero", {"prompt": "str"})

DEFAULT_REGISTRY: tuple[ToolSpec, ...] = (
    AR, DVC, TAL, OCR, ASR, VRD, VOS, T2V,
    _composite(AR, ASR, display="action recognition and speech recognition", abbrev="AR + ASR"),
    _composite(AR, VOS, display="action recognition and object segmentation", abbrev="AR + VOS"),
)


def check_registry(registry) -> None:
    names = [t.name for t in registry]
    if len(set(names)) != len(names):
        raise RegistryError("duplicate tool names in registry")
    singles = {t.name for t in registry if not t.is_composite}
    for t in registry:
        if t.is_composite:
            missing = [m for m in t.composite_of if m not in singles]
            if missing:
                raise RegistryError(f"composite {t.name} references unknown tools {missing}")


def by_name(registry) -> dict[str, ToolSpec]:
    return {t.name: t for t in registry}


def api_names(registry) -> set[str]:
    """Names that may legally appear as API_name in an action list."""
    out = set()
    for t in registry:
        out.update(t.members)
    return out


def save_registry(registry, path) -> None:
    rows = []
    for t in registry:
        d = asdict(t)
        d["composite_of"] = list(t.composite_of) if t.composite_of else None
        rows.append(d)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=2)
        f.write("\n")


def load_registry(path) -> tuple[ToolSpec, ...]:
    with open(path, encoding="utf-8") as f:
        rows = json.load(f)
    if not isinstance(rows, list):
        raise RegistryError("registry file must hold a JSON list")
    out = []
    for r in rows:
        try:
            comp = r.get("composite_of")
            out.append(ToolSpec(
                name=r["name"],
                display=r.get("display", r["name"]),
                abbrev=r.get("abbrev", ""),
                specialist=r.get("specialist", ""),
                param_schema=dict(r.get("param_schema") or {}),
                composite_of=tuple(comp) if comp else None,
            ))
        except (KeyError, TypeError, AttributeError) as e:
            raise RegistryError(f"bad registry entry {r!r}: {e}") from None
    reg = tuple(out)
    check_registry(reg)
    return reg
