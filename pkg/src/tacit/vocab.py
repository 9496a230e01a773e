"""Platform capability vocabulary and verb signatures.

Coordination logic names capabilities and verbs abstractly; this module is
the shared contract that maps them onto the flat capability names devices
publish and the named arguments device interfaces expect. Statement
arguments are positional in the language, so each verb's wire parameter
names come from VERB_PARAMS (unlisted verbs fall back to arg0, arg1, ...).
"""

from __future__ import annotations

DEFAULT_VOCABULARY = frozenset(
    {
        "visual.display",
        "audio.speaker",
        "sensor.camera",
        "util.echo",
        "infra.gateway",
    }
)

DEFAULT_TABLE_FUNCTIONS = frozenset({"route", "expected_direction", "alert_text"})

VERB_PARAMS: dict[str, tuple[str, ...]] = {
    "show": ("text",),
    "announce": ("text",),
    "monitor": ("target",),
    "echo": ("text",),
    "ping": (),
}


def arg_names(verb: str, count: int) -> tuple[str, ...]:
    """Wire parameter names for a verb's positional arguments."""
    declared = VERB_PARAMS.get(verb, ())
    names = list(declared[:count])
    for i in range(len(names), count):
        names.append(f"arg{i}")
    return tuple(names)
