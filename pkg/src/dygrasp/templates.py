"""Prompt template files.

A template is UTF-8 text split into sections by ``[name]`` marker lines::

    [header]
    History of {node_text}, oldest first.
    [interaction]
    [{timestamp}] {role} {counterpart_text}: {edge_text}
    [footer]
    ...
    [roles]
    as_source = visited
    as_destination = was visited by

Recent-reasoning templates use ``header``/``interaction``/``footer``; global
templates use ``body`` (with ``{node_text}``, ``{prev_description}``,
``{segment_interactions}``) and ``interaction``.
"""

from __future__ import annotations

import hashlib
import re
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .dytag import AS_DESTINATION, AS_SOURCE

SECTION_RE = re.compile(r"^\[(header|interaction|footer|body|roles)\]\s*$")
RECENT_FIELDS = {"node_text", "role", "counterpart_text", "edge_text", "timestamp"}
GLOBAL_FIELDS = {"node_text", "prev_description", "segment_interactions"}
EMPTY_EDGE_TEXT = "(no text)"


@dataclass(frozen=True)
class PromptTemplate:
    sections: dict[str, str]
    roles: dict[str, str] = field(default_factory=lambda: {AS_SOURCE: "sent", AS_DESTINATION: "received"})
    source: str = ""

    @classmethod
    def parse(cls, text: str) -> "PromptTemplate":
        sections: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            m = SECTION_RE.match(line)
            if m:
                current = m.group(1)
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
        if "interaction" not in sections:
            raise ValueError("template needs an [interaction] section")
        roles = {AS_SOURCE: "sent", AS_DESTINATION: "received"}
        for line in sections.pop("roles", []):
            if "=" in line:
                k, v = line.split("=", 1)
                roles[k.strip()] = v.strip()
        body = {k: "\n".join(v).strip("\n") for k, v in sections.items()}
        tpl = cls(body, roles, text)
        tpl._validate()
        return tpl

    @classmethod
    def load(cls, path: str | Path) -> "PromptTemplate":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def builtin(cls, name: str) -> "PromptTemplate":
        return cls.parse(resources.files("dygrasp.prompts").joinpath(f"{name}.txt").read_text("utf-8"))

    def _validate(self) -> None:
        allowed = RECENT_FIELDS | GLOBAL_FIELDS
        for name, sec in self.sections.items():
            for _, fld, _, _ in string.Formatter().parse(sec):
                if fld is not None and fld not in allowed:
                    raise ValueError(f"unknown placeholder {{{fld}}} in [{name}]")

    @property
    def is_global(self) -> bool:
        return "body" in self.sections

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.source.encode("utf-8")).hexdigest()[:16]

    def role_text(self, role: str) -> str:
        return self.roles[role]

    def interaction_line(self, node_text: str, role: str, counterpart_text: str, edge_text: str, timestamp: float) -> str:
        return self.sections["interaction"].format(
            node_text=node_text,
            role=self.role_text(role),
            counterpart_text=counterpart_text,
            edge_text=edge_text if edge_text.strip() else EMPTY_EDGE_TEXT,
            timestamp=format_time(timestamp),
        )

    def header(self, node_text: str) -> str:
        return self.sections.get("header", "").format(node_text=node_text)

    def footer(self, node_text: str) -> str:
        return self.sections.get("footer", "").format(node_text=node_text)

    def body(self, node_text: str, prev_description: str, segment_interactions: str) -> str:
        return self.sections["body"].format(
            node_text=node_text, prev_description=prev_description, segment_interactions=segment_interactions
        )


def format_time(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))
