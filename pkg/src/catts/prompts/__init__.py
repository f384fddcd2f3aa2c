"""Versioned prompt assets for the expert roles and their renderer.

Templates are plain text files in this package (``<role>_<version>.txt``)
with ``$name`` placeholders, so prompt iteration never touches code.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from string import Template

from ..errors import UnboundPlaceholder

ROLES = ("planner", "voter", "critic")
DEFAULT_VERSION = "v1"


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    text: str
    version: str = DEFAULT_VERSION


def load_template(role: str, version: str = DEFAULT_VERSION) -> PromptTemplate:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}, expected one of {ROLES}")
    text = (resources.files(__package__) / f"{role}_{version}.txt").read_text("utf-8")
    return PromptTemplate(role=role, text=text, version=version)


def render(template: PromptTemplate | str, variables: dict[str, str]) -> str:
    """Substitute every placeholder; unbound names raise, none may remain."""
    text = template.text if isinstance(template, PromptTemplate) else template
    try:
        return Template(text).substitute(variables)
    except KeyError as exc:
        raise UnboundPlaceholder(f"placeholder {exc.args[0]!r} not bound") from exc
    except ValueError as exc:
        raise UnboundPlaceholder(f"invalid placeholder syntax: {exc}") from exc
