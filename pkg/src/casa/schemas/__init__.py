"""JSON Schemas for the reports written by the command-line tool."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

NAMES = ("common", "analyze", "cluster", "transfer", "ablate", "error")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    return json.loads(resources.files(__name__).joinpath(f"{name}.json").read_text())


@lru_cache(maxsize=None)
def _registry() -> Registry:
    return Registry().with_resources(
        (load_schema(n)["$id"], Resource.from_contents(load_schema(n))) for n in NAMES
    )


def validator(name: str) -> Draft202012Validator:
    return Draft202012Validator(load_schema(name), registry=_registry())


def validate(report: dict, name: str | None = None) -> None:
    """Raise ``jsonschema.ValidationError`` unless ``report`` matches its schema."""
    validator(name or report.get("command", "error")).validate(report)
