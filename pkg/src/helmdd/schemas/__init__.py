"""JSON schemas for every emitted artifact, plus a validation helper."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

SCHEMAS = ("solve_report", "run_summary", "scaling_record", "field_header", "weight_table")


@lru_cache(maxsize=None)
def load(name: str) -> dict:
    if name not in SCHEMAS:
        raise KeyError(f"no schema named {name!r}")
    return json.loads(resources.files(__package__).joinpath(f"{name}.json").read_text())


def validate(instance, name: str) -> None:
    """Raise ``jsonschema.ValidationError`` if ``instance`` does not match schema ``name``."""
    jsonschema.validate(instance, load(name))
