"""JSON schemas for every machine-readable input and output."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema
from referencing import Registry, Resource

NAMES = ("metrics_record", "run_manifest", "dataset_manifest", "phantom_spec", "train_config", "eval_report")


@lru_cache(maxsize=None)
def load(name: str) -> dict:
    if name not in NAMES:
        raise KeyError(f"unknown schema {name!r}; known: {NAMES}")
    return json.loads(resources.files(__name__).joinpath(f"{name}.schema.json").read_text())


@lru_cache(maxsize=None)
def _registry() -> Registry:
    return Registry().with_resources(
        (f"{n}.schema.json", Resource.from_contents(load(n))) for n in NAMES)


def validate(name: str, doc) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match schema ``name``."""
    jsonschema.Draft202012Validator(load(name), registry=_registry()).validate(doc)
