#!/usr/bin/env python3
"""Validate golden API responses against the JSON Schemas in schemas/.

A golden file named <schema-name>.<variant>.json is checked against
schemas/<schema-name>.schema.json. Exits non-zero on the first failure.
"""

import argparse
import json
import sys
from pathlib import Path

import jsonschema
from referencing import Registry, Resource


def load_registry(schema_dir):
    resources = []
    for path in sorted(schema_dir.glob("*.schema.json")):
        doc = json.loads(path.read_text())
        resources.append((doc["$id"], Resource.from_contents(doc)))
    return Registry().with_resources(resources)


def main():
    root = Path(__file__).resolve().parent.parent
    ap = argparse.ArgumentParser()
    ap.add_argument("--schemas", type=Path, default=root / "schemas")
    ap.add_argument("files", nargs="*", type=Path)
    args = ap.parse_args()
    files = args.files or sorted((root / "tests" / "golden").glob("*.json"))
    if not files:
        print("no files to check", file=sys.stderr)
        return 1

    registry = load_registry(args.schemas)
    failures = 0
    for path in files:
        name = path.name.split(".")[0]
        schema_path = args.schemas / f"{name}.schema.json"
        if not schema_path.exists():
            print(f"FAIL {path.name}: no schema {schema_path.name}")
            failures += 1
            continue
        schema = json.loads(schema_path.read_text())
        validator = jsonschema.Draft202012Validator(schema, registry=registry)
        errors = sorted(validator.iter_errors(json.loads(path.read_text())), key=lambda e: list(e.path))
        if errors:
            failures += 1
            for e in errors[:5]:
                print(f"FAIL {path.name}: {'/'.join(map(str, e.path))}: {e.message}")
        else:
            print(f"ok   {path.name}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
