#!/usr/bin/env python3
"""Validate run.json, job.json and events.jsonl files under the given directories."""
import json
import pathlib
import sys

import jsonschema
from referencing import Registry, Resource

SCHEMAS = pathlib.Path(__file__).resolve().parent / "schemas"


def load_schemas():
    schemas = {p.name: json.loads(p.read_text()) for p in SCHEMAS.glob("*.schema.json")}
    registry = Registry().with_resources(
        (s["$id"], Resource.from_contents(s)) for s in schemas.values())
    validators = {}
    for name, schema in schemas.items():
        cls = jsonschema.validators.validator_for(schema)
        cls.check_schema(schema)
        validators[name] = cls(schema, registry=registry)
    return validators


def main(argv):
    if len(argv) < 2:
        print("usage: validate_schemas.py DIR...", file=sys.stderr)
        return 2
    v = load_schemas()
    counts = {"run.json": 0, "job.json": 0, "events": 0}
    errors = []

    def check(validator, doc, where):
        for err in validator.iter_errors(doc):
            errors.append(f"{where}: {'/'.join(map(str, err.absolute_path))}: {err.message}")

    for root in map(pathlib.Path, argv[1:]):
        for p in sorted(root.rglob("run.json")):
            check(v["run.schema.json"], json.loads(p.read_text()), p)
            counts["run.json"] += 1
        for p in sorted(root.rglob("job.json")):
            check(v["job_record.schema.json"], json.loads(p.read_text()), p)
            counts["job.json"] += 1
        for p in sorted(root.rglob("events.jsonl")):
            seq = 0
            for n, line in enumerate(p.read_text().splitlines(), 1):
                event = json.loads(line)
                check(v["run_event.schema.json"], event, f"{p}:{n}")
                seq += 1
                if event.get("seq") != seq:
                    errors.append(f"{p}:{n}: seq {event.get('seq')} where {seq} was expected")
                counts["events"] += 1

    for e in errors[:50]:
        print(e)
    print(f"validated {counts['run.json']} run.json, {counts['job.json']} job.json, "
          f"{counts['events']} events; {len(errors)} errors")
    if not counts["run.json"] or not counts["job.json"] or not counts["events"]:
        print("nothing of some kind was validated")
        return 1
    return 1 if errors else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
