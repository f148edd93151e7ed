"""Convert the compact seed table into the template JSON shipped with the package.

Usage: python scripts/build_seed_templates.py [table] [out.json]
"""

import json
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
DEFAULT_OUT = HERE.parent / "src" / "toolrefusal" / "toolset" / "data" / "templates_d0.json"


def _schema(value_type: str, description: str) -> dict:
    prop = {"type": value_type, "description": description}
    if value_type == "array":
        prop["items"] = {"type": "string"}
    return prop


def parse_line(line: str) -> dict:
    tid, base, derived, name, desc, params, extras = (f.strip() for f in line.split("|"))
    properties = {}
    for chunk in params.split(";;"):
        pname, ptype, pdesc = (s.strip() for s in chunk.split(":", 2))
        properties[pname] = _schema(ptype, pdesc)
    extension = {}
    for chunk in extras.split(";"):
        pname, ptype = (s.strip() for s in chunk.split(":"))
        words = pname.replace("_", " ")
        extension[pname] = _schema(ptype, f"The {words} for the <class> {base} request.")
    return {
        "template_id": tid,
        "base_class": base,
        "derived_class": [d.strip() for d in derived.split(";")],
        "source_benchmark": "synthetic-seed",
        "tool_template": {
            "name": name,
            "description": desc,
            "parameters": {
                "type": "object",
                "properties": properties,
                "required": list(properties),
            },
        },
        "extension_parameters": extension,
    }


def main(argv):
    table = Path(argv[1]) if len(argv) > 1 else HERE / "seed_templates.txt"
    out = Path(argv[2]) if len(argv) > 2 else DEFAULT_OUT
    rows = [
        parse_line(line)
        for line in table.read_text().splitlines()
        if line.strip() and not line.startswith("#")
    ]
    out.write_text(json.dumps(rows, indent=2, ensure_ascii=False) + "\n")
    print(f"wrote {len(rows)} templates to {out}")


if __name__ == "__main__":
    main(sys.argv)
