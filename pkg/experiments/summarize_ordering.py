"""Collect per-run val reports into one ordering summary JSON."""

from __future__ import annotations

import json
import sys
from pathlib import Path


def main(out_dir: str) -> None:
    out = Path(out_dir)
    rows: dict[str, dict] = {}
    for path in sorted(out.glob("val_*.json")):
        report = json.loads(path.read_text())
        rows[report["report_id"]] = report["aggregates"]

    def mean(cell: str) -> float | None:
        vals = [rows[f"{cell}_s{s}"]["sr"] for s in (1, 2, 3)
                if f"{cell}_s{s}" in rows]
        return sum(vals) / len(vals) if vals else None

    summary = {
        "runs": rows,
        "means": {
            "channelcat_true": mean("channelcat_true"),
            "late_true": mean("late_true"),
            "channelcat_false": mean("channelcat_false"),
        },
    }
    (out / "ordering_summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary["means"], indent=2))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "results/ordering")
