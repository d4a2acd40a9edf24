"""Run reports: a human-readable table file plus machine-readable JSON lines.

Every record in ``report.jsonl`` has a ``table`` and a ``row`` field plus
metric values; confusion matrices are stored row-major (rows = true class).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


@dataclass
class EvalReport:
    tables: dict[str, list[dict]] = field(default_factory=dict)

    def add(self, table: str, row: str, **values) -> None:
        self.tables.setdefault(table, []).append({"row": row, **values})

    def records(self) -> list[dict]:
        return [{"table": t, **r} for t, rows in self.tables.items() for r in rows]

    def render(self) -> str:
        out = []
        for table, rows in self.tables.items():
            out.append(f"== {table} ==")
            cols = []
            for r in rows:
                cols += [k for k in r if k != "row" and k not in cols and not isinstance(r[k], (list, dict))]
            widths = [max(len("row"), *(len(r["row"]) for r in rows))]
            widths += [max(len(c), *(len(_fmt(r.get(c, ""))) for r in rows)) for c in cols]
            header = ["row"] + cols
            out.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
            for r in rows:
                cells = [r["row"]] + [_fmt(r.get(c, "")) for c in cols]
                out.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
                for k, v in r.items():
                    if k == "confusion_matrix":
                        out.append("  confusion (rows true N/P/A, cols predicted):")
                        out += ["    " + " ".join(f"{x:5d}" for x in line) for line in v]
            out.append("")
        return "\n".join(out)

    def write(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        txt, jl = d / "report.txt", d / "report.jsonl"
        txt.write_text(self.render())
        with open(jl, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return txt, jl

    @classmethod
    def read(cls, directory) -> "EvalReport":
        rep = cls()
        for line in (Path(directory) / "report.jsonl").read_text().splitlines():
            rec = json.loads(line)
            table = rec.pop("table")
            rep.tables.setdefault(table, []).append(rec)
        return rep
