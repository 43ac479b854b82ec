"""Coefficient tables: assembly from an analysis, CSV I/O and rendering.

Each table holds one model piece at one time point with the columns
Variable, Estimate, SE, Standardized Estimate, 95% CI, James-Stein Estimate
and 95% CI (James-Stein).  Both intervals are bootstrap percentile
intervals on the standardized scale.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .data import AGES
from .errors import MissingArtifact
from .inference import Analysis, BootstrapResult, significance_flags

COLUMNS = (
    "Variable",
    "Estimate",
    "SE",
    "Standardized Estimate",
    "95% CI",
    "James-Stein Estimate",
    "95% CI (James-Stein)",
)
CSV_FIELDS = ("variable", "estimate", "se", "standardized", "ci_lower", "ci_upper", "js", "js_lower", "js_upper")
MISSING = "NA"


@dataclass(frozen=True)
class TableRow:
    variable: str
    estimate: float
    se: float
    standardized: float
    ci: tuple[float, float]
    js: float
    js_ci: tuple[float, float]

    @property
    def flag(self) -> str:
        return _flag(self.ci)

    @property
    def js_flag(self) -> str:
        return _flag(self.js_ci)


def _flag(ci) -> str:
    if not all(math.isfinite(v) for v in ci):
        return ""
    return significance_flags([ci])[0]


@dataclass(frozen=True)
class CoefficientTable:
    """One piece of one model at one time point.

    ``rho`` is shown in the caption for exchangeable and AR(1) fits,
    ``gamma`` for combined fits.
    """

    name: str
    piece: str
    time: int
    rows: tuple[TableRow, ...]
    rho: float | None = None
    gamma: float | None = None

    @property
    def stem(self) -> str:
        return f"{self.name}.{self.piece}"

    def caption(self, latex: bool = False) -> str:
        parts = [f"Model {self.name} (age {AGES.get(self.time, self.time)})"]
        if self.gamma is not None:
            g = _num(self.gamma, 2)
            parts.append(f"$\\hat{{\\gamma}}_{self.time}={g}$" if latex else f"γ̂_{self.time}={g}")
        if self.rho is not None:
            r = _num(self.rho, 4)
            parts.append(f"$\\hat{{\\rho}}={r}$" if latex else f"ρ̂={r}")
        return ", ".join(parts)

    def meta(self) -> dict:
        return {"name": self.name, "piece": self.piece, "time": self.time, "rho": self.rho, "gamma": self.gamma}

    # --- CSV ---------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.variable, *(_csv_num(v) for v in (r.estimate, r.se, r.standardized, *r.ci, r.js, *r.js_ci))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict) -> "CoefficientTable":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
            raise MissingArtifact(f"coefficient CSV must have columns {CSV_FIELDS}")
        rows = []
        for rec in reader:
            v = {k: _parse(rec[k]) for k in CSV_FIELDS[1:]}
            rows.append(TableRow(rec["variable"], v["estimate"], v["se"], v["standardized"],
                                 (v["ci_lower"], v["ci_upper"]), v["js"], (v["js_lower"], v["js_upper"])))
        return cls(meta["name"], meta["piece"], int(meta["time"]), tuple(rows), meta.get("rho"), meta.get("gamma"))

    # --- rendering ---------------------------------------------------------

    def to_markdown(self) -> str:
        lines = [f"**{self.caption()}**", ""]
        lines.append("| " + " | ".join(COLUMNS) + " |")
        lines.append("|:---|" + "---:|" * (len(COLUMNS) - 1))
        for r in self.rows:
            cells = [
                r.variable,
                _num(r.estimate, 3),
                _num(r.se, 3),
                _num(r.standardized, 2),
                _ci(r.ci) + _sup(r.flag),
                _num(r.js, 3),
                _ci(r.js_ci) + _sup(r.js_flag),
            ]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def to_latex(self) -> str:
        head = (
            "Variable & Estimate & SE & \\makecell{Standardized\\\\Estimate} & 95\\% CI & "
            "\\makecell{James-Stein\\\\Estimate} & \\makecell{95\\% CI\\\\(James-Stein)} \\\\"
        )
        out = [
            "\\begin{subtable}{\\linewidth}",
            f"\\caption{{{self.caption(latex=True)}}}",
            "\\scalebox{0.70}{",
            "\\begin{tabular}{rlcccccl}",
            head,
            "  \\hline",
        ]
        for i, r in enumerate(self.rows):
            cells = [
                r.variable.replace("_", "\\_"),
                _num(r.estimate, 3, 6),
                _num(r.se, 3),
                _num(r.standardized, 2),
                _ci(r.ci, 7) + _tex_sup(r.flag),
                _num(r.js, 3, 7),
                _ci(r.js_ci, 7) + _tex_sup(r.js_flag),
            ]
            out.append(("" if i == 0 else "  ") + " & ".join(cells) + " \\\\ ")
        out += ["   \\hline", "\\end{tabular}", "}", "\\end{subtable}"]
        return "\n".join(out) + "\n"


def _num(v, digits: int, width: int = 0) -> str:
    if v is None or not math.isfinite(v):
        return MISSING.rjust(width)
    s = f"{v:.{digits}f}"
    if float(s) == 0.0:
        s = s.lstrip("-")
    return s.rjust(width)


def _ci(ci, width: int = 0) -> str:
    lo, hi = ci
    sep = ", " if width == 0 else ","
    return f"({_num(lo, 3, width)}{sep}{_num(hi, 3, width + 1 if width else 0)})"


def _sup(flag: str) -> str:
    return f"<sup>{flag}</sup>" if flag else ""


def _tex_sup(flag: str) -> str:
    return f"$^{{{flag.replace('−', '-')}}}$" if flag else ""


def _csv_num(v) -> str:
    return "" if v is None or not math.isfinite(v) else repr(float(v))


def _parse(s: str) -> float:
    return float(s) if s not in ("", MISSING) else float("nan")


def render_markdown(tables) -> str:
    return "\n".join(t.to_markdown() for t in tables)


def render_latex(tables) -> str:
    return "\n".join(t.to_latex() for t in tables)


# --- assembly ----------------------------------------------------------------


def _caption_rho(fit) -> float | None:
    if fit is None or fit.structure.kind not in ("exchangeable", "ar1"):
        return None
    return float(fit.structure.rho)


def build_tables(analysis: Analysis, boot: BootstrapResult | None = None) -> list[CoefficientTable]:
    """Tables for every (time, piece) of an analysis, in time then piece order.

    Without a bootstrap the interval columns are missing and unflagged.
    """
    spec = analysis.spec
    names = analysis.design_names
    tables = []
    for ti, t in enumerate(spec.times):
        f = analysis.fits[t]
        for piece in spec.pieces:
            est = analysis.estimate[piece][ti]
            se = analysis.se[piece][ti]
            z = analysis.standardized[piece][ti]
            js = analysis.js[piece][ti]
            nan2 = np.full((len(names), 2), np.nan)
            ci = boot.interval("standardized", piece)[ti] if boot is not None else nan2
            jci = boot.interval("js", piece)[ti] if boot is not None else nan2
            rows = tuple(
                TableRow(n, float(est[g]), float(se[g]), float(z[g]), (float(ci[g, 0]), float(ci[g, 1])),
                         float(js[g]), (float(jci[g, 0]), float(jci[g, 1])))
                for g, n in enumerate(names)
            )
            sep_fit = f.presence if piece == "presence" else f.severity
            tables.append(CoefficientTable(spec.name(t), piece, t, rows, _caption_rho(sep_fit), f.gamma))
    return tables

