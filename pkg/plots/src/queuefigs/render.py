"""Render the four standard figure kinds from hwqueue report directories.

Every figure is a pure function of the report files: fixed size, fixed axes
policy (KS curves on log-y over log-x system sizes), no timestamps, so the
same report renders to the same image.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SCHEMA_VERSION = 1
KINDS = ("cdf_overlay", "ks_trend", "lemma1_trend", "policy_bars")

FIGSIZE = (6.4, 4.2)
DPI = 120


class SchemaError(ValueError):
    """Report file does not match the expected schema."""


@dataclass(frozen=True)
class FigureSpec:
    report: str            # path to a summary.json written by the hwqueue CLI
    kind: str              # one of KINDS
    out: str               # output image path (.png or .svg)
    n: int | None = None   # ladder entry for cdf_overlay; default largest


def _load_summary(path: str, want_kind: str) -> dict:
    if not os.path.exists(path):
        raise SchemaError(f"report {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"report {path} is not valid JSON: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(
            f"report schema_version {doc.get('schema_version')!r} != {SCHEMA_VERSION}")
    if doc.get("kind") != want_kind:
        raise SchemaError(f"report kind {doc.get('kind')!r}, need {want_kind!r}")
    return doc


def _need(doc: dict, key: str) -> object:
    if key not in doc:
        raise SchemaError(f"report is missing column {key!r}")
    return doc[key]


def _csv_column(path: str, column: str) -> np.ndarray:
    if not os.path.exists(path):
        raise SchemaError(f"expected data file {path} is missing")
    with open(path, "r", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise SchemaError(f"{path} is empty")
    header = rows[0]
    if column not in header:
        raise SchemaError(f"{path} is missing column {column!r}")
    j = header.index(column)
    vals = [float(r[j]) for r in rows[1:]]
    if not vals:
        raise SchemaError(f"{path} has no data rows")
    return np.array(vals)


def _ecdf(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.sort(values)
    y = np.arange(1, len(x) + 1) / len(x)
    return x, y


def _save(fig, out: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    meta = {"Date": None} if out.endswith(".svg") else None
    fig.savefig(out, dpi=DPI, metadata=meta)
    plt.close(fig)
    return out


def _cdf_overlay(spec: FigureSpec) -> str:
    doc = _load_summary(spec.report, "converge")
    per_n = _need(doc, "per_n")
    if not per_n:
        raise SchemaError("per_n is empty")
    ns = [row["n"] for row in per_n]
    n = spec.n if spec.n is not None else max(ns)
    if n not in ns:
        raise SchemaError(f"n={n} not in report ladder {ns}")
    base = os.path.dirname(os.path.abspath(spec.report))
    sim = _csv_column(os.path.join(base, str(n), "samples.csv"), "xhat")
    sde = _csv_column(os.path.join(base, "sde_samples.csv"), "xi")
    ks = next(row["ks"] for row in per_n if row["n"] == n)

    fig, ax = plt.subplots(figsize=FIGSIZE)
    xs, ys = _ecdf(sim)
    ax.step(xs, ys, where="post", label=f"simulated, n={n} ({len(sim)} reps)")
    xs, ys = _ecdf(sde)
    ax.step(xs, ys, where="post", label=f"limit dynamics ({len(sde)} paths)",
            linestyle="--")
    ax.annotate(f"KS = {ks:.4f}", xy=(0.04, 0.92), xycoords="axes fraction")
    ax.set_xlabel("scaled head count at the probe time")
    ax.set_ylabel("empirical CDF")
    ax.set_title(f"{doc.get('scenario', '')}: marginal vs limit at n={n}")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    return _save(fig, spec.out)


def _ks_trend(spec: FigureSpec) -> str:
    doc = _load_summary(spec.report, "converge")
    per_n = _need(doc, "per_n")
    if not per_n:
        raise SchemaError("per_n is empty")
    ns = [row["n"] for row in per_n]
    ks = [_need(row, "ks") for row in per_n]

    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(ns, ks, marker="o")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("number of servers n")
    ax.set_ylabel("KS distance to the limit marginal")
    ax.set_title(f"{doc.get('scenario', '')}: convergence trend")
    ax.grid(alpha=0.3, which="both")
    return _save(fig, spec.out)


def _lemma1_trend(spec: FigureSpec) -> str:
    doc = _load_summary(spec.report, "lemmas")
    rows = _need(doc, "lemma1_per_n")
    if not rows:
        raise SchemaError("lemma1_per_n is empty")
    ns = [_need(r, "n") for r in rows]
    med = [_need(r, "median") for r in rows]

    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(ns, med, marker="s")
    ax.set_xscale("log")
    ax.set_xlabel("number of servers n")
    ax.set_ylabel("median sup of the scaled fast-class idle count")
    ax.set_title(f"{doc.get('scenario', '')}: fast-server idle metric")
    ax.grid(alpha=0.3, which="both")
    return _save(fig, spec.out)


def _policy_bars(spec: FigureSpec) -> str:
    doc = _load_summary(spec.report, "compare")
    rows = _need(doc, "per_policy")
    if not rows:
        raise SchemaError("per_policy is empty")
    names = [_need(r, "policy") for r in rows]
    means = [_need(r, "mean_xhat") for r in rows]
    cis = [_need(r, "ci_xhat") for r in rows]

    fig, ax = plt.subplots(figsize=FIGSIZE)
    xs = np.arange(len(names))
    ax.bar(xs, means, yerr=cis, capsize=4)
    ax.set_xticks(xs, names)
    ax.axhline(0.0, linewidth=0.8)
    ax.set_ylabel(f"mean scaled head count at t={doc.get('t_probe')}")
    ax.set_title(f"{doc.get('scenario', '')}: policies at n={doc.get('n')} (95% CI)")
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, spec.out)


_RENDERERS = {
    "cdf_overlay": _cdf_overlay,
    "ks_trend": _ks_trend,
    "lemma1_trend": _lemma1_trend,
    "policy_bars": _policy_bars,
}


def render(spec: FigureSpec) -> str:
    """Render one figure; returns the output path."""
    if spec.kind not in _RENDERERS:
        raise SchemaError(f"unknown figure kind {spec.kind!r}; choose from {KINDS}")
    return _RENDERERS[spec.kind](spec)
