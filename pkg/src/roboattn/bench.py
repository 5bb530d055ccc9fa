"""Robustness benchmarking: degradation, mCD and Relative mCD, paired map
evaluation and deviation-threshold splits for central-bias studies."""

from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from roboattn.corruptions import KINDS
from roboattn.errors import DegenerateReference, InvalidInput, IoError
from roboattn.maps import _as_grid, kl_divergence, mean_map, pearson_cc, resize_map

METRICS = ("kld", "cc")
CENTRAL_BIAS_DELTAS = (2.0, 2.5, 3.0, 3.5, 4.0)

# Display names for report columns.
KIND_LABELS = {
    "gaussian": "Gaussian",
    "impulse": "Impulse",
    "motion_blur": "Motion",
    "jpeg": "JPEG",
    "fog": "Fog",
    "snow": "Snow",
}


def degradation(value: float, metric: str) -> float:
    """Error measure: KLD itself, or 1 - CC."""
    if metric == "kld":
        return float(value)
    if metric == "cc":
        return 1.0 - float(value)
    raise InvalidInput(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class DegradationVector:
    metric: str
    clean: float
    by_kind: Mapping[str, float]

    @classmethod
    def from_scores(cls, clean: float, by_kind: Mapping[str, float], metric: str):
        return cls(
            metric,
            degradation(clean, metric),
            {k: degradation(v, metric) for k, v in by_kind.items()},
        )


def _aligned(model: DegradationVector, ref: DegradationVector):
    if model.metric != ref.metric:
        raise InvalidInput(f"metric mismatch: {model.metric} vs {ref.metric}")
    if set(model.by_kind) != set(ref.by_kind):
        raise InvalidInput("model and reference cover different corruption kinds")
    kinds = sorted(model.by_kind)
    return (
        np.array([model.by_kind[k] for k in kinds]),
        np.array([ref.by_kind[k] for k in kinds]),
    )


def mcd(model: DegradationVector, ref: DegradationVector) -> float:
    """Summed corruption degradation relative to a reference model."""
    m, r = _aligned(model, ref)
    if r.sum() == 0:
        raise DegenerateReference("reference degradations sum to zero")
    return float(m.sum() / r.sum())


def relative_mcd(model: DegradationVector, ref: DegradationVector) -> float:
    """Summed corruption-minus-clean gap relative to the reference gap."""
    m, r = _aligned(model, ref)
    gap_ref = float(np.sum(r - ref.clean))
    if gap_ref == 0:
        raise DegenerateReference("reference has no clean-to-corrupted gap")
    return float(np.sum(m - model.clean) / gap_ref)


def evaluate_pairs(preds: Sequence, gts: Sequence, resize: bool = True):
    """Mean KL(gt || pred) and mean CC over aligned pairs.

    Predictions are resized to the ground-truth grid when shapes differ.
    """
    if len(preds) != len(gts):
        raise InvalidInput(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise InvalidInput("no pairs to evaluate")
    klds, ccs = [], []
    for p, g in zip(preds, gts):
        p, g = _as_grid(p), _as_grid(g)
        if resize and p.shape != g.shape:
            p = resize_map(p, g.shape[1], g.shape[0])
        klds.append(kl_divergence(g, p))
        ccs.append(pearson_cc(p, g))
    return float(np.mean(klds)), float(np.mean(ccs))


def central_bias_split(maps: Sequence, s_avg, delta: float):
    """Split indices by KL(map || s_avg) > delta; returns (selected, rest)."""
    if not delta > 0:
        raise InvalidInput("delta must be positive")
    selected, rest = [], []
    for i, m in enumerate(maps):
        (selected if kl_divergence(m, s_avg) > delta else rest).append(i)
    return selected, rest


def central_bias_splits(maps: Sequence, s_avg=None, deltas=CENTRAL_BIAS_DELTAS) -> dict:
    """Selected indices for each threshold; ``s_avg`` defaults to the mean map."""
    s_avg = mean_map(maps) if s_avg is None else s_avg
    kl = [kl_divergence(m, s_avg) for m in maps]
    return {float(d): [i for i, v in enumerate(kl) if v > d] for d in deltas}


@dataclass
class BenchmarkTable:
    """Per-model clean and per-corruption scores for one dataset.

    ``models[name]["clean"|kind] = {"kld": float, "cc": float}``.
    """

    dataset: str = ""
    reference: str = "ML-Net"
    models: dict = field(default_factory=dict)
    provenance: str = ""

    def validate(self) -> "BenchmarkTable":
        for name, rows in self.models.items():
            if "clean" not in rows:
                raise InvalidInput(f"{name}: missing clean scores")
            for key, scores in rows.items():
                if key != "clean" and key not in KINDS:
                    raise InvalidInput(f"{name}: unknown corruption kind {key!r}")
                if scores["kld"] < 0:
                    raise InvalidInput(f"{name}/{key}: negative KLD")
                if not -1 <= scores["cc"] <= 1:
                    raise InvalidInput(f"{name}/{key}: CC outside [-1, 1]")
        return self

    def kinds(self, name: str) -> list:
        return [k for k in KINDS if k in self.models[name]]

    def vector(self, name: str, metric: str) -> DegradationVector:
        rows = self.models[name]
        return DegradationVector.from_scores(
            rows["clean"][metric], {k: rows[k][metric] for k in self.kinds(name)}, metric
        )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "reference": self.reference,
            "provenance": self.provenance,
            "models": self.models,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkTable":
        return cls(
            d.get("dataset", ""),
            d.get("reference", "ML-Net"),
            {m: {k: dict(v) for k, v in rows.items()} for m, rows in d["models"].items()},
            d.get("provenance", ""),
        ).validate()


def summarize(table: BenchmarkTable, reference=None) -> dict:
    """mCD and Relative mCD for every model against the reference."""
    ref_name = reference or table.reference
    if table.models and ref_name not in table.models:
        raise InvalidInput(f"reference model {ref_name!r} not in table")
    out = {}
    for name in table.models:
        entry = {}
        for metric in METRICS:
            vec = table.vector(name, metric)
            ref = table.vector(ref_name, metric)
            entry[f"mcd_{metric}"] = mcd(vec, ref)
            entry[f"relative_mcd_{metric}"] = relative_mcd(vec, ref)
        out[name] = entry
    return out


def _csv_text(table: BenchmarkTable, summary: dict) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["model", "clean_kld", "clean_cc"]
    for k in KINDS:
        header += [f"{k}_kld", f"{k}_cc"]
    header += ["mcd_kld", "mcd_cc", "relative_mcd_kld", "relative_mcd_cc"]
    writer.writerow(header)
    for name, rows in table.models.items():
        line = [name, rows["clean"]["kld"], rows["clean"]["cc"]]
        for k in KINDS:
            line += [rows.get(k, {}).get("kld", ""), rows.get(k, {}).get("cc", "")]
        s = summary[name]
        line += [s["mcd_kld"], s["mcd_cc"], s["relative_mcd_kld"], s["relative_mcd_cc"]]
        writer.writerow(line)
    return buf.getvalue()


def _text_summary(table: BenchmarkTable, summary: dict) -> str:
    cols = ["Clean"] + [KIND_LABELS[k] for k in KINDS] + ["mCD", "Relative mCD"]
    lines = [
        f"# {table.dataset or 'benchmark'} (reference: {table.reference})",
        "# metrics averaged per image, then per corruption kind",
        "Method".ljust(18) + "".join(c.center(16) for c in cols),
        " " * 18 + "    KLD     CC  " * len(cols),
    ]
    for name, rows in table.models.items():
        cells = []
        for key in ("clean",) + KINDS:
            r = rows.get(key)
            cells.append(
                f"  {r['kld']:6.3f} {r['cc']:6.3f}  " if r else "     -      -  "
            )
        s = summary[name]
        cells.append(f"  {s['mcd_kld']:6.3f} {s['mcd_cc']:6.3f}  ")
        cells.append(f"  {s['relative_mcd_kld']:6.3f} {s['relative_mcd_cc']:6.3f}  ")
        lines.append(name.ljust(18) + "".join(cells))
    return "\n".join(lines) + "\n"


def render_report(tables: Sequence[BenchmarkTable], out_dir, stem: str = "report") -> dict:
    """Write ``<stem>.json``, ``<stem>.csv`` and ``<stem>.txt`` under
    ``out_dir`` and return the JSON document."""
    from roboattn.io import _atomic_write, write_json

    out_dir = Path(out_dir)
    doc = {"averaging": "per-image then per-kind", "tables": []}
    csv_parts, txt_parts = [], []
    for t in tables:
        summary = summarize(t)
        doc["tables"].append({**t.to_dict(), "summary": summary})
        csv_parts.append(_csv_text(t, summary))
        txt_parts.append(_text_summary(t, summary))
    try:
        write_json(doc, out_dir / f"{stem}.json")
        _atomic_write(out_dir / f"{stem}.csv", "".join(csv_parts).encode())
        _atomic_write(out_dir / f"{stem}.txt", "\n".join(txt_parts).encode())
    except OSError as exc:
        if isinstance(exc, IoError):
            raise
        raise IoError(f"{out_dir}: {exc}") from exc
    return doc


def load_table(path) -> BenchmarkTable:
    from roboattn.io import read_json

    return BenchmarkTable.from_dict(read_json(path))


def bundled_bdda_c() -> BenchmarkTable:
    """The BDD-A-C rows (ML-Net, UAP, RUAP) shipped with the package."""
    from importlib import resources

    text = resources.files("roboattn.data").joinpath("bdda_c.json").read_text()
    return BenchmarkTable.from_dict(json.loads(text))
