"""SDR-improvement evaluation grouped like the result tables.

Each ``eval_*`` function scores every item of a dataset and returns an
:class:`EvalReport` whose rows are grouped by the number of classes present
in the mixture. Items whose pre-defined target list is too short are counted
as skipped; items whose reference is silent are counted separately.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import write_wav
from .errors import ZeroReferenceError
from .nets import forward, pit_forward
from .pit import oracle_select_index
from .removal import removal_reference
from .signal import class_vector, mix_reference, si_sdr
from .synth import load_dataset


@dataclass
class ItemScore:
    id: str
    classes_in_mixture: int
    baseline_db: float
    sdri_db: float | None


@dataclass
class EvalReport:
    method: str
    num_selected: int
    scores: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    zero_reference: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def groups(self):
        return sorted({s.classes_in_mixture for s in self.scores})

    def _cell(self, scores):
        base = np.array([s.baseline_db for s in scores])
        sdri = np.array([s.sdri_db for s in scores if s.sdri_db is not None])
        return {
            "count": len(scores),
            "mean_mixture_si_sdr_db": float(base.mean()) if base.size else float("nan"),
            "mean_sdri_db": float(sdri.mean()) if sdri.size else float("nan"),
            "std_sdri_db": float(sdri.std()) if sdri.size else float("nan"),
        }

    @property
    def rows(self):
        out = []
        for g in self.groups:
            cell = self._cell([s for s in self.scores if s.classes_in_mixture == g])
            out.append({"method": self.method, "num_selected": self.num_selected, "classes_in_mixture": g, **cell})
        return out

    @property
    def overall(self):
        return {"method": self.method, "num_selected": self.num_selected, "classes_in_mixture": "mean",
                **self._cell(self.scores)}

    @property
    def mean_sdri(self):
        return self.overall["mean_sdri_db"]

    @property
    def mean_baseline(self):
        return self.overall["mean_mixture_si_sdr_db"]

    def cell(self, classes_in_mixture):
        return self._cell([s for s in self.scores if s.classes_in_mixture == classes_in_mixture])

    def to_csv(self, path=None):
        buf = io.StringIO()
        cols = ["method", "num_selected", "classes_in_mixture", "count", "mean_mixture_si_sdr_db",
                "mean_sdri_db", "std_sdri_db"]
        writer = csv.DictWriter(buf, cols, lineterminator="\n")
        writer.writeheader()
        for row in self.rows + [self.overall]:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
        buf.write(f"# skipped={len(self.skipped)} zero_reference={len(self.zero_reference)}")
        for k, v in sorted(self.metadata.items()):
            buf.write(f" {k}={v}")
        buf.write("\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_markdown(self):
        return format_table([self])


def format_table(reports, value="mean_sdri_db", columns=None):
    """Markdown table with one row per report and one column per mixture class count."""
    columns = columns or sorted({g for r in reports for g in r.groups})
    header = "| Method | # class for Sel. | " + " | ".join(str(c) for c in columns) + " | mean |"
    lines = [header, "|" + "---|" * (len(columns) + 3)]
    for r in reports:
        cells = []
        for c in columns:
            cell = r.cell(c)
            cells.append(f"{cell[value]:.1f}" if cell["count"] else "-")
        lines.append(f"| {r.method} | {r.num_selected} | " + " | ".join(cells) + f" | {r.overall[value]:.1f} |")
    return "\n".join(lines) + "\n"


def _items(data):
    if isinstance(data, (str, Path)):
        return load_dataset(data)
    return list(data)


def _score(report, item, reference, estimate):
    n_classes = len(item.active_classes)
    try:
        baseline = si_sdr(reference, item.mixture)
    except ZeroReferenceError:
        report.zero_reference.append(item.id)
        return
    sdri = None if estimate is None else si_sdr(reference, estimate) - baseline
    report.scores.append(ItemScore(item.id, n_classes, baseline, sdri))


def eval_selection(data, model, num_selected=1, mode="simultaneous"):
    """Selector SDRi with the first ``num_selected`` pre-defined targets of each item.

    ``simultaneous`` runs one pass with the n-hot vector; ``iterative`` runs
    one pass per class and sums. Both are scored against the same reference.
    """
    if mode not in ("simultaneous", "iterative"):
        raise ValueError(f"mode must be 'simultaneous' or 'iterative', got {mode!r}")
    report = EvalReport(f"{mode}", num_selected)
    for item in _items(data):
        targets = item.target_classes[:num_selected]
        if len(targets) < num_selected:
            report.skipped.append(item.id)
            continue
        n = item.stems.shape[0]
        o = class_vector(targets, n)
        reference = mix_reference(item.stems, o)
        if mode == "simultaneous":
            estimate = forward(item.mixture, o, model)
        else:
            estimate = sum(forward(item.mixture, class_vector([t], n), model) for t in targets)
        _score(report, item, reference, estimate)
    return report


def eval_pit_oracle(data, model, num_selected=1):
    """PIT separator with oracle output selection for the first target class of each item."""
    report = EvalReport("PIT + OS", num_selected)
    k = model.config.output_channels
    for item in _items(data):
        targets = item.target_classes[:num_selected]
        if len(targets) < num_selected or len(item.active_classes) > k:
            report.skipped.append(item.id)
            continue
        reference = mix_reference(item.stems, class_vector(targets, item.stems.shape[0]))
        if not np.any(reference):
            report.zero_reference.append(item.id)
            continue
        outputs = pit_forward(item.mixture, model)
        _score(report, item, reference, outputs[oracle_select_index(outputs, reference)])
    return report


def eval_mixture_baseline(data, num_selected=1):
    """SI-SDR of the unprocessed mixture against the selection reference."""
    report = EvalReport("mixture", num_selected)
    for item in _items(data):
        targets = item.target_classes[:num_selected]
        if len(targets) < num_selected:
            report.skipped.append(item.id)
            continue
        reference = mix_reference(item.stems, class_vector(targets, item.stems.shape[0]))
        _score(report, item, reference, None)
    return report


def eval_removal(data, model, num_selected=1, scheme="indirect"):
    """Removal SDRi against ``mixture - selected stems``.

    ``indirect`` subtracts a selector estimate; ``direct`` runs a network
    trained on removal references.
    """
    report = EvalReport(f"removal ({scheme})", num_selected)
    for item in _items(data):
        targets = item.target_classes[:num_selected]
        if len(targets) < num_selected:
            report.skipped.append(item.id)
            continue
        o = class_vector(targets, item.stems.shape[0])
        reference = removal_reference(item.mixture, item.stems, o)
        out = forward(item.mixture, o, model)
        estimate = item.mixture - out if scheme == "indirect" else out
        _score(report, item, reference, estimate)
    return report


def eval_generalization(data, model, target_classes, dump_dir=None, mode="simultaneous"):
    """Fixed target list for every item; optionally dump mixture/reference/estimate WAVs.

    Items that do not contain all requested classes are skipped.
    """
    target_classes = [int(c) for c in target_classes]
    report = EvalReport(f"generalization ({mode})", len(target_classes))
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
    for item in _items(data):
        if not set(target_classes) <= set(item.active_classes):
            report.skipped.append(item.id)
            continue
        n = item.stems.shape[0]
        o = class_vector(target_classes, n)
        reference = mix_reference(item.stems, o)
        if mode == "simultaneous":
            estimate = forward(item.mixture, o, model)
        else:
            estimate = sum(forward(item.mixture, class_vector([t], n), model) for t in target_classes)
        _score(report, item, reference, estimate)
        if dump_dir is not None:
            for name, x in (("mixture", item.mixture), ("ref", reference), ("est", estimate)):
                write_wav(dump_dir / f"{item.id}.{name}.wav", x, item.sample_rate)
    return report


def dev_sdri(model, kind, items):
    """Mean single-class SDRi used for best-checkpoint selection during training."""
    if kind == "pit":
        return eval_pit_oracle(items, model).mean_sdri
    if kind == "removal-direct":
        return eval_removal(items, model, scheme="direct").mean_sdri
    return eval_selection(items, model, 1).mean_sdri
