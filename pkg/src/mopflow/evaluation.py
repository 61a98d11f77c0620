"""Intersection-over-union scoring and the DAVIS comparison report."""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import atomic_output

# Mean IoU (percent) on DAVIS reported for the reference methods and the
# original two-network pipeline.
BASELINES = {
    "PCM": 40.1,
    "CVOS": 48.2,
    "KEY": 49.8,
    "NLC": 55.1,
    "FST": 55.8,
    "PaperOurs": 41.9,
}


def iou(a, b):
    """|A & B| / |A | B|; two empty masks score 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def evaluate_sequence(pred, gt):
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted frames vs {len(gt)} ground-truth frames")
    if not pred:
        raise ValueError("no frames to score")
    return float(np.mean([iou(p, g) for p, g in zip(pred, gt)]))


def _mean(values):
    return float(sum(values) / len(values))


@dataclass
class EvalReport:
    per_sequence: dict
    mean_iou: float
    baselines: dict = field(default_factory=lambda: dict(BASELINES))

    def table(self):
        """Plain-text comparison in the layout of the DAVIS results table (percent)."""
        names = list(self.baselines) + ["Ours"]
        values = [self.baselines[k] for k in self.baselines] + [100.0 * self.mean_iou]
        cells = [f"{v:.1f}" for v in values]
        widths = [max(len(n), len(c)) for n, c in zip(names, cells)]
        head = "| Measure  | " + " | ".join(n.rjust(w) for n, w in zip(names, widths)) + " |"
        row = "| Mean IOU | " + " | ".join(c.rjust(w) for c, w in zip(cells, widths)) + " |"
        rule = "-" * len(head)
        return "\n".join([rule, head, rule.replace("-", "="), row, rule]) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "iou"])
        for name, value in self.per_sequence.items():
            w.writerow([name, repr(float(value))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["sequence", "iou"]:
            raise ValueError("report CSV must start with a 'sequence,iou' header")
        per_seq = {name: float(value) for name, value in rows[1:]}
        if not per_seq:
            raise ValueError("report CSV has no sequences")
        return cls(per_seq, _mean(list(per_seq.values())))

    def save(self, csv_path, table_path=None):
        with atomic_output(csv_path, "w") as f:
            f.write(self.to_csv())
        if table_path is not None:
            with atomic_output(table_path, "w") as f:
                f.write(self.table())

    @classmethod
    def load(cls, csv_path):
        with open(csv_path) as f:
            return cls.from_csv(f.read())


def evaluate_dataset(results):
    """``results`` maps sequence name -> (pred masks, gt masks)."""
    if not results:
        raise ValueError("no sequences to evaluate")
    per_seq = {name: evaluate_sequence(p, g) for name, (p, g) in results.items()}
    return EvalReport(per_seq, _mean(list(per_seq.values())))
