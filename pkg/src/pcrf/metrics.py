"""Set-based precision/recall/F1 and per-iteration decode reports.

Empty sets follow one convention everywhere: instances with no predicted
types are left out of the macro precision average, instances with no gold
types are left out of the macro recall average, and micro sums simply add
their zero counts.  With no qualifying instances at all, the affected
average is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .mfvi import DEFAULT_THRESHOLD, decode


def f1_score(p: float, r: float) -> float:
    """Harmonic mean, 0 when both inputs are 0.

    Whenever both inputs are positive the result must sit between them;
    the assert guards every emitted triple against a broken formula.
    """
    f = 0.0 if p + r == 0.0 else 2.0 * p * r / (p + r)
    if p > 0.0 and r > 0.0:
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12
    return f


def macro_prf(preds, golds):
    """Instance-averaged precision and recall, F1 of the two averages."""
    p_vals = [len(p & g) / len(p) for p, g in zip(preds, golds) if p]
    r_vals = [len(p & g) / len(g) for p, g in zip(preds, golds) if g]
    p = sum(p_vals) / len(p_vals) if p_vals else 0.0
    r = sum(r_vals) / len(r_vals) if r_vals else 0.0
    return p, r, f1_score(p, r)


def micro_prf(preds, golds):
    """Corpus-level counts: sum of intersections over sum of set sizes."""
    tp = sum(len(p & g) for p, g in zip(preds, golds))
    n_pred = sum(len(p) for p in preds)
    n_gold = sum(len(g) for g in golds)
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return p, r, f1_score(p, r)


@dataclass
class EvalReport:
    instance_count: int
    macro_p: float
    macro_r: float
    macro_f1: float
    micro_p: float
    micro_r: float
    micro_f1: float
    avg_pred_size: float

    def to_dict(self):
        return asdict(self)

    def format_text(self):
        return (f"instances {self.instance_count}  "
                f"macro P/R/F1 {self.macro_p:.4f}/{self.macro_r:.4f}/{self.macro_f1:.4f}  "
                f"micro P/R/F1 {self.micro_p:.4f}/{self.micro_r:.4f}/{self.micro_f1:.4f}  "
                f"avg preds {self.avg_pred_size:.2f}")


def evaluate(preds, golds) -> EvalReport:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} gold sets")
    ma_p, ma_r, ma_f = macro_prf(preds, golds)
    mi_p, mi_r, mi_f = micro_prf(preds, golds)
    avg = sum(len(p) for p in preds) / len(preds) if preds else 0.0
    return EvalReport(len(preds), ma_p, ma_r, ma_f, mi_p, mi_r, mi_f, avg)


@dataclass
class IterationRow:
    """Decode quality after t updates, including both set-size conventions:
    avg_pred_size counts strict threshold decodes, avg_pred_size_forced the
    variant that falls back to the argmax type when the decode is empty."""

    iteration: int
    macro_p: float
    macro_r: float
    macro_f1: float
    micro_p: float
    micro_r: float
    micro_f1: float
    avg_pred_size: float
    avg_pred_size_forced: float

    def to_dict(self):
        return asdict(self)


def per_iteration_eval(trajectories, golds, threshold: float = DEFAULT_THRESHOLD):
    """One IterationRow per unrolled step t = 0..T.

    `trajectories` is instance-major: one list of MarginalState per
    instance, all the same length.  Headline metrics use the strict decode.
    """
    if not trajectories:
        return []
    steps = len(trajectories[0])
    for traj in trajectories:
        if len(traj) != steps:
            raise ValueError("trajectories differ in length")
    rows = []
    for t in range(steps):
        preds = [decode(traj[t], threshold) for traj in trajectories]
        forced = [decode(traj[t], threshold, force_nonempty=True) for traj in trajectories]
        ma_p, ma_r, ma_f = macro_prf(preds, golds)
        mi_p, mi_r, mi_f = micro_prf(preds, golds)
        rows.append(IterationRow(
            iteration=t,
            macro_p=ma_p, macro_r=ma_r, macro_f1=ma_f,
            micro_p=mi_p, micro_r=mi_r, micro_f1=mi_f,
            avg_pred_size=float(np.mean([len(p) for p in preds])),
            avg_pred_size_forced=float(np.mean([len(p) for p in forced])),
        ))
    return rows


def format_iteration_table(rows) -> str:
    header = (f"{'t':>3} {'macroP':>8} {'macroR':>8} {'macroF1':>8} "
              f"{'microF1':>8} {'preds':>8} {'preds!':>8}")
    lines = [header]
    for r in rows:
        lines.append(f"{r.iteration:>3} {r.macro_p:>8.4f} {r.macro_r:>8.4f} "
                     f"{r.macro_f1:>8.4f} {r.micro_f1:>8.4f} "
                     f"{r.avg_pred_size:>8.2f} {r.avg_pred_size_forced:>8.2f}")
    return "\n".join(lines)
