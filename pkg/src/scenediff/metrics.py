"""Evaluation metrics over generated mode sets.

Scene-level SADE/SFDE pick the best mode per scene as a whole;
individual-level ADE/FDE let each agent pick its own best mode; BADE picks
one mode for an entire batch. Displacements are L2 in native units and
only the generated (mask = 0) region is evaluated. Possessor accuracy
compares the argmax of the predicted clean-event probabilities with the
ground-truth track on the evaluated frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRIC_NAMES = ("sade", "sfde", "ade", "fde", "bade", "acc")


def _check_eval_region(eval_mask: np.ndarray):
    if not eval_mask.any():
        raise ValueError("evaluation region is empty")


def _final_eval_t(eval_mask: np.ndarray) -> int | None:
    """Final-timestep metrics are defined only when the scene's last frame
    is (at least partly) generated; a trailing observed frame means the
    endpoint was given, so a final error would be meaningless."""
    T = eval_mask.shape[0]
    if not eval_mask[T - 1].any():
        return None
    return T - 1


def displacement(modes: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """L2 displacement per (mode, t, n)."""
    return np.linalg.norm(np.asarray(modes) - np.asarray(truth)[None], axis=-1)


def sade_sfde(modes: np.ndarray, truth: np.ndarray, eval_mask: np.ndarray):
    """Scene-level errors: (minSADE, avgSADE, minSFDE, avgSFDE).

    SADE_k averages displacement over all evaluated (t, n); SFDE_k averages
    over agents at the final evaluated timestep. SFDE entries are None when
    the final frame is observed.
    """
    eval_mask = np.asarray(eval_mask, dtype=bool)
    _check_eval_region(eval_mask)
    disp = displacement(modes, truth)
    sade = np.array([d[eval_mask].mean() for d in disp])
    t_f = _final_eval_t(eval_mask)
    if t_f is None:
        sfde_min = sfde_avg = None
    else:
        sfde = np.array([d[t_f, eval_mask[t_f]].mean() for d in disp])
        sfde_min, sfde_avg = float(sfde.min()), float(sfde.mean())
    return float(sade.min()), float(sade.mean()), sfde_min, sfde_avg


def ade_fde(modes: np.ndarray, truth: np.ndarray, eval_mask: np.ndarray):
    """Individual-level errors: (minADE, avgADE, minFDE, avgFDE).

    Each agent's displacement is averaged over its own evaluated frames;
    the min picks the best mode per agent before averaging over agents.
    """
    eval_mask = np.asarray(eval_mask, dtype=bool)
    _check_eval_region(eval_mask)
    disp = displacement(modes, truth)  # [K, T, N]
    K, T, N = disp.shape
    per_agent = []  # [K] mean displacement for each agent with eval frames
    for n in range(N):
        sel = eval_mask[:, n]
        if sel.any():
            per_agent.append(disp[:, sel, n].mean(axis=1))
    per_agent = np.stack(per_agent, axis=1)  # [K, agents]
    min_ade = float(per_agent.min(axis=0).mean())
    avg_ade = float(per_agent.mean())
    t_f = _final_eval_t(eval_mask)
    if t_f is None:
        return min_ade, avg_ade, None, None
    fin = disp[:, t_f, eval_mask[t_f]]  # [K, agents at t_f]
    return (min_ade, avg_ade, float(fin.min(axis=0).mean()), float(fin.mean()))


def bade(mode_batches: list[np.ndarray], truths: list[np.ndarray],
         masks: list[np.ndarray]) -> float:
    """Batch-level ADE: one mode index is chosen for the whole batch.

    For mode k: sum over scenes, agents and timesteps of the displacement
    on masked-out entries, divided by the count of those entries; the
    minimum over k is returned.
    """
    K = mode_batches[0].shape[0]
    num = np.zeros(K)
    den = 0.0
    for modes, truth, M in zip(mode_batches, truths, masks):
        w = 1.0 - np.asarray(M, dtype=np.float64)
        disp = displacement(modes, truth)
        num += (disp * w[None]).sum(axis=(1, 2))
        den += w.sum()
    if den == 0:
        raise ValueError("mask complement is empty across the batch")
    return float((num / den).min())


def possessor_accuracy(mode_event_probs: np.ndarray, truth_E: np.ndarray,
                       eval_frames: np.ndarray):
    """(maxAcc, avgAcc) of argmax possessor vs truth on evaluated frames.

    Argmax ties resolve to the lowest agent index.
    """
    eval_frames = np.asarray(eval_frames, dtype=bool)
    if not eval_frames.any():
        raise ValueError("no frames to evaluate")
    probs = np.asarray(mode_event_probs)
    pred = probs.argmax(axis=-1)  # [K, T]
    acc = (pred[:, eval_frames] == np.asarray(truth_E)[eval_frames]).mean(axis=1)
    return float(acc.max()), float(acc.mean())


@dataclass
class MetricReport:
    units: str = ""
    n_scenes: int = 0
    values: dict = field(default_factory=dict)
    per_scene: list = field(default_factory=list)

    ORDER = ("minSADE", "avgSADE", "minSFDE", "avgSFDE", "minADE", "avgADE",
             "minFDE", "avgFDE", "maxAcc", "avgAcc", "minBADE")

    def to_dict(self) -> dict:
        return {
            "units": self.units,
            "n_scenes": self.n_scenes,
            "aggregate": {k: self.values.get(k) for k in self.ORDER
                          if k in self.values},
            "per_scene": self.per_scene,
        }


def aggregate_report(per_scene: list[dict], units: str,
                     min_bade: float | None = None) -> MetricReport:
    """Mean of each per-scene metric, skipping absent (None) entries."""
    if not per_scene:
        raise ValueError("no scenes to aggregate")
    values = {}
    for key in MetricReport.ORDER:
        if key == "minBADE":
            continue
        vals = [s[key] for s in per_scene if s.get(key) is not None]
        if vals:
            values[key] = float(np.mean(vals))
    if min_bade is not None:
        values["minBADE"] = float(min_bade)
    return MetricReport(units=units, n_scenes=len(per_scene), values=values,
                        per_scene=per_scene)


def emit_report(report: MetricReport, out_dir) -> tuple[Path, Path]:
    """Write report.json and an aligned report.txt; deterministic order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / "report.json"
    jpath.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1),
                     encoding="utf-8")
    cols = [k for k in MetricReport.ORDER if k in report.values]
    cells = [f"{report.values[c]:.4f}" for c in cols]
    width = max([len(c) for c in cols] + [len(v) for v in cells], default=8) + 2
    lines = [
        f"scenes: {report.n_scenes}   units: {report.units}",
        "".join(c.rjust(width) for c in cols),
        "".join(v.rjust(width) for v in cells),
    ]
    tpath = out / "report.txt"
    tpath.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return jpath, tpath
