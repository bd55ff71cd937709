"""Dice scores, mean +- standard error reports and registration experiment suites."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from casreg.mas import load_bank, read_meta
from casreg.phantom import phantom_pair
from casreg.registration import RegistrationConfig, cascade_register
from casreg.volume import load_labels, load_volume

log = logging.getLogger(__name__)

DEFAULT_LABELS = (1, 2, 3, 4, 5, 6, 7)
SUITE_HEADER = ("config_id", "target_id", "label", "dice", "folding", "seconds")


def dice(a, b, label):
    """2|A n B| / (|A| + |B|) for the masks of ``label``; 1.0 when both are empty."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    ma, mb = a == label, b == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / total


def mean_se(values):
    """Mean and standard error (sample std / sqrt(n)); SE is 0 for a single value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no values")
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


@dataclass(frozen=True)
class DiceReport:
    per_label: dict
    mean: float
    standard_error: float
    n: int

    def format(self):
        rows = [f"label {lab}: {d:.4f}" for lab, d in self.per_label.items()]
        rows.append(f"mean: {self.mean:.4f} +- {self.standard_error:.4f} (n={self.n})")
        return "\n".join(rows)


def dice_report(a, b, labels=DEFAULT_LABELS, include_background=False):
    """Per-label Dice with mean and SE over the label list (label 0 dropped by default)."""
    labels = [int(x) for x in labels if include_background or int(x) != 0]
    if not labels:
        raise ValueError("empty label list")
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    per_label = {lab: dice(a, b, lab) for lab in labels}
    mean, se = mean_se(list(per_label.values()))
    return DiceReport(per_label, mean, se, len(labels))


# --------------------------------------------------------------------------
# experiment suites
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PairOutcome:
    target_id: str
    per_label: dict
    mean_dice: float
    folding: float
    seconds: float


def evaluate_pair(target_id, moving, moving_labels, fixed, fixed_labels, cfg, labels=None):
    """Register one pair and score the propagated labels against the fixed labels."""
    t0 = time.perf_counter()
    result = cascade_register(moving, fixed, cfg)
    warped_labels = result.warp_labels(moving_labels)
    seconds = time.perf_counter() - t0
    if labels is None:
        labels = [int(x) for x in np.unique(fixed_labels) if x != 0]
    report = dice_report(warped_labels, fixed_labels, labels)
    return PairOutcome(str(target_id), report.per_label, report.mean,
                       result.jacobian.folding_fraction, seconds)


def phantom_suite(seeds, cfg, dims=(64, 64, 64), amplitude=6.0, smoothness=8.0, **pair_kw):
    """Run ``cfg`` on the phantom pair of every seed; returns a list of PairOutcome."""
    out = []
    for seed in seeds:
        p = phantom_pair(seed, dims, amplitude, smoothness, **pair_kw)
        out.append(evaluate_pair(seed, p.moving, p.moving_labels, p.fixed, p.fixed_labels, cfg))
    return out


def _suite_pairs(bank_dir, targets_dir):
    atlases = load_bank(bank_dir)
    by_id = {a.atlas_id: a for a in atlases}
    if targets_dir is None:
        if len(atlases) < 2:
            raise ValueError("a bank suite needs at least two atlases")
        # each atlas is a target for the next one in id order
        return [(a.atlas_id, atlases[(i + 1) % len(atlases)], a.image, a.labels)
                for i, a in enumerate(atlases)]
    pairs = []
    for d in sorted(p for p in Path(targets_dir).iterdir() if p.is_dir()):
        meta = read_meta(d / "meta.txt") if (d / "meta.txt").exists() else {}
        source = meta.get("source")
        if source not in by_id:
            raise ValueError(f"target {d.name}: meta.txt must name a bank atlas as source=<id>")
        image = next((d / n for n in ("image.nii.gz", "image.nii") if (d / n).exists()), None)
        lab = next((d / n for n in ("labels.nii.gz", "labels.nii") if (d / n).exists()), None)
        if image is None or lab is None:
            raise ValueError(f"invalid target layout: {d}")
        pairs.append((d.name, by_id[source], load_volume(image).data, load_labels(lab).data))
    if not pairs:
        raise ValueError(f"no targets in {targets_dir}")
    return pairs


def experiment_suite(bank_dir, cfg_grid, out_path, targets_dir=None, labels=None):
    """Run every configuration of ``cfg_grid`` over the pairs of a bank.

    ``cfg_grid`` maps a config id to a :class:`RegistrationConfig` (a list
    is numbered ``0, 1, ...``). Without ``targets_dir`` each bank atlas is
    the fixed image for the next atlas in id order; with it, every target
    directory is registered from the atlas named by ``source=`` in its
    meta.txt. Writes one CSV row per config, target and label and returns
    ``{config_id: [PairOutcome, ...]}``.
    """
    if not isinstance(cfg_grid, dict):
        cfg_grid = {str(i): c for i, c in enumerate(cfg_grid)}
    if not cfg_grid:
        raise ValueError("empty configuration grid")
    for cid, cfg in cfg_grid.items():
        if not isinstance(cfg, RegistrationConfig):
            raise TypeError(f"grid entry {cid!r} is not a RegistrationConfig")
    pairs = _suite_pairs(bank_dir, targets_dir)

    results = {}
    for cid, cfg in cfg_grid.items():
        results[cid] = []
        for target_id, atlas, image, target_labels in pairs:
            log.info("config %s, target %s", cid, target_id)
            results[cid].append(evaluate_pair(target_id, atlas.image, atlas.labels, image,
                                              target_labels, cfg, labels))
    write_suite_csv(results, out_path)
    return results


def write_suite_csv(results, out_path):
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUITE_HEADER)
        for cid, outcomes in results.items():
            for o in outcomes:
                for lab, d in o.per_label.items():
                    w.writerow([cid, o.target_id, lab, f"{d:.6f}", f"{o.folding:.8f}",
                                f"{o.seconds:.3f}"])


def summarize_suite(results):
    """``{config_id: (mean Dice, SE over targets, mean folding)}``."""
    summary = {}
    for cid, outcomes in results.items():
        m, se = mean_se([o.mean_dice for o in outcomes])
        summary[cid] = (m, se, float(np.mean([o.folding for o in outcomes])))
    return summary
