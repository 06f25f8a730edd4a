#!/usr/bin/env python3
"""
Analyze a trained run: group-mean latent connectivity per class, the most
differential edges, and ROI saliency (mean |d logit_ASD / d x|).

    python analyze_connectivity.py run/20240101-120000-1 --top 10
"""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

import dyns
import latent_graph as lg
import tensor_autodiff as ta
import training_eval as te
from data_pipeline import Label, RoiTimeSeries
from errors import DataError, DynsError
from tensor_autodiff import Tape, Tensor

logger = logging.getLogger(__name__)

TOP_EDGES = 10


def group_connectivity(model: te.DynsModel, subjects: Sequence[RoiTimeSeries]) -> Dict[Label, np.ndarray]:
    """Mean over subjects and time of the latent adjacency G_t, per class."""
    sums: Dict[Label, np.ndarray] = {}
    counts: Dict[Label, int] = {}
    for s in subjects:
        g = lg.encode_sequence(s.values, model.encoder, model.config.filter_mode).adjacency.data.mean(axis=0)
        sums[s.label] = sums.get(s.label, 0.0) + g
        counts[s.label] = counts.get(s.label, 0) + 1
    return {label: sums[label] / counts[label] for label in sums}


def top_differential_edges(means: Dict[Label, np.ndarray], top: int = TOP_EDGES) -> List[Tuple[int, int, float, float]]:
    """(i, j, ASD mean, TC mean) for the `top` upper-triangle edges with the largest |ASD - TC|."""
    asd, tc = means[Label.ASD], means[Label.TC]
    rows, cols = np.triu_indices(asd.shape[0], 1)
    diff = np.abs(asd[rows, cols] - tc[rows, cols])
    order = np.argsort(-diff, kind="stable")[:top]
    return [(int(rows[k]), int(cols[k]), float(asd[rows[k], cols[k]]), float(tc[rows[k], cols[k]])) for k in order]


def roi_saliency(model: te.DynsModel, subjects: Sequence[RoiTimeSeries]) -> Dict[Label, np.ndarray]:
    """Mean over time and subjects of |d logit_ASD / d x_{t,i}|, per class."""
    sums: Dict[Label, np.ndarray] = {}
    counts: Dict[Label, int] = {}
    for index, s in enumerate(subjects):
        x = Tensor(s.values.data, requires_grad=True)
        with Tape():
            logits = te.forward(model, x, rng=ta.make_rng(model.seed, index))
            grads = ta.backward(logits[int(Label.ASD)], {"x": x})
        sal = np.abs(grads["x"]).mean(axis=0)
        sums[s.label] = sums.get(s.label, 0.0) + sal
        counts[s.label] = counts.get(s.label, 0) + 1
    return {label: sums[label] / counts[label] for label in sums}


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"roi_{i}" for i in range(matrix.shape[1])])
        writer.writerows([[f"{v:.6f}" for v in row] for row in matrix])


def analyze_connectivity(run_dir, data=None, top: int = TOP_EDGES, out=None) -> Dict[str, Path]:
    run_dir = Path(run_dir)
    cfg = dyns.load_run_config(run_dir)
    ta.set_default_dtype(cfg.precision)
    subjects = dyns.load_subjects(cfg, data)
    if {s.label for s in subjects} != set(Label):
        raise DataError("connectivity analysis needs labelled subjects from both classes")
    model = dyns.load_trained_model(run_dir, cfg, subjects[0].n_rois)
    if model.variant.graph == "pearson":
        logger.warning("variant %s does not use the latent graph; connectivity reflects an unused encoder",
                       model.variant.name)
    out = Path(out) if out else run_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)

    means = group_connectivity(model, subjects)
    edges = top_differential_edges(means, top)
    saliency = roi_saliency(model, subjects)

    written = {}
    for label, g in means.items():
        written[f"connectivity_{label.name}"] = out / f"connectivity_{label.name}.csv"
        write_matrix_csv(written[f"connectivity_{label.name}"], g)
    written["edges"] = out / "differential_edges.csv"
    with open(written["edges"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["roi_i", "roi_j", "asd_mean", "tc_mean", "difference"])
        for i, j, a, b in edges:
            writer.writerow([i, j, f"{a:.6f}", f"{b:.6f}", f"{a - b:.6f}"])
    written["saliency"] = out / "roi_saliency.csv"
    with open(written["saliency"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["roi", "asd", "tc"])
        for i in range(subjects[0].n_rois):
            writer.writerow([i, f"{saliency[Label.ASD][i]:.6e}", f"{saliency[Label.TC][i]:.6e}"])

    print("=" * 70)
    print(f"LATENT CONNECTIVITY: {run_dir.name} ({model.variant.name}, {len(subjects)} subjects)")
    print("=" * 70)
    print()
    print(f"Top {len(edges)} differential edges (time- and group-averaged G):")
    print("  Edge        ASD mean    TC mean     Difference")
    print("  ----        --------    -------     ----------")
    for i, j, a, b in edges:
        print(f"  {i:>2} - {j:<2}    {a:8.4f}    {b:8.4f}    {a - b:+8.4f}")
    print()
    print("ROI saliency (mean |d logit_ASD / d x|):")
    print("  ROI     ASD          TC")
    ranked = np.argsort(-(saliency[Label.ASD] + saliency[Label.TC]), kind="stable")
    for i in ranked:
        print(f"  {i:>3}   {saliency[Label.ASD][i]:.4e}   {saliency[Label.TC][i]:.4e}")
    print()
    print(f"CSV files saved to: {out}")
    return written


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("run", help="run directory produced by `dyns.py train`")
    parser.add_argument("--data", help="dataset directory (default: the run's data source)")
    parser.add_argument("--top", type=int, default=TOP_EDGES)
    parser.add_argument("--out", help="output directory (default: <run>/analysis)")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format=dyns.LOG_FORMAT)
    try:
        analyze_connectivity(args.run, args.data, args.top, args.out)
    except DynsError as exc:
        logger.error("%s", exc)
        sys.exit(exc.exit_code)
