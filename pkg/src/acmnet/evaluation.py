"""Recall@N with a frame tolerance window, pose buckets, and the two measures."""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from acmnet import _kernels
from acmnet.augment import apply_appearance_transform, derive_seed, rotate90, sample_appearance_transform
from acmnet.errors import MismatchError, ParameterError
from acmnet.retrieval import build_bank, embed, knn_batch

DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
DEFAULT_NS = (1, 5, 10)


@dataclass
class EvalReport:
    recall: dict
    pose_buckets: list = None
    invariance_measure: float = None
    equivariance_measure: float = None
    config: dict = field(default_factory=dict)
    queries: list = field(default_factory=list)

    def to_json(self):
        return {
            "recall": {str(n): float(self.recall[n]) for n in sorted(self.recall)},
            "pose_buckets": None if self.pose_buckets is None else [float(v) for v in self.pose_buckets],
            "invariance": self.invariance_measure,
            "equivariance": self.equivariance_measure,
            "config": self.config,
            "queries": self.queries,
        }


def _hit_ranks(retrievals, correspondence, window_radius):
    if not retrievals:
        raise ParameterError("no queries to evaluate")
    gt = []
    for q, _ in retrievals:
        if q not in correspondence:
            raise ParameterError(f"query frame {q} has no ground-truth correspondence")
        gt.append(correspondence[q])
    width = min(len(r) for _, r in retrievals)
    ranked = np.array([list(r)[:width] for _, r in retrievals], dtype=np.int64).reshape(len(gt), width)
    return _kernels.first_hit_rank(ranked, np.asarray(gt, dtype=np.int64), int(window_radius)), width


def recall_at_n(retrievals, correspondence, n, window_radius=2):
    """Fraction of queries with any of their top ``n`` frames within the window.

    ``retrievals`` is a sequence of ``(query_frame, ranked_reference_frames)``.
    """
    if n < 1 or window_radius < 0:
        raise ParameterError("n must be >= 1 and window_radius >= 0")
    for q, r in retrievals:
        if len(r) < n:
            raise ParameterError(f"query {q}: {len(r)} retrievals, need {n}")
    first, _ = _hit_ranks(retrievals, correspondence, window_radius)
    return float(np.mean((first >= 0) & (first < n)))


def recall_table(retrievals, correspondence, ns=DEFAULT_NS, window_radius=2):
    return {int(n): recall_at_n(retrievals, correspondence, n, window_radius) for n in sorted(ns)}


def rotation_error_deg(q1, q2):
    d = abs(float(np.dot(q1, q2)) / (np.linalg.norm(q1) * np.linalg.norm(q2)))
    return math.degrees(2.0 * math.acos(min(1.0, d)))


def pose_bucket_accuracy(predicted_poses, gt_poses, thresholds=DEFAULT_THRESHOLDS):
    """Cumulative fractions of queries within each (metres, degrees) bucket."""
    if len(predicted_poses) != len(gt_poses) or not gt_poses:
        raise ParameterError("need one predicted pose per ground-truth pose")
    hits = np.zeros(len(thresholds))
    for p, g in zip(predicted_poses, gt_poses):
        if p is None or g is None:
            raise ParameterError("missing pose")
        dt = float(np.linalg.norm(np.asarray(p.t) - np.asarray(g.t)))
        dr = rotation_error_deg(p.q, g.q)
        for i, (tm, td) in enumerate(thresholds):
            if dt <= tm and dr <= td:
                hits[i] += 1
    return [float(h / len(gt_poses)) for h in hits]


def _mean_cosine(a, b):
    # rows of embed() are unit or exactly zero
    return float(np.mean(np.sum(a * b, axis=1)))


def equivariance_measure(params, images, embed_fn=None):
    """Mean cosine between ``x`` and its 90/180/270 degree rotations."""
    embed_fn = embed_fn or (lambda x: embed(params, x))
    images = np.asarray(images)
    base = embed_fn(images)
    sims = [_mean_cosine(base, embed_fn(rotate90(images, k))) for k in (1, 2, 3)]
    return float(np.clip(np.mean(sims), -1.0, 1.0))


def invariance_measure(params, images, num_appearance_samples=4, seed=0,
                       sampler=sample_appearance_transform, embed_fn=None):
    """Mean cosine between ``x`` and appearance-transformed copies of ``x``."""
    if num_appearance_samples < 1:
        raise ParameterError("num_appearance_samples must be >= 1")
    embed_fn = embed_fn or (lambda x: embed(params, x))
    images = np.asarray(images)
    base = embed_fn(images)
    sims = []
    for s in range(num_appearance_samples):
        views = np.stack([
            apply_appearance_transform(x, sampler(derive_seed(seed, s, i)))
            for i, x in enumerate(images)
        ])
        sims.append(_mean_cosine(base, embed_fn(views)))
    return float(np.clip(np.mean(sims), -1.0, 1.0))


def evaluate(params, dataset, ns=DEFAULT_NS, window_radius=2, query_sequence=None,
             invariance_samples=2, measure_images=32, seed=0, bank=None):
    """Full retrieval evaluation of one model on one dataset."""
    refs = dataset.reference_frames()
    if bank is None:
        bank = build_bank(params, refs)
    elif bank.dim != params.config.descriptor_dim:
        raise MismatchError(
            f"bank dimension {bank.dim} != model descriptor dimension {params.config.descriptor_dim}"
        )
    if query_sequence is None or query_sequence == dataset.reference_sequence:
        queries = refs if query_sequence else dataset.query_frames()
    else:
        queries = dataset.query_frames(query_sequence)
    if not queries:
        raise ParameterError("no query frames")
    if query_sequence == dataset.reference_sequence:
        correspondence = {f.frame_index: f.frame_index for f in refs}
    else:
        correspondence = dataset.correspondence

    k = min(max(ns), bank.size)
    qz = embed(params, np.stack([f.image for f in queries]))
    rows, sims = knn_batch(bank, qz, k)
    ref_frames = bank.frame_indices()
    retrieved = ref_frames[rows]
    retrievals = [(f.frame_index, retrieved[i]) for i, f in enumerate(queries)]
    recall = recall_table(retrievals, correspondence, [n for n in ns if n <= k], window_radius)
    first, _ = _hit_ranks(retrievals, correspondence, window_radius)

    detail = []
    for i, f in enumerate(queries):
        detail.append({
            "frame": int(f.frame_index),
            "sequence": f.sequence_id,
            "gt": int(correspondence[f.frame_index]),
            "top_k": [int(v) for v in retrieved[i]],
            "similarity": [round(float(v), 6) for v in sims[i]],
            "localized_at": int(first[i]) + 1 if first[i] >= 0 else None,
        })

    pose_buckets = None
    by_frame = {f.frame_index: f for f in refs}
    if all(f.pose is not None for f in queries) and all(f.pose is not None for f in refs):
        predicted = [by_frame[int(retrieved[i, 0])].pose for i in range(len(queries))]
        gt_poses = [f.pose for f in queries]
        pose_buckets = pose_bucket_accuracy(predicted, gt_poses)

    sample = np.stack([f.image for f in refs[:measure_images]])
    report = EvalReport(
        recall=recall,
        pose_buckets=pose_buckets,
        invariance_measure=invariance_measure(params, sample, invariance_samples, seed),
        equivariance_measure=equivariance_measure(params, sample),
        config={
            "window_radius": int(window_radius),
            "ns": [int(n) for n in ns],
            "query_sequence": query_sequence,
            "reference_sequence": dataset.reference_sequence,
            "num_queries": len(queries),
            "num_references": bank.size,
            "bank_fingerprint": bank.fingerprint,
            "invariance_samples": int(invariance_samples),
            "measure_images": int(len(sample)),
            "seed": int(seed),
        },
        queries=detail,
    )
    return report


def emit_report(report, path, chart_path=None):
    """Write the report JSON (and an optional recall bar chart)."""
    data = report.to_json() if isinstance(report, EvalReport) else report
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=False)
    if chart_path:
        recall = data["recall"]
        plot_bars({f"R@{k}": v for k, v in recall.items()}, chart_path, "recall")
    return path


def plot_bars(values, path, ylabel, title=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = list(values)
    ax.bar(names, [values[k] for k in names], color="#4c72b0")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    for i, k in enumerate(names):
        ax.text(i, values[k] + 0.02, f"{values[k]:.2f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
