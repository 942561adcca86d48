"""Ranking/accuracy metrics and attention-weight export."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import nnkernel as nk
from .datastore import EncodedWindow, stack_windows
from .model import STAGES, ModelConfig, forward_batch


class EmptyInputError(ValueError):
    pass


class SingleClassError(ValueError):
    """AUC is undefined when only one outcome class is present."""


def _check_auc_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    if scores.size < 2:
        raise EmptyInputError(f"AUC needs at least 2 scored items, got {scores.size}")
    pos = labels == 1
    if not np.all(pos | (labels == 0)):
        raise ValueError("labels must be 0 or 1")
    if pos.all() or not pos.any():
        raise SingleClassError("AUC undefined: labels contain a single class")
    return scores, pos


def auc(scores, labels) -> float:
    """ROC AUC by the rank-sum statistic, ties sharing their average rank."""
    scores, pos = _check_auc_inputs(scores, labels)
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg_rank = upper - (counts - 1) / 2.0  # 1-based mean rank of each tie group
    ranks = avg_rank[inverse]
    n_pos = int(pos.sum())
    n_neg = scores.size - n_pos
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) reference: share of (positive, negative) pairs ordered correctly, ties as 1/2."""
    scores, pos = _check_auc_inputs(scores, labels)
    sp = scores[pos][:, None]
    sn = scores[~pos][None, :]
    wins = (sp > sn).sum() + 0.5 * (sp == sn).sum()
    return float(wins / (sp.size * sn.size))


oracle_auc = auc


@dataclass
class EvalReport:
    auc: float
    accuracy: float
    n_scored: int
    mean_bce: float

    def to_dict(self):
        return asdict(self)


def predict_windows(params, config: ModelConfig, windows: Sequence[EncodedWindow], batch_size=256):
    """Predicted probabilities ``[N, k]`` for a list of windows, in order."""
    out = []
    for start in range(0, len(windows), batch_size):
        itok, qtok, _, _ = stack_windows(windows[start : start + batch_size])
        probs, _, _ = forward_batch(params, config, itok, qtok)
        out.append(probs)
    return np.concatenate(out) if out else np.zeros((0, config.k))


def pooled_predictions(params, config, windows):
    """Flat ``(scores, labels)`` over valid positions of all windows."""
    probs = predict_windows(params, config, windows)
    _, _, targets, valid = stack_windows(windows)
    mask = valid.astype(bool)
    return probs[mask], targets[mask]


def metrics(scores, labels) -> EvalReport:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise EmptyInputError("no scored positions")
    pred = (scores >= 0.5).astype(labels.dtype)
    bce = nk.bce_masked(scores, labels, np.ones(scores.shape, dtype=bool))
    return EvalReport(
        auc=auc(scores, labels),
        accuracy=float((pred == labels).mean()),
        n_scored=int(scores.size),
        mean_bce=float(bce),
    )


def evaluate(params, config: ModelConfig, windows: Sequence[EncodedWindow]) -> EvalReport:
    """Micro-averaged metrics over every valid position of ``windows``."""
    if not windows:
        raise EmptyInputError("no test windows")
    scores, labels = pooled_predictions(params, config, windows)
    return metrics(scores, labels)


ATTENTION_HEADER = ("window", "block", "stage", "head", "query_pos", "key_pos", "weight")


def attention_records(params, config: ModelConfig, windows: Sequence[EncodedWindow], batch_size=64):
    """Yield ``(window, block, stage, head, query_pos, key_pos, weight)`` for allowed, valid entries.

    Positions are 0-based window offsets.
    """
    for start in range(0, len(windows), batch_size):
        chunk = windows[start : start + batch_size]
        itok, qtok, _, valid = stack_windows(chunk)
        _, trace, _ = forward_batch(params, config, itok, qtok)
        for i in range(len(chunk)):
            m = int(valid[i].sum())
            for block in range(config.n_blocks):
                for stage in STAGES:
                    weights = trace.attention[stage][block][i]
                    for head in range(config.h):
                        for q in range(m):
                            for key in range(q + 1):
                                yield start + i, block, stage, head, q, key, float(weights[head, q, key])


def export_attention(params, config: ModelConfig, windows: Sequence[EncodedWindow], path) -> int:
    """Write attention weights as CSV; returns the number of records written."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ATTENTION_HEADER)
        for rec in attention_records(params, config, windows):
            writer.writerow(rec[:-1] + (repr(rec[-1]),))
            n += 1
    return n
