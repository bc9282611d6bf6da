"""Closed-set accuracies and verification EER, plus the plain-text file formats."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateLabels, EmptyClass, EmptySet, NonFiniteScore

TARGET, NONTARGET, UNKNOWN = "target", "nontarget", "unknown"


class Prediction(NamedTuple):
    utt_id: str
    true_label: str
    predicted_label: str


@dataclass(frozen=True)
class ScoreRecord:
    enroll_id: str
    test_id: str
    score: float
    label: str = UNKNOWN

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise NonFiniteScore(f"non-finite score for trial {self.enroll_id} {self.test_id}")
        if self.label not in (TARGET, NONTARGET, UNKNOWN):
            raise ValueError(f"bad trial label {self.label!r}")


def micro_accuracy(preds: Sequence[Prediction]) -> float:
    if len(preds) == 0:
        raise EmptySet("no predictions")
    return sum(p[1] == p[2] for p in preds) / len(preds)


def per_class_recall(preds: Sequence[Prediction], inventory: Iterable[str] | None = None) -> dict[str, float]:
    if len(preds) == 0:
        raise EmptySet("no predictions")
    total, correct = defaultdict(int), defaultdict(int)
    for _, true, pred in preds:
        total[true] += 1
        correct[true] += true == pred
    classes = list(inventory) if inventory is not None else sorted(total)
    missing = [c for c in classes if total[c] == 0]
    if missing:
        raise EmptyClass(f"classes without reference items: {missing}")
    return {c: correct[c] / total[c] for c in classes}


def macro_accuracy(preds: Sequence[Prediction], inventory: Iterable[str] | None = None) -> float:
    """Unweighted mean of per-class recall.

    Every class of ``inventory`` (default: the classes seen among the true
    labels) must have at least one reference item.
    """
    recalls = per_class_recall(preds, inventory)
    return sum(recalls.values()) / len(recalls)


def _split(records):
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = [r.label for r in records]
    if any(lab == UNKNOWN for lab in labels):
        raise DegenerateLabels("EER needs every trial labelled target or nontarget")
    return scores, np.array([lab == TARGET for lab in labels])


def eer_from_scores(scores, is_target):
    """EER and its threshold from raw scores and a boolean target mask.

    Operating points are every unique score (accept iff score >= t) plus one
    point above the maximum. The EER is read off the linear interpolation
    between the two adjacent points where FAR - FRR changes sign.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    n_tar, n_non = int(is_target.sum()), int((~is_target).sum())
    if n_tar == 0 or n_non == 0:
        raise DegenerateLabels("need at least one target and one nontarget trial")
    thresholds = np.unique(scores)
    tar = np.sort(scores[is_target])
    non = np.sort(scores[~is_target])
    frr = np.searchsorted(tar, thresholds, side="left") / n_tar
    far = (n_non - np.searchsorted(non, thresholds, side="left")) / n_non
    thresholds = np.append(thresholds, np.inf)
    frr = np.append(frr, 1.0)
    far = np.append(far, 0.0)
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0 or k == 0:
        return float(far[k]), float(thresholds[k])
    lam = diff[k - 1] / (diff[k - 1] - diff[k])
    eer = far[k - 1] + lam * (far[k] - far[k - 1])
    lo, hi = thresholds[k - 1], thresholds[k]
    thr = lo if np.isinf(hi) else lo + lam * (hi - lo)
    return float(eer), float(thr)


def compute_eer(records: Sequence[ScoreRecord]):
    """Returns ``(eer, threshold)`` for labelled trials."""
    scores, is_target = _split(records)
    return eer_from_scores(scores, is_target)


# ---------------------------------------------------------------- file formats


def _rows(path):
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if parts and not parts[0].startswith("#"):
            yield lineno, parts


def read_scores(path) -> list[tuple[str, str, float]]:
    out = []
    for lineno, parts in _rows(path):
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'enroll_id test_id score'")
        out.append((parts[0], parts[1], float(parts[2])))
    return out


def write_scores(path, records: Iterable) -> None:
    with open(path, "w") as fh:
        for r in records:
            enroll, test, score = (r.enroll_id, r.test_id, r.score) if isinstance(r, ScoreRecord) else r[:3]
            fh.write(f"{enroll} {test} {score:.10f}\n")


def read_key(path) -> dict[tuple[str, str], str]:
    key = {}
    for lineno, parts in _rows(path):
        if len(parts) != 3 or parts[2] not in (TARGET, NONTARGET):
            raise ValueError(f"{path}:{lineno}: expected 'enroll_id test_id target|nontarget'")
        key[(parts[0], parts[1])] = parts[2]
    return key


def write_key(path, trials: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "w") as fh:
        for enroll, test, label in trials:
            fh.write(f"{enroll} {test} {label}\n")


def read_predictions(path) -> dict[str, str]:
    preds = {}
    for lineno, parts in _rows(path):
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'utt_id predicted_label'")
        preds[parts[0]] = parts[1]
    return preds


def write_predictions(path, preds: Iterable[tuple[str, str]]) -> None:
    with open(path, "w") as fh:
        for utt, label in preds:
            fh.write(f"{utt} {label}\n")


def join_scores_with_key(scores, key) -> list[ScoreRecord]:
    """Attach key labels to score lines; trials absent from the key are dropped."""
    return [ScoreRecord(e, t, s, key[(e, t)]) for e, t, s in scores if (e, t) in key]
