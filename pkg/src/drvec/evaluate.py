"""Trial scoring, EER/DET computation, per-condition aggregation.

Conventions, fixed so numbers are comparable across implementations:
a trial is accepted when its score is >= the threshold, so
FRR(t) = fraction of target scores < t and FAR(t) = fraction of nontarget
scores >= t. Thresholds sweep all distinct scores (plus an accept-nothing
endpoint) and the EER is linearly interpolated between the two operating
points bracketing the FRR = FAR crossing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .embedder import enroll_average
from .errors import DataError
from .trials import TARGET, TrialSet


@dataclass
class DetPoint:
    threshold: float
    far: float
    frr: float


@dataclass
class ConditionReport:
    condition: str
    eer: float
    n_target: int
    n_nontarget: int
    det: list = field(default_factory=list)


@dataclass
class EvalReport:
    conditions: list  # ConditionReport, in evaluation order
    average_eer: float
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "average_eer": self.average_eer,
            "conditions": {
                c.condition: {
                    "eer": c.eer,
                    "n_target": c.n_target,
                    "n_nontarget": c.n_nontarget,
                    "det": [[p.threshold, p.far, p.frr] for p in c.det],
                }
                for c in self.conditions
            },
            "config": self.config_echo,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def det_points(target_scores, nontarget_scores) -> list:
    """One operating point per distinct threshold, ascending, plus the
    accept-nothing endpoint; includes (FAR=1, FRR=0) and (FAR=0, FRR=1)."""
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise DataError("DET computation needs at least one score in each class")
    thresholds = np.unique(np.concatenate([tar, non]))
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    points = [DetPoint(float(t), float(fa), float(fr))
              for t, fa, fr in zip(thresholds, far, frr)]
    points.append(DetPoint(float("inf"), 0.0, 1.0))
    return points


def eer(target_scores, nontarget_scores) -> float:
    """Equal error rate at the interpolated FRR = FAR crossing."""
    points = det_points(target_scores, nontarget_scores)
    diffs = [p.frr - p.far for p in points]
    for k, dk in enumerate(diffs):
        if dk >= 0.0:
            if dk == 0.0 or k == 0:
                return points[k].frr
            prev = points[k - 1]
            alpha = -diffs[k - 1] / (dk - diffs[k - 1])
            return prev.frr + alpha * (points[k].frr - prev.frr)
    return points[-1].frr  # unreachable: the endpoint has diff = 1


def aggregate(condition_reports, config_echo=None) -> EvalReport:
    """Unweighted mean of per-condition EERs."""
    reports = list(condition_reports)
    if not reports:
        raise DataError("aggregate needs at least one condition report")
    avg = float(np.mean([c.eer for c in reports]))
    return EvalReport(reports, avg, dict(config_echo or {}))


def score_trialset(model, trials: TrialSet, corpus, batched: bool = False) -> dict:
    """Score every trial; returns {condition: (target scores, nontarget
    scores)} with order following the trial list.

    Each utterance is embedded once; enrollment embeddings are averaged per
    trial. With ``batched`` the referenced utterances are embedded in
    lockstep chunks (the trainer's fast monitoring path); the default
    embeds one at a time, the canonical path for report artifacts. Either
    path is bit-stable across repeated evaluations.
    """
    cache = {}
    if batched:
        referenced = sorted({u for t in trials.trials
                             for u in (*t.enroll_utt_ids, t.test_utt_id)})
        missing = [u for u in referenced if u not in corpus.utterances]
        if missing:
            raise DataError(f"trial references unknown utterance {missing[0]!r}")
        chunk = 64
        for lo in range(0, len(referenced), chunk):
            ids = referenced[lo:lo + chunk]
            for uid, emb in zip(ids, model.embed_utterances([corpus.features(u) for u in ids])):
                cache[uid] = emb

    def embedding(utt_id):
        emb = cache.get(utt_id)
        if emb is None:
            if utt_id not in corpus.utterances:
                raise DataError(f"trial references unknown utterance {utt_id!r}")
            emb = model.embed_utterance(corpus.features(utt_id))
            cache[utt_id] = emb
        return emb

    by_condition = {}
    for trial in trials.trials:
        enroll_model = enroll_average([embedding(u) for u in trial.enroll_utt_ids])
        score = model.score(enroll_model, embedding(trial.test_utt_id)).item()
        tar, non = by_condition.setdefault(trial.condition, ([], []))
        (tar if trial.label == TARGET else non).append(score)
    return by_condition


def evaluate_model(model, trials: TrialSet, corpus, config_echo=None,
                   with_det: bool = True, batched: bool = False) -> EvalReport:
    """Full evaluation: score, per-condition EER/DET, aggregate."""
    scores = score_trialset(model, trials, corpus, batched=batched)
    reports = []
    for condition, (tar, non) in scores.items():
        if not tar or not non:
            raise DataError(f"condition {condition!r} is missing a score class "
                            f"({len(tar)} target, {len(non)} nontarget)")
        det = det_points(tar, non) if with_det else []
        reports.append(ConditionReport(condition, eer(tar, non), len(tar), len(non), det))
    return aggregate(reports, config_echo)


def det_csv(points) -> str:
    lines = ["threshold,far,frr"]
    lines += [f"{p.threshold},{p.far},{p.frr}" for p in points]
    return "\n".join(lines) + "\n"
