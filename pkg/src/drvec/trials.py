"""Verification trial lists: (enrollment utterances, test utterance, label).

Disk format, one trial per line::

    enroll_utt_1,...,enroll_utt_k<TAB>test_utt<TAB>{target|nontarget}

Condition tags are not part of the line format; per-condition lists are
kept in separate files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DataError, FormatError

TARGET = "target"
NONTARGET = "nontarget"


@dataclass(frozen=True)
class Trial:
    enroll_utt_ids: tuple
    test_utt_id: str
    label: str
    condition: str = "clean"

    def __post_init__(self):
        if not self.enroll_utt_ids:
            raise DataError("trial has an empty enrollment list")
        if self.label not in (TARGET, NONTARGET):
            raise DataError(f"trial label must be target/nontarget, got {self.label!r}")


@dataclass
class TrialSet:
    trials: list = field(default_factory=list)

    def __len__(self):
        return len(self.trials)

    def conditions(self) -> list:
        seen = []
        for t in self.trials:
            if t.condition not in seen:
                seen.append(t.condition)
        return seen

    def for_condition(self, condition: str) -> list:
        return [t for t in self.trials if t.condition == condition]

    def counts(self, condition: str | None = None) -> tuple:
        """(n_target, n_nontarget), optionally restricted to one condition."""
        pool = self.trials if condition is None else self.for_condition(condition)
        n_tar = sum(1 for t in pool if t.label == TARGET)
        return n_tar, len(pool) - n_tar

    def validate(self) -> None:
        """Reject contradictory labels for the same (model, test) pairing."""
        seen = {}
        for t in self.trials:
            key = (t.condition, tuple(sorted(t.enroll_utt_ids)), t.test_utt_id)
            if seen.setdefault(key, t.label) != t.label:
                raise DataError(f"contradictory labels for test {t.test_utt_id!r} "
                                f"against the same enrollment model")


def format_trial_lines(trials) -> str:
    lines = []
    for t in trials:
        lines.append(f"{','.join(t.enroll_utt_ids)}\t{t.test_utt_id}\t{t.label}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_trial_lines(text: str, condition: str = "clean") -> list:
    trials = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"trial line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        enroll, test, label = parts
        if label not in (TARGET, NONTARGET):
            raise FormatError(f"trial line {lineno}: unknown label {label!r}")
        trials.append(Trial(tuple(enroll.split(",")), test, label, condition))
    return trials
