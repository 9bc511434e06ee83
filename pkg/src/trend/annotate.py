"""Preference annotators and the query loop that feeds the preference dataset.

The oracle label of a pair always comes from the segments' hidden true
returns; annotators may corrupt it (scripted noise) or replace it entirely
(the file-backed mock VLM). Only the observed label is ever trained on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .envs import EPISODE_LEN, EnvKind, Segment, rollout
from .reward import (
    INDIFFERENT,
    PREFER0,
    PREFER1,
    Label,
    PreferenceDataset,
    PreferencePair,
    RewardEnsemble,
    is_strict,
    margins,
    sigmoid,
)
from .sac import ReplayBuffer

log = logging.getLogger(__name__)

FIXTURE_HEADER = "mockvlm-v1"
FIXTURE_TOKENS = {"prefer0": PREFER0, "prefer1": PREFER1, "no_preference": None}
DEFAULT_TIE_TOL = 1e-9


def scripted_label(seg0: Segment, seg1: Segment, tau_tie: float = DEFAULT_TIE_TOL) -> Label:
    """Prefer the segment with the larger true return; near-ties are indifferent."""
    diff = seg0.oracle_return - seg1.oracle_return
    if diff > tau_tie:
        return PREFER0
    if diff < -tau_tie:
        return PREFER1
    return INDIFFERENT


def flip(label: Label) -> Label:
    return PREFER1 if label == PREFER0 else PREFER0 if label == PREFER1 else label


def corrupt(label: Label, eps: float, rng: np.random.Generator) -> Label:
    """Flip a strict label with probability ``eps``; indifference passes through.

    One uniform draw is consumed per call regardless of the label so the
    noise stream does not depend on how many ties occurred.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {eps}")
    u = rng.random()
    return flip(label) if u < eps and is_strict(label) else label


class Annotator(Protocol):
    def label(self, seg0: Segment, seg1: Segment) -> Optional[Label]:
        """Return a preference label, or None to abstain."""


class NoisyScriptedAnnotator:
    def __init__(self, eps: float, rng: np.random.Generator, tau_tie: float = DEFAULT_TIE_TOL):
        if not 0.0 <= eps <= 1.0:
            raise ValueError(f"flip probability must be in [0, 1], got {eps}")
        if tau_tie < 0:
            raise ValueError("tie tolerance must be non-negative")
        self.eps = eps
        self.tau_tie = tau_tie
        self.rng = rng

    def label(self, seg0: Segment, seg1: Segment) -> Label:
        return corrupt(scripted_label(seg0, seg1, self.tau_tie), self.eps, self.rng)


class FixtureExhausted(RuntimeError):
    pass


def read_fixture(path) -> list[str]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != FIXTURE_HEADER:
        raise ValueError(f"{path}: first line must be {FIXTURE_HEADER!r}")
    tokens = []
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.strip()
        if not tok:
            continue
        if tok not in FIXTURE_TOKENS:
            raise ValueError(f"{path}:{lineno}: unknown response {tok!r}")
        tokens.append(tok)
    return tokens


def write_fixture(path, tokens: Sequence[str]) -> None:
    bad = [t for t in tokens if t not in FIXTURE_TOKENS]
    if bad:
        raise ValueError(f"unknown fixture tokens: {sorted(set(bad))}")
    Path(path).write_text("\n".join([FIXTURE_HEADER, *tokens]) + "\n")


class MockVlmAnnotator:
    """Replays recorded VLM answers in order; ``no_preference`` means skip."""

    def __init__(self, path):
        self.path = Path(path)
        self.tokens = read_fixture(self.path)
        self.cursor = 0

    def label(self, seg0: Segment, seg1: Segment) -> Optional[Label]:
        if self.cursor >= len(self.tokens):
            raise FixtureExhausted(
                f"mock VLM fixture {self.path} exhausted after {len(self.tokens)} responses"
            )
        tok = self.tokens[self.cursor]
        self.cursor += 1
        return FIXTURE_TOKENS[tok]


def label_token(label: Optional[Label]) -> str:
    if label == PREFER0:
        return "prefer0"
    if label == PREFER1:
        return "prefer1"
    return "no_preference"


def vlm_fixture_tokens(
    clean_labels: Sequence[Label], noise_rate: float, rng: np.random.Generator, skip_rate: float = 0.0
) -> list[str]:
    """Responses that disagree with the oracle on ``round(noise_rate * n)`` answered strict pairs.

    Oracle ties become ``no_preference``; a further ``skip_rate`` fraction of
    pairs is abstained on at random. Disagreement is placed uniformly at random.
    """
    n = len(clean_labels)
    skip = rng.random(n) < skip_rate
    answered = [i for i in range(n) if not skip[i] and is_strict(clean_labels[i])]
    n_wrong = int(round(noise_rate * len(answered)))
    wrong = set(rng.choice(answered, size=n_wrong, replace=False).tolist()) if n_wrong else set()
    tokens = []
    for i, lab in enumerate(clean_labels):
        if skip[i] or not is_strict(lab):
            tokens.append("no_preference")
        else:
            tokens.append(label_token(flip(lab) if i in wrong else lab))
    return tokens


def probe_pairs(kind: EnvKind | str, seed: int, n: int, h: int = 50) -> list[tuple[Segment, Segment]]:
    """Deterministic stream of random-behavior segment pairs for fixture building."""
    kind = EnvKind(kind)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E6]))

    def segment() -> Segment:
        a_rng = np.random.default_rng(rng.integers(2**63))
        states, act, rew, _ = rollout(kind, lambda s, o: a_rng.uniform(-1, 1, 2), rng.integers(2**63),
                                      stop_on_success=False)
        start = int(rng.integers(EPISODE_LEN - h + 1))
        return Segment(kind, states[start:start + h], act[start:start + h], float(rew[start:start + h].sum()))

    return [(segment(), segment()) for _ in range(n)]


def disagreement_select(
    candidates: Sequence[tuple[Segment, Segment]], ensemble: RewardEnsemble, m: int
) -> np.ndarray:
    """Indices of the ``m`` candidates whose member preference probabilities vary most.

    Ranking is by population variance across members, ties to lower index.
    """
    c = len(candidates)
    if not 1 <= m <= c:
        raise ValueError(f"need 1 <= M <= C, got M={m}, C={c}")
    x = np.stack([np.stack([s0.inputs(), s1.inputs()]) for s0, s1 in candidates])
    probs = np.stack([sigmoid(margins(mem, x)) for mem in ensemble.members])
    var = probs.var(axis=0)
    order = np.lexsort((np.arange(c), -var))
    return order[:m]


@dataclass
class QueryBudget:
    total: int = 1400
    per_session: int = 20
    pool: int = 200
    interval: int = 2000
    used: int = 0
    count_skips: bool = True

    def __post_init__(self):
        if self.per_session > self.pool:
            raise ValueError(f"queries per session ({self.per_session}) exceed pool size ({self.pool})")

    @property
    def remaining(self) -> int:
        return self.total - self.used


def query_session(
    buffer: ReplayBuffer,
    annotator: Annotator,
    budget: QueryBudget,
    ensemble: RewardEnsemble,
    dataset: PreferenceDataset,
    kind: EnvKind | str,
    rng: np.random.Generator,
    h: int = 50,
    tau_tie: float = DEFAULT_TIE_TOL,
    exclude_ties: bool = False,
) -> list[PreferencePair]:
    """Sample candidates, pick the most disputed ones, query, and store them."""
    if budget.remaining <= 0:
        log.info("feedback budget exhausted (%d used); skipping query session", budget.used)
        return []
    if len(buffer.complete_episodes(h)) < 2:
        raise ValueError("query session needs at least two stored episodes of length >= H")
    kind = EnvKind(kind)
    m = min(budget.per_session, budget.remaining)
    candidates = [
        (buffer.sample_window(kind, h, rng), buffer.sample_window(kind, h, rng))
        for _ in range(budget.pool)
    ]
    chosen = disagreement_select(candidates, ensemble, m) if m < budget.pool else np.arange(m)

    new_pairs = []
    for i in chosen:
        seg0, seg1 = candidates[i]
        clean = scripted_label(seg0, seg1, tau_tie)
        observed = annotator.label(seg0, seg1)
        budget.used += 1
        if observed is None and not budget.count_skips:
            budget.used -= 1
        if exclude_ties and observed == INDIFFERENT:
            continue
        new_pairs.append(dataset.add(PreferencePair(seg0, seg1, observed, clean)))
    return new_pairs
