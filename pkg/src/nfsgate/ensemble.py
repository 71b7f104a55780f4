"""K gate groups over one shared network: group picking, aggregation, disagreement."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .gating import GateGroup, GateInitSpec, binarize_ste, init_gates

AGGREGATIONS = ("voting", "avg", "min")


@dataclass
class GatingEnsemble:
    groups: list[GateGroup]

    def __post_init__(self):
        if not self.groups:
            raise ValueError("ensemble needs at least one group")
        m, kind = len(self.groups[0]), self.groups[0].kind
        if any(len(g) != m or g.kind != kind for g in self.groups):
            raise ValueError("all groups must share M and binarize kind")

    @classmethod
    def initialize(cls, k: int, num_fields: int, spec: GateInitSpec,
                   rng: np.random.Generator, kind: str = "ste") -> "GatingEnsemble":
        return cls([init_gates(spec, num_fields, rng, kind) for _ in range(k)])

    @property
    def k(self) -> int:
        return len(self.groups)

    @property
    def num_fields(self) -> int:
        return len(self.groups[0])

    def alphas(self) -> np.ndarray:
        return np.stack([g.alpha for g in self.groups])

    def decisions(self) -> np.ndarray:
        return binarize_ste(self.alphas())

    def open_counts(self) -> list[int]:
        return [g.open_count() for g in self.groups]


@dataclass
class SelectionResult:
    selected: tuple[int, ...]
    per_group_decisions: np.ndarray
    aggregation: str
    post_processed: bool
    votes: np.ndarray | None = None
    mean_alpha: np.ndarray | None = None
    group_losses: list[float] | None = None
    chosen_group: int | None = None

    def to_json(self) -> dict:
        return {
            "selected": [int(i) for i in self.selected],
            "aggregation": self.aggregation,
            "votes": None if self.votes is None else [int(v) for v in self.votes],
            "mean_alpha": None if self.mean_alpha is None else [float(a) for a in self.mean_alpha],
            "post_processed": bool(self.post_processed),
        }


def mean_alpha(ensemble: GatingEnsemble) -> np.ndarray:
    """Per-field mean over groups, summed in sorted order so group order cannot matter."""
    return np.sort(ensemble.alphas(), axis=0).sum(axis=0) / ensemble.k


def pick_group(ensemble: GatingEnsemble, rng: np.random.Generator) -> int:
    return int(rng.integers(ensemble.k))


def _rank(weights: np.ndarray, candidates) -> list[int]:
    """Candidates sorted by descending weight, ties to the lower index."""
    return sorted(candidates, key=lambda i: (-weights[i], i))


def post_process(decision, ranking, n: int) -> tuple[int, ...]:
    """Force an open set of exactly ``n`` fields.

    Too many open: keep the ``n`` with the largest ranking weight.  Too few:
    add closed fields in descending ranking weight.
    """
    decision = np.asarray(decision)
    ranking = np.asarray(ranking, dtype=np.float64)
    if not 0 < n <= len(decision):
        raise ValueError(f"N must lie in [1, {len(decision)}], got {n}")
    opened = [i for i in range(len(decision)) if decision[i] > 0]
    if len(opened) >= n:
        chosen = _rank(ranking, opened)[:n]
    else:
        closed = [i for i in range(len(decision)) if decision[i] <= 0]
        chosen = opened + _rank(ranking, closed)[:n - len(opened)]
    return tuple(sorted(chosen))


def aggregate_voting(ensemble: GatingEnsemble, n: int) -> SelectionResult:
    dec = ensemble.decisions()
    votes = dec.sum(axis=0)
    mean_a = mean_alpha(ensemble)
    order = sorted(range(ensemble.num_fields), key=lambda i: (-votes[i], -mean_a[i], i))
    return SelectionResult(tuple(sorted(order[:n])), dec, "voting", False,
                           votes=votes.astype(int), mean_alpha=mean_a)


def aggregate_avg(ensemble: GatingEnsemble, n: int) -> SelectionResult:
    dec = ensemble.decisions()
    mean_a = mean_alpha(ensemble)
    avg_dec = binarize_ste(mean_a)
    selected = post_process(avg_dec, mean_a, n)
    return SelectionResult(selected, dec, "avg", int(avg_dec.sum()) != n,
                           votes=dec.sum(axis=0).astype(int), mean_alpha=mean_a)


def group_selection(group: GateGroup, n: int) -> tuple[int, ...]:
    return post_process(group.decisions(), group.alpha, n)


class RetrainError(RuntimeError):
    pass


def aggregate_min(ensemble: GatingEnsemble, n: int,
                  retrain_fn: Callable[[tuple[int, ...], int], float]) -> SelectionResult:
    """Pick the group whose own selection gives the lowest short-retrain loss.

    ``retrain_fn(selection, group_index)`` trains a fresh model on the
    selection and returns its mean training loss.
    """
    selections = [group_selection(g, n) for g in ensemble.groups]
    losses = []
    for k, sel in enumerate(selections):
        try:
            losses.append(float(retrain_fn(sel, k)))
        except Exception as exc:
            raise RetrainError(f"retrain for group {k} failed: {exc}") from exc
    best = int(np.argmin(losses))  # first minimum -> lower group index
    dec = ensemble.decisions()
    chosen = ensemble.groups[best]
    return SelectionResult(selections[best], dec, "min", chosen.open_count() != n,
                           votes=dec.sum(axis=0).astype(int),
                           mean_alpha=mean_alpha(ensemble),
                           group_losses=losses, chosen_group=best)


def aggregate(ensemble: GatingEnsemble, n: int, method: str,
              retrain_fn: Callable | None = None) -> SelectionResult:
    if method == "voting":
        return aggregate_voting(ensemble, n)
    if method == "avg":
        return aggregate_avg(ensemble, n)
    if method == "min":
        if retrain_fn is None:
            raise ValueError("min aggregation needs a retrain function")
        return aggregate_min(ensemble, n, retrain_fn)
    raise ValueError(f"unknown aggregation {method!r}")


def hamming(a, b) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def intergroup_difference(decisions: GatingEnsemble | Sequence) -> float:
    """Mean pairwise Hamming distance between the groups' hard decisions."""
    if isinstance(decisions, GatingEnsemble):
        decisions = decisions.decisions()
    decisions = np.asarray(decisions)
    if len(decisions) < 2:
        raise ValueError("inter-group difference needs at least two groups")
    pairs = list(itertools.combinations(range(len(decisions)), 2))
    return float(np.mean([hamming(decisions[i], decisions[j]) for i, j in pairs]))
