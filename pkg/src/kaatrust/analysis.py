"""Exact combinatorics for choosing history size and threshold.

Two nodes each hold ``k`` distinct acquaintances drawn uniformly from a
population of ``n``.  The probability that they share at least ``p`` of them
is a hypergeometric tail.  All binomials are computed with Python integers
and the result is kept as a Fraction until the very end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CommonalityQuery",
    "DomainError",
    "TableRow",
    "Recommendation",
    "common_prob",
    "common_prob_exact",
    "complement_form",
    "hypergeometric_tail",
    "prob_table",
    "format_table",
    "table_csv",
    "recommend_params",
    "monte_carlo_common",
]


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class CommonalityQuery:
    n: int  # population size
    k: int  # history size
    p: int  # required common count

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"population must be positive, got n={self.n}")
        if not 0 < self.k <= self.n:
            raise DomainError(f"history size must satisfy 0 < k <= n, got k={self.k}, n={self.n}")
        if not 0 <= self.p <= self.k:
            raise DomainError(f"threshold must satisfy 0 <= p <= k, got p={self.p}, k={self.k}")


def complement_form(n: int, k: int, p: int) -> Fraction:
    """1 - C(n,k)^-2 * sum_{i<p} C(n,i) C(n-i,k-i) C(n-k,k-i)."""
    CommonalityQuery(n, k, p)
    below = sum(math.comb(n, i) * math.comb(n - i, k - i) * math.comb(n - k, k - i)
                for i in range(p))
    return 1 - Fraction(below, math.comb(n, k) ** 2)


def hypergeometric_tail(n: int, k: int, p: int) -> Fraction:
    """sum_{i>=p} C(k,i) C(n-k,k-i) / C(n,k)."""
    CommonalityQuery(n, k, p)
    above = sum(math.comb(k, i) * math.comb(n - k, k - i) for i in range(p, k + 1))
    return Fraction(above, math.comb(n, k))


def common_prob_exact(q: CommonalityQuery) -> Fraction:
    return complement_form(q.n, q.k, q.p)


def common_prob(q: CommonalityQuery | None = None, *, n: int | None = None,
                k: int | None = None, p: int | None = None) -> float:
    if q is None:
        q = CommonalityQuery(n, k, p)
    return float(common_prob_exact(q))


@dataclass(frozen=True)
class TableRow:
    k: int
    p: int
    probabilities: tuple  # ((population, probability), ...)

    def prob(self, population: int) -> float:
        return dict(self.probabilities)[population]


def prob_table(populations: Iterable[int], k_list: Iterable[int], p_list: Iterable[int]) -> list[TableRow]:
    """One row per (p, k), with the probability for every population."""
    populations = list(populations)
    k_list = list(k_list)
    rows = []
    for p in p_list:
        for k in k_list:
            probs = tuple((n, common_prob(CommonalityQuery(n, k, p))) for n in populations)
            rows.append(TableRow(k, p, probs))
    return rows


def format_table(rows: Sequence[TableRow]) -> str:
    if not rows:
        return ""
    populations = [n for n, _ in rows[0].probabilities]
    header = ["k", "p"] + [f"P(n={n})" for n in populations]
    body = [[str(r.k), str(r.p)] + [f"{100 * pr:.3f}%" for _, pr in r.probabilities] for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(line, widths))
                     for line in [header] + body)


def table_csv(rows: Sequence[TableRow]) -> str:
    lines = ["population,k,p,probability"]
    for r in rows:
        for n, pr in r.probabilities:
            lines.append(f"{n},{r.k},{r.p},{pr:.10f}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Recommendation:
    n: int
    k: int
    p: int
    probability: float


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def recommend_params(n: int, p: int | None = None) -> Recommendation:
    """Birthday-paradox sizing: k = n/ln n, p = sqrt(n/ln n), both rounded."""
    if n < 3:
        raise DomainError("sizing rule needs n >= 3")
    ratio = n / math.log(n)
    k = min(n, _round_half_up(ratio))
    if p is None:
        p = _round_half_up(math.sqrt(ratio))
    return Recommendation(n, k, p, common_prob(CommonalityQuery(n, k, p)))


def monte_carlo_common(n: int, k: int, p: int, samples: int, seed=None,
                       chunk: int = 50_000) -> tuple[float, float]:
    """Estimate P(|A & B| >= p) for two uniform random k-subsets of n.

    Returns (estimate, standard error).
    """
    CommonalityQuery(n, k, p)
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        a = np.argpartition(rng.random((m, n)), k - 1, axis=1)[:, :k]
        b = np.argpartition(rng.random((m, n)), k - 1, axis=1)[:, :k]
        in_a = np.zeros((m, n), dtype=bool)
        np.put_along_axis(in_a, a, True, axis=1)
        overlap = np.take_along_axis(in_a, b, axis=1).sum(axis=1)
        hits += int((overlap >= p).sum())
        done += m
    est = hits / samples
    return est, math.sqrt(max(est * (1 - est), 1e-300) / samples)
