"""Iterative-unmasking schedules, mask construction, and delay-pattern layouts.

These utilities are shared by the non-autoregressive decoders (single-pass
masked prediction over continuous latents, and the per-codebook variant over
discrete codes) and by the parallel autoregressive code predictor, which uses
the delayed layout of the code matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .validation import ConfigurationError, DataError, as_generator, check_positive_int

UNMASK_CRITERIA = ("random", "highest_confidence", "lowest_confidence")


def cosine_gamma(r):
    """Masking-fraction schedule gamma(r) = cos(pi*r/2); 1 at r=0, 0 at r=1."""
    return np.cos(0.5 * math.pi * np.asarray(r, dtype=np.float64))


def get_gamma(name: str):
    if name != "cosine":
        raise ConfigurationError(f"unknown mask schedule {name!r}; supported: 'cosine'")
    return cosine_gamma


@dataclass
class MaskState:
    """Boolean mask over a token sequence; True marks a masked (hidden) position.

    The learnable embedding that replaces masked inputs lives in the model; this
    object only carries which positions it applies to.
    """

    mask: np.ndarray

    @property
    def n(self) -> int:
        return int(self.mask.shape[0])

    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def mask_sample(n: int, gamma=cosine_gamma, rng=None, r: float | None = None) -> MaskState:
    """Sample a training mask: r ~ U[0,1], mask round(gamma(r)*n) positions, at least one.

    `r` can be forced for tests.
    """
    check_positive_int(n, "n")
    rng = as_generator(rng)
    if r is None:
        r = float(rng.uniform())
    k = int(round(float(gamma(r)) * n))
    k = min(max(k, 1), n)  # always mask at least one position so the loss is never empty
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=k, replace=False)] = True
    return MaskState(mask)


def unmask_plan(n: int, steps: int, gamma=cosine_gamma) -> np.ndarray:
    """Number of tokens to reveal at each of `steps` decode steps; sums exactly to n.

    Step k targets n*(gamma((k-1)/K) - gamma(k/K)); fractional parts are settled
    by largest-remainder apportionment so the final plan is integral and total.
    """
    check_positive_int(n, "n")
    check_positive_int(steps, "steps")
    grid = np.arange(steps + 1, dtype=np.float64) / steps
    g = np.asarray(gamma(grid), dtype=np.float64)
    raw = n * (g[:-1] - g[1:])
    base = np.floor(raw).astype(np.int64)
    remainder = raw - base
    short = n - int(base.sum())
    if short > 0:
        # ties broken toward earlier steps for determinism
        order = np.lexsort((np.arange(steps), -remainder))
        base[order[:short]] += 1
    counts = base
    assert counts.sum() == n and (counts >= 0).all()
    return counts


def select_unmask(candidates, count: int, criterion: str = "random",
                  scores=None, rng=None) -> np.ndarray:
    """Pick `count` positions to reveal from `candidates`.

    Confidence criteria need per-candidate `scores`; ties are broken by
    ascending position. The random criterion ignores scores entirely.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if criterion not in UNMASK_CRITERIA:
        raise ConfigurationError(f"unknown unmask criterion {criterion!r}")
    if count > candidates.size:
        raise DataError(f"count={count} exceeds {candidates.size} candidates")
    if count == candidates.size:
        return np.sort(candidates)
    if criterion == "random":
        rng = as_generator(rng)
        return np.sort(rng.permutation(candidates)[:count])
    if scores is None:
        raise ConfigurationError(f"criterion {criterion!r} requires scores")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != candidates.shape:
        raise DataError("scores must align with candidates")
    key = -scores if criterion == "highest_confidence" else scores
    order = np.lexsort((candidates, key))
    return np.sort(candidates[order[:count]])


@dataclass(frozen=True)
class DelayLayout:
    """Per-layer temporal shift of an n x Q code matrix.

    Layer q is shifted down by q rows, padding the freed cells, so that row i of
    the padded matrix holds codes of decreasing layer-depth from progressively
    earlier frames. Inverting the layout recovers the original matrix exactly.
    """

    num_layers: int
    pad_value: int = -1

    def padded_length(self, n: int) -> int:
        return n + self.num_layers - 1

    def apply(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != self.num_layers:
            raise DataError(f"expected an (n, {self.num_layers}) code matrix, got {codes.shape}")
        n = codes.shape[0]
        out = np.full((self.padded_length(n), self.num_layers), self.pad_value,
                      dtype=codes.dtype)
        for q in range(self.num_layers):
            out[q:q + n, q] = codes[:, q]
        return out

    def invert(self, padded: np.ndarray) -> np.ndarray:
        padded = np.asarray(padded)
        q_count = self.num_layers
        if padded.ndim != 2 or padded.shape[1] != q_count:
            raise DataError(f"expected a padded (*, {q_count}) matrix, got {padded.shape}")
        n = padded.shape[0] - (q_count - 1)
        if n < 1:
            raise DataError("padded matrix shorter than the layout triangle")
        out = np.empty((n, q_count), dtype=padded.dtype)
        for q in range(q_count):
            column = padded[q:q + n, q]
            out[:, q] = column
            head = padded[:q, q]
            tail = padded[q + n:, q]
            if (column == self.pad_value).any():
                raise DataError(f"pad value inside the interior of layer {q}")
            if (head != self.pad_value).any() or (tail != self.pad_value).any():
                raise DataError(f"non-pad value in the triangle region of layer {q}")
        return out


def apply_delay(codes: np.ndarray, layout: DelayLayout) -> np.ndarray:
    return layout.apply(codes)


def invert_delay(padded: np.ndarray, layout: DelayLayout) -> np.ndarray:
    return layout.invert(padded)
