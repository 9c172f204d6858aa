"""Count samples and their relative frequencies."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from deltamix.errors import InputError

__all__ = ["CountSample", "read_counts", "parse_counts"]


@dataclass(frozen=True)
class CountSample:
    """Observed counts ``Y_1..Y_n`` with relative frequencies ``nu_l``.

    ``frequencies`` has length ``max(Y) + 1``. The largest bin absorbs the
    rounding residue so the vector sums to one.
    """

    counts: np.ndarray
    frequencies: np.ndarray

    @classmethod
    def from_counts(cls, counts) -> "CountSample":
        y = np.asarray(counts)
        if y.ndim != 1 or y.size == 0:
            raise InputError("need a non-empty one-dimensional array of counts")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
                raise InputError("counts must be integers")
            y = y.astype(np.int64)
        y = y.astype(np.int64, copy=True)
        if np.any(y < 0):
            raise InputError("counts must be nonnegative")
        tally = np.bincount(y)
        nu = tally / y.size
        j = int(np.argmax(tally))
        nu[j] = 1.0 - math.fsum(np.delete(nu, j))
        y.setflags(write=False)
        nu.setflags(write=False)
        return cls(counts=y, frequencies=nu)

    @property
    def n(self) -> int:
        return int(self.counts.size)

    @property
    def max_count(self) -> int:
        return int(self.frequencies.size - 1)

    def truncated_frequencies(self, L: int) -> tuple[np.ndarray, int]:
        """Frequencies on ``l = 0..L-1`` with counts ``>= L`` folded into bin ``L-1``.

        Returns the vector and the number of folded observations.
        """
        nu = np.zeros(L)
        m = min(L, self.frequencies.size)
        nu[:m] = self.frequencies[:m]
        n_over = int(np.count_nonzero(self.counts >= L))
        if n_over:
            nu[L - 1] += self.frequencies[L:].sum()
        return nu, n_over


def parse_counts(text: str, source: str = "<input>") -> CountSample:
    """Parse one nonnegative integer per line.

    Blank lines and ``#`` comments are skipped. A first line that is not a
    number is taken as a CSV header (single-column CSV).
    """
    values = []
    header_allowed = True
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "," in line:
            cells = next(csv.reader([line]))
            if len(cells) != 1:
                raise InputError(f"{source}:{lineno}: expected a single column, got {len(cells)}")
            line = cells[0].strip()
        try:
            v = int(line)
        except ValueError:
            if header_allowed and not _looks_numeric(line):
                header_allowed = False
                continue
            raise InputError(f"{source}:{lineno}: not an integer count: {raw.strip()!r}") from None
        header_allowed = False
        if v < 0:
            raise InputError(f"{source}:{lineno}: negative count {v}")
        values.append(v)
    if not values:
        raise InputError(f"{source}: no counts found")
    return CountSample.from_counts(np.asarray(values, dtype=np.int64))


def _looks_numeric(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_counts(path) -> CountSample:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    return parse_counts(text, source=str(path))
