"""OOD scores with a common orientation: larger means more out-of-distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError

METHODS = ("heatmap", "msp", "energy")


@dataclass(frozen=True)
class DetectorConfig:
    threshold: float = 0.1

    def __post_init__(self):
        if not np.isfinite(self.threshold):
            raise ConfigurationError("detector threshold must be finite")


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    method: str
    membership: str  # "in", "out" or "?"
    score: float


def heatmap_score(heatmap: np.ndarray) -> float:
    """Mean over pixels of the channel-wise maximum absolute response."""
    return float(heatmap_scores(np.asarray(heatmap)[None])[0])


def heatmap_scores(heatmaps: np.ndarray) -> np.ndarray:
    """Batched :func:`heatmap_score` for (N, H, W, C) maps, float64 result.

    Pixels are summed by a fixed pairwise tree (neighbours first), so the
    result does not depend on array layout and short sums of decimal values
    such as (0.5 + 0.1) + (0.3 + 0.7) come out exact.
    """
    h = np.abs(np.asarray(heatmaps, dtype=np.float64))
    peak = h.max(axis=-1).reshape(len(h), -1)
    return _tree_sum(peak) / peak.shape[1]


def _tree_sum(rows: np.ndarray) -> np.ndarray:
    acc = rows
    while acc.shape[1] > 1:
        if acc.shape[1] % 2:
            acc = np.concatenate([acc, np.zeros((len(acc), 1))], axis=1)
        acc = acc[:, 0::2] + acc[:, 1::2]
    return acc[:, 0].copy()


def detect(score: float, config: DetectorConfig) -> str:
    """``"in"`` when the score does not exceed the threshold."""
    return "in" if score <= config.threshold else "out"


def msp_score(probs: np.ndarray) -> float:
    return float(msp_scores(np.asarray(probs)[None])[0])


def msp_scores(probs: np.ndarray) -> np.ndarray:
    """``1 - max_c p_c`` per row."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or np.any(p < -1e-6) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-4):
        raise InputError("msp_score needs rows of a probability distribution")
    return 1.0 - p.max(axis=1)


def energy_score(logits: np.ndarray, temperature: float = 1.0) -> float:
    return float(energy_scores(np.asarray(logits)[None], temperature)[0])


def energy_scores(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """``-T * logsumexp(logits / T)`` per row."""
    if not temperature > 0:
        raise ConfigurationError(f"energy temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return -temperature * lse


# ----------------------------------------------------------------------
# score files


def format_score(value: float) -> str:
    return np.format_float_positional(float(value), precision=9, unique=False, fractional=False, trim="-")


def write_scores(path, records) -> None:
    lines = [f"{r.sample_id}\t{r.method}\t{r.membership}\t{format_score(r.score)}\n" for r in records]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_scores(path) -> list[ScoreRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4 or parts[2] not in ("in", "out", "?"):
                raise InputError(f"{path}:{lineno}: malformed score record {line.rstrip()!r}")
            records.append(ScoreRecord(parts[0], parts[1], parts[2], float(parts[3])))
    return records
