"""Strict loading of the training-stats and attention-dump CSV schemas.

These readers validate column presence and parse numerics strictly; a
malformed or truncated file fails loudly with the offending column named.
No metric is recomputed here: the plots draw exactly what the producing
tool emitted.
"""

from __future__ import annotations

from pathlib import Path

import pandas as pd


class SchemaError(ValueError):
    """Input CSV does not match the documented schema."""


STATS_COLUMNS = ["iteration", "loss_rl", "loss_il", "loss_critic",
                 "train_SR", "val_SR", "val_SPL", "val_nDTW"]
ATTENTION_COLUMNS = ["step", "token_role", "token_index", "mean_score", "mean_weight"]
CENTROID_COLUMNS = ["episode", "step", "centroid", "selected_centroid"]
SUMMARY_COLUMNS = ["episode", "rho", "selected_rho", "n_steps"]


def _read(path, required: list[str], numeric: list[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: no such file")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {missing}")
    for col in numeric:
        # strict: every cell must be a float literal ("nan" allowed, "" is not)
        try:
            frame[col] = frame[col].map(float)
        except (ValueError, TypeError) as exc:
            raise SchemaError(f"{path}: column {col!r} is not numeric ({exc})")
    return frame


def load_stats(path) -> pd.DataFrame:
    return _read(path, STATS_COLUMNS, STATS_COLUMNS)


def load_attention(path) -> pd.DataFrame:
    numeric = ["step", "token_index", "mean_score", "mean_weight"]
    frame = _read(path, ATTENTION_COLUMNS, numeric)
    if frame.empty:
        raise SchemaError(f"{path}: attention dump has no rows")
    return frame


def load_centroids(path) -> pd.DataFrame:
    frame = _read(path, CENTROID_COLUMNS, CENTROID_COLUMNS)
    if frame.empty:
        raise SchemaError(f"{path}: centroid file has no rows")
    return frame


def load_summary(path) -> pd.DataFrame:
    return _read(path, SUMMARY_COLUMNS, SUMMARY_COLUMNS)
