"""Offline plots for navigation training and attention dumps."""

from .charts import plot_attention_heatmap, plot_learning_curves, plot_progress_centroid
from .frames import SchemaError, load_attention, load_centroids, load_stats, load_summary

__all__ = [
    "plot_learning_curves", "plot_attention_heatmap", "plot_progress_centroid",
    "load_stats", "load_attention", "load_centroids", "load_summary", "SchemaError",
]
