"""Offline feature exporter for the event-level retrieval engine.

Samples frames from real video files at a fixed rate, embeds frames and
caption words into 512-dim vectors, and writes the engine's on-disk
formats: one feature file per video and per caption, a JSON-lines
manifest, a splits file, and a checksum ledger that makes re-runs
skip everything already exported.
"""

from .export import ExportJob, ExportReport, export
from .uemf import read_uemf, write_uemf

__all__ = ["ExportJob", "ExportReport", "export", "read_uemf", "write_uemf"]
