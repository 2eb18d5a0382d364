"""
Data files shipped with the pipeline: water type presets and published comparison tables.
"""

from pathlib import Path

DATA_DIR = Path(__file__).resolve().parent
