"""
End-to-end test of the mock demo pipeline.
"""

import os
import sys

import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), "..", "src"))

from demo import run_demo_pipeline, work_dir_digest  # noqa: E402
from main import run_cli  # noqa: E402


@pytest.mark.slow
class TestDemoPipeline:
    """Test cases for run_demo_pipeline."""

    def test_demo_passes(self, tmp_path):
        """Every stage and check of the demo passes."""
        assert run_demo_pipeline(tmp_path / "demo", seed=0) == 0
        assert (tmp_path / "demo" / "report" / "results.csv").is_file()

    def test_demo_is_reproducible(self, tmp_path):
        """Two runs with the same seed write byte-identical work directories."""
        assert run_demo_pipeline(tmp_path / "one", seed=3) == 0
        assert run_demo_pipeline(tmp_path / "two", seed=3) == 0
        assert work_dir_digest(tmp_path / "one") == work_dir_digest(tmp_path / "two")

    def test_unwritable_work_dir_fails(self, tmp_path):
        """A work directory that cannot be created fails the demo."""
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory", encoding="utf-8")
        assert run_demo_pipeline(blocker / "demo") != 0

    def test_demo_command(self, tmp_path):
        """The demo subcommand runs the same pipeline."""
        assert run_cli(["demo", "--work-dir", str(tmp_path / "demo")]) == 0
