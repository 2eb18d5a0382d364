#!/usr/bin/env python3
"""
Test runner for the pipeline: the whole suite with a coverage gate, the quick suite
without the slow end-to-end runs, or a single test file.
"""

import argparse
import subprocess
import sys
from pathlib import Path
from typing import Optional

PIPELINE_DIR = Path(__file__).parent
COVERAGE_GATE = 80


def pytest_command(
    target: str, fast: bool, coverage: bool, keyword: Optional[str] = None
) -> list[str]:
    command = [sys.executable, "-m", "pytest", target, "-v", "--tb=short"]
    if fast:
        command += ["-m", "not slow"]
    if keyword:
        command += ["-k", keyword]
    if coverage:
        command += [
            "--cov=src",
            "--cov-report=term-missing",
            "--cov-report=html:htmlcov",
            f"--cov-fail-under={COVERAGE_GATE}",
        ]
    return command


def run(command: list[str]) -> bool:
    """Runs pytest in the pipeline directory, streaming its output."""
    try:
        return subprocess.run(command, cwd=PIPELINE_DIR).returncode == 0
    except FileNotFoundError:
        print("❌ Python interpreter not found")
        return False


def main() -> int:
    parser = argparse.ArgumentParser(description="Run the pipeline test suite")
    parser.add_argument("pattern", nargs="?", help="test file under tests/, e.g. test_physics.py")
    parser.add_argument("--fast", action="store_true", help="skip tests marked slow")
    parser.add_argument("-k", dest="keyword", help="pytest keyword expression")
    args = parser.parse_args()

    if args.pattern:
        print(f"🎯 Running tests/{args.pattern}")
        ok = run(pytest_command(f"tests/{args.pattern}", args.fast, False, args.keyword))
    else:
        suite = "quick suite" if args.fast else "full suite"
        print(f"🧪 Running the pipeline {suite} (coverage gate {COVERAGE_GATE}%)")
        print("=" * 50)
        ok = run(pytest_command("tests/", args.fast, True, args.keyword))

    if ok:
        print("\n✅ All tests passed!")
        if not args.pattern:
            print("📈 Coverage report generated in htmlcov/")
        return 0
    print("\n❌ Some tests failed or coverage is below the gate")
    print("   Dev dependencies: pip install -r ../dev-requirements.txt")
    return 1


if __name__ == "__main__":
    sys.exit(main())
