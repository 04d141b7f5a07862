"""Run the acceptance suite and print one pass/fail line per criterion."""
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    cmd = [sys.executable, "-m", "pytest", "-q", str(ROOT / "tests" / "test_acceptance.py"), *sys.argv[1:]]
    sys.exit(subprocess.call(cmd, cwd=ROOT))
