#!/usr/bin/env python3
"""
Earmark - Desk-Scale Pipeline Launcher

This script handles:
1. Python version check (requires 3.10+)
2. Dependency verification
3. Synthetic dataset generation (2,000 items)
4. Seeded 1,500/250/250 train/val/test split
5. Fine-tuning with wSCE + MAE, lambda = [0.1, 1]
6. Evaluation of the untrained and trained models, side by side

Usage:
    python start.py [output_dir]

Everything is written under output_dir (default: runs/desk).
"""

import sys
from pathlib import Path

SRC = Path(__file__).parent / "src"


# =============================================================================
# STARTUP CHECKS
# =============================================================================

def check_python_version():
    """Verify Python 3.10+ is installed"""
    print("[1/6] Checking Python version...", end=" ")

    if sys.version_info < (3, 10):
        print("[ERROR]")
        print()
        print("=" * 60)
        print("ERROR: Python 3.10 or higher is required")
        print("=" * 60)
        print(f"You are using Python {sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}")
        print()
        sys.exit(1)

    print(f"[OK] Python {sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}")


def check_dependencies():
    """Verify required packages are installed"""
    print("[2/6] Checking dependencies...", end=" ")

    missing = []
    required = {
        "numpy": "numpy",
        "scipy": "scipy",
        "click": "click",
        "colorama": "colorama",
        "dotenv": "python-dotenv",
        "faker": "Faker",
    }

    for module, package in required.items():
        try:
            __import__(module)
        except ImportError:
            missing.append(package)

    if missing:
        print("[ERROR]")
        print()
        print("Missing packages:")
        for pkg in missing:
            print(f"  - {pkg}")
        print()
        print("To install all dependencies, run:")
        print("  pip install -r requirements.txt")
        print()
        sys.exit(1)

    print("[OK]")


# =============================================================================
# PIPELINE
# =============================================================================

def run_step(label, argv):
    """Run one CLI command; stop the launcher if it fails."""
    from cli import main as cli_main

    print(label)
    code = cli_main(argv)
    if code != 0:
        print(f"      [ERROR] step failed with exit code {code}")
        sys.exit(code)


def run_pipeline(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    full = out_dir / "synthetic.tsv"
    split = out_dir / "split.tsv"
    trained = out_dir / "wsce_mae"
    baseline = out_dir / "untrained"

    run_step("[3/6] Generating synthetic data...", ["synth", "--out", str(full)])
    run_step("[4/6] Splitting 1,500/250/250...", ["split", "--dataset", str(full), "--out", str(split)])
    run_step(
        "[5/6] Training (wSCE + MAE, 50 epochs)...",
        ["train", "--dataset", str(split), "--preset", "wsce+mae", "--out", str(trained)],
    )
    print("[6/6] Evaluating...")
    run_step("      untrained model", ["evaluate", "--dataset", str(split), "--out", str(baseline)])
    run_step(
        "      trained model",
        ["evaluate", "--dataset", str(split), "--checkpoint", str(trained / "checkpoint.json"), "--out", str(trained)],
    )
    run_step(
        "      comparison",
        ["report", str(baseline / "metrics.jsonl"), str(trained / "metrics.jsonl"),
         "--title", "Held-out test set", "--out", str(out_dir / "comparison.txt")],
    )


def main():
    """Main entry point"""
    print()
    print("=" * 60)
    print("Earmark - listener-weighted audio-text relevance")
    print("=" * 60)
    print()

    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs") / "desk"
    try:
        check_python_version()
        check_dependencies()
        sys.path.insert(0, str(SRC))
        run_pipeline(out_dir)
    except KeyboardInterrupt:
        print()
        print("Interrupted.")
        sys.exit(130)

    print()
    print("=" * 60)
    print(f"Done. Results are in {out_dir}")
    print("=" * 60)


if __name__ == "__main__":
    main()
