#!/usr/bin/env python3
# quickstart.py
"""
Quick start script for lrclone development.
"""

import subprocess
import sys


def main():
    print("lrclone Quick Start\n")

    print(f"Using Python {sys.version}")

    print("Installing lrclone in development mode...")
    subprocess.run([sys.executable, "-m", "pip", "install", "-e", ".[dev]"])

    print("Checking the installation...")
    subprocess.run([sys.executable, "-m", "lrclone.cli", "diagnose"])
    subprocess.run([sys.executable, "-m", "lrclone.cli", "verify", "--suite", "lemma1", "--trials", "10"])

    print("\nTry these commands:")
    print("  lrclone info                          # Presets and example pipeline")
    print("  lrclone params --preset lrc-1.5b      # Trainable parameters per sharing mode")
    print("  lrclone verify --suite all            # Exact checks")
    print("  pytest                                # Fast tests (add -m slow for the desk-scale run)")
    print("\nDesk-scale distillation:")
    print("  lrclone gen-corpus --out corpus.lrct")
    print("  lrclone train --preset tiny-debug --corpus corpus.lrct --out run/")


if __name__ == "__main__":
    main()
