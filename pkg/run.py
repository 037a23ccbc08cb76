#!/usr/bin/env python3
"""
Surrogate DPM - Runner

Loads .env, then hands the command line to BACKEND.cli:

    python run.py simulate --scenario twotrt --censor --replicates 5
    python run.py evaluate RUNS/linear-0.0-0.0/rep_001 --model dpm --quick
    python run.py replicate --manifest manifest.json --jobs 8
    python run.py example
    python run.py report RUNS
"""

import os
import sys
from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent
sys.path.insert(0, str(BASE_DIR))
from SETTINGS import PYTHONDONTWRITEBYTECODE

os.environ["PYTHONDONTWRITEBYTECODE"] = str(PYTHONDONTWRITEBYTECODE)
sys.dont_write_bytecode = str(PYTHONDONTWRITEBYTECODE).strip().lower() in ("1", "true", "yes", "on")

from dotenv import load_dotenv
load_dotenv()


if __name__ == "__main__":
    from BACKEND.cli import main

    raise SystemExit(main(sys.argv[1:]))
