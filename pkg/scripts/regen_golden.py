#!/usr/bin/env python3
"""Regenerate tests/golden/hashes.json from tests/golden/golden.toml.

Runs the full CLI pipeline (gen-data -> train -> calibrate -> bench) into a
temporary directory and records the sha256 of every artifact. Run this after
any intentional change to numerics, artifact formats, or the golden config,
and commit the updated manifest together with the change.
"""

import hashlib
import json
import sys
import tempfile
from pathlib import Path

from exitflow import cli

GOLDEN_DIR = Path(__file__).resolve().parent.parent / "tests" / "golden"

ARTIFACTS = (
    "train.efc", "calib.efc", "eval.efc",
    "checkpoint.efc", "calibration.toml",
    "report.csv", "report.hist.csv", "report.toml",
)


def run_pipeline(out: Path) -> dict[str, str]:
    cfg = str(GOLDEN_DIR / "golden.toml")
    steps = (
        ["gen-data", "--config", cfg, "--out", str(out)],
        ["train", "--config", cfg, "--out", str(out)],
        ["calibrate", "--config", cfg, "--out", str(out),
         "--checkpoint", str(out / "checkpoint.efc")],
        ["bench", "--config", cfg, "--out", str(out),
         "--checkpoint", str(out / "checkpoint.efc"),
         "--calibration", str(out / "calibration.toml")],
    )
    for argv in steps:
        rc = cli.main(argv)
        if rc != 0:
            raise SystemExit(f"step {argv[0]} failed with exit code {rc}")
    return {name: hashlib.sha256((out / name).read_bytes()).hexdigest()
            for name in ARTIFACTS}


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        hashes = run_pipeline(Path(tmp) / "run")
    dest = GOLDEN_DIR / "hashes.json"
    dest.write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    print(f"wrote {dest}")
    for name, digest in sorted(hashes.items()):
        print(f"  {name}: {digest[:16]}...")
    return 0


if __name__ == "__main__":
    sys.exit(main())
