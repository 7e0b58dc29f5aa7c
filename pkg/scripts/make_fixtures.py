"""Regenerate the synthetic trace set shipped in omcrystal/fixtures/traces.

Three blue-side and three red-side scans from the shipped simulate configs,
written through the CLI so the manifest carries full provenance.
"""

import shutil
import sys
import tempfile
from pathlib import Path

from omcrystal.cli import main

DEST = Path(__file__).resolve().parents[1] / "src" / "omcrystal" / "fixtures" / "traces"


def run(config: str, scans: int, seed: int, out: Path) -> None:
    code = main(["simulate", "--config", config, "--scans", str(scans), "--seed", str(seed), "--out", str(out), "-q"])
    if code:
        sys.exit(code)


def main_() -> None:
    if DEST.exists():
        shutil.rmtree(DEST)
    DEST.mkdir(parents=True)
    with tempfile.TemporaryDirectory() as tmp:
        for tag, cfg, seed in (("blue", "pkg:simulate", 11), ("red", "pkg:simulate_red", 12)):
            out = Path(tmp) / tag
            run(cfg, 3, seed, out)
            for f in sorted(out.glob("scan_*.csv")):
                shutil.copy(f, DEST / f"{tag}_{f.name}")
            shutil.copy(out / "manifest.json", DEST / f"{tag}_manifest.json")
    print(f"wrote {len(list(DEST.glob('*.csv')))} traces to {DEST}")


if __name__ == "__main__":
    main_()
