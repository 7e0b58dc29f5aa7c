"""Repeat the 100-scan g_om round trip over many seeds and summarise the pulls.

Usage: python scripts/gom_seed_sweep.py [n_seeds] [noise_rel] [gain_jitter]
"""

import sys
import time
import warnings

import numpy as np

from omcrystal.spectra import TWO_PI, PipelineSettings, ScanParams, analyze_scans, simulate_scans

TRUTH_HZ = 649e3


def main() -> None:
    n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 20
    noise = float(sys.argv[2]) if len(sys.argv) > 2 else 0.02
    jitter = float(sys.argv[3]) if len(sys.argv) > 3 else 0.25
    params = ScanParams(span_hz=160e6, step_hz=200e3, noise_rel=noise, gain_jitter=jitter)
    settings = PipelineSettings(bg_order=len(params.bg) - 1)
    pulls, sigmas, skipped = [], [], 0
    t0 = time.perf_counter()
    for seed in range(n_seeds):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = analyze_scans(simulate_scans(params, 100, seed=seed), params.tone(), params.temperature, settings)
        skipped += len(res.skipped)
        sigma = res.total_error / TWO_PI
        pulls.append((res.g_om / TWO_PI - TRUTH_HZ) / sigma)
        sigmas.append(sigma)
        print(f"seed {seed:3d}: g/2pi = {res.g_om / TWO_PI / 1e3:8.2f} kHz  sigma = {sigma / 1e3:5.2f} kHz  pull {pulls[-1]:+.2f}  warnings {len(caught)}")
    pulls = np.array(pulls)
    print(
        f"\n{n_seeds} seeds in {time.perf_counter() - t0:.0f} s: sigma {np.mean(sigmas) / 1e3:.2f} kHz, "
        f"pull mean {pulls.mean():+.2f} std {pulls.std(ddof=1):.2f}, |pull| > 3: {int(np.sum(np.abs(pulls) > 3))}, skipped scans {skipped}"
    )


if __name__ == "__main__":
    main()
