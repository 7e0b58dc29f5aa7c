"""Dither lock versus side-of-fringe lock under a 10 % step in coupling efficiency.

Prints the settled offsets (in linewidths) before and after the step for both modes.
"""

from omcrystal.locksim import INFLECTION, LockConfig, PlantState, run_lock


def main() -> None:
    static = PlantState.from_q()
    stepped = PlantState.from_q(eta_step_time_s=3.0, eta_step_factor=1.1)
    print(f"inflection target {INFLECTION:.5f} linewidths")
    for mode in ("dither", "side"):
        cfg = LockConfig.tuned(static, 2, mode=mode)
        before = run_lock(static, cfg, 6.0).tail_offset()
        after = run_lock(stepped, cfg, 6.0).tail_offset()
        print(f"{mode:>6}: settled {before:.5f}, after step {after:.5f}, shift {after - before:+.5f}")


if __name__ == "__main__":
    main()
