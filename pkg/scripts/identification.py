"""Fully visible and hidden-neuron identification runs over several seeds.

Writes one comparison row per (setting, seed, student) to a CSV.
"""
import argparse
import csv
import time

from rsnnfit.experiments import fully_visible_plan, hidden_plan, run

FIELDS = ["setting", "seed", "student", "loss_spec", "psth_corr_mean", "psth_corr_sd",
          "nc_r2", "conn_r2", "test_nll", "error"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--settings", nargs="+", default=["visible", "hidden"])
    ap.add_argument("--out", default="identification.csv")
    args = ap.parse_args()
    plans = {"visible": fully_visible_plan, "hidden": hidden_plan}
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=FIELDS)
        w.writeheader()
        for setting in args.settings:
            for seed in args.seeds:
                t0 = time.perf_counter()
                rows = run(plans[setting](seed))
                for row in rows.values():
                    w.writerow({"setting": setting, "seed": seed, **row})
                    print(setting, seed, {k: row.get(k) for k in ("student", "nc_r2", "conn_r2")})
                f.flush()
                print(f"  {setting} seed {seed}: {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
