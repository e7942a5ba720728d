"""Multi-step log-likelihood curves for the teacher and for fitted students.

A fully visible teacher generates data; students trained with different loss
specs are clamped to held-out trials up to bin t and then run freely. The
curve shows how well each model predicts z[t + lag] as the free-running
horizon grows.
"""
import argparse
import csv
from dataclasses import replace

from rsnnfit.experiments import DESK_TRAIN, SPECS, student
from rsnnfit.metrics import multistep_curve
from rsnnfit.synthgen import StimulusRecipe, TeacherConfig, fit_student, generate_dataset, \
    make_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--t", type=int, default=100, help="last clamped bin is t - 1")
    ap.add_argument("--max-lag", type=int, default=20)
    ap.add_argument("--rollouts", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=DESK_TRAIN.max_epochs)
    ap.add_argument("--students", nargs="+", default=["mle", "mle+psth+nc_mse"])
    ap.add_argument("--out", default="multistep.csv")
    args = ap.parse_args()

    teacher, stim = make_teacher(TeacherConfig(10, 10, 2, seed=args.seed,
                                               stimulus=StimulusRecipe(500)))
    data = generate_dataset(teacher, stim, 200, 40, 100, seed=args.seed)
    models = {"teacher": teacher}
    train = replace(DESK_TRAIN, max_epochs=args.epochs)
    for name in args.students:
        res = fit_student(student(name, args.seed, spec=SPECS[name], train=train), teacher, data)
        if res.error:
            raise SystemExit(f"{name}: {res.error}")
        models[name] = res.params

    curves = {name: dict(multistep_curve(p, stim, data.test, args.t, args.max_lag,
                                         args.rollouts, seed=args.seed))
              for name, p in models.items()}
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lag"] + list(curves))
        for lag in range(args.max_lag + 1):
            w.writerow([lag] + [repr(curves[name][lag]) for name in curves])
    for name, c in curves.items():
        print(f"{name:>18}: lag 0 {c[0]:.4f}  lag {args.max_lag} {c[args.max_lag]:.4f}")


if __name__ == "__main__":
    main()
