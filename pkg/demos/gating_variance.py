"""Single-group gating vs. the K-group ensemble across seeds.

Runs both methods on one planted dataset and reports AUC mean and spread,
plus a lower gate learning rate for the single group.

    python3 demos/gating_variance.py [--rows 20000] [--seeds 0,1,2,3,4]
"""
import argparse

from nfsgate import PipelineConfig, desk_benchmark, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    data = desk_benchmark(rows=args.rows)
    seeds = [int(s) for s in args.seeds.split(",")]
    methods = ["ensemble", "gating", "gating:gate_lr_scale=0.1"]
    report = run_experiment(PipelineConfig(), methods, seeds, data)
    for method in methods:
        agg = report.aggregate(method)
        print(f"{method:>26}: AUC {agg['mean_auc']:.5f} +- {agg['std_auc']:.5f}, "
              f"recovered {agg['mean_recovery']:.1f}/6")


if __name__ == "__main__":
    main()
