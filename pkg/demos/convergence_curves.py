"""Write open-gate and inter-group difference curves for one ensemble run.

    python3 demos/convergence_curves.py --out-dir /tmp/curves
Then plot <out-dir>/curves_open_gates.csv and curves_intergroup.csv.
"""
import argparse

from nfsgate import PipelineConfig, desk_benchmark, emit_report, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="curves_out")
    args = ap.parse_args()
    report = run_experiment(PipelineConfig(log_every=2), ["ensemble"], [args.seed],
                            desk_benchmark(rows=args.rows))
    paths = emit_report(report, args.out_dir, prefix="curves")
    for p in paths:
        print(p)
    ends = [r for r in report.cells[0].logs if r["phase"] == "search_epoch_end"]
    for r in ends:
        print(f"epoch {r['epoch']}: open gates {r['open_gates']}, "
              f"max inter-group diff {r['intergroup_diff']}")


if __name__ == "__main__":
    main()
