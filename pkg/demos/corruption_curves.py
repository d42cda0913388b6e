"""Fidelity curves of plain and Bayesian one-shot fine-tuning on the ring task.

Runs both arms for a few seeds, writes their metric CSVs under
``runs/demo_curves`` and prints the corruption summary table, the same one
``bdlab report`` produces.

    python3 demos/corruption_curves.py [n_seeds]
"""

import sys
from pathlib import Path

from bdlab import experiments as ex
from bdlab.config import load_config
from bdlab.metrics import write_metrics_csv
from bdlab.report import comparison_table, describe, format_table, load_runs

ROOT = Path(__file__).resolve().parents[1]


def main(n_seeds: int = 3):
    cfg = load_config(ROOT / "configs" / "ring.json")
    out = ROOT / "runs" / "demo_curves"
    print("pretraining ...")
    pretrained, _ = ex.run_pretrain(cfg)
    paths = []
    for bnn in (False, True):
        for seed in range(n_seeds):
            run = cfg.with_overrides(bnn=bnn, seed=seed)
            series = ex.run_finetune(run, pretrained, keep_states=False)
            d = out / ("bnn-on" if bnn else "bnn-off") / f"seed_{seed}"
            d.mkdir(parents=True, exist_ok=True)
            paths.append(write_metrics_csv(d / "metrics.csv", series.rows))
            f = [r.fidelity for r in series.rows]
            print(f"bnn={'on' if bnn else 'off'} seed={seed}: fidelity {f[0]:.3f} -> min {min(f):.3f} -> {f[-1]:.3f}")
    runs = load_runs(paths)
    for r, p in zip(runs, paths):
        r.arm = p.parent.parent.name
    for r in runs:
        print(describe(r))
    print(format_table(comparison_table(runs)))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
