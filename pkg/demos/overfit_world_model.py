"""Overfit a one-shot ring fine-tune and compare it with the Gaussian world model.

Pretrains the ring preset (about half a minute), fine-tunes on a single point
and prints, at a few checkpoints, the sigma1 implied by the network, the
zero-probe output and the scale-probe response next to their closed forms.

    python3 demos/overfit_world_model.py
"""

from pathlib import Path

import numpy as np

from bdlab import experiments as ex
from bdlab.analytic import estimate_sigma1
from bdlab.config import load_config
from bdlab.probes import fit_world_model, scale_probe, zero_probe

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "ring.json"


def main():
    cfg = load_config(CONFIG)
    cfg = cfg.with_overrides(seed=0)
    print("pretraining ...")
    pretrained, history = ex.run_pretrain(cfg)
    print(f"  final eval loss {history[-1]:.4f}")

    data = ex.few_shot_data(cfg)
    label = ex.fine_tune_label(cfg)
    sched = ex.schedule(cfg)
    anchor = data[0]
    print(f"anchor {np.round(anchor, 3)}")

    series = ex.run_finetune(cfg, pretrained, evaluate=False)
    for it in (0, 400, 1200, cfg.finetune.iterations):
        model = series.model_at(it)
        s1 = [estimate_sigma1(model, anchor, t, 64, label, sched) for t in (100, 300, 500)]
        z = zero_probe(model, cfg.probe.t_start, label, sched, data)
        world = fit_world_model(model, anchor, cfg.probe.t, label, sched)
        recs = scale_probe(model, cfg.probe.ks, cfg.probe.t, anchor, label, sched, world=world)
        print(f"iteration {it}")
        print(f"  sigma1 at t=100/300/500: {', '.join(f'{s:.3f}' for s in s1)}")
        print(f"  zero probe output {np.round(z['output'], 3)}, distance to anchor {z['dist_to_anchor']:.4f}")
        for r in recs:
            pred = "n/a" if r["analytic_scale"] is None else f"{r['analytic_scale']:.3f}"
            print(f"  scale probe k={r['k']:<4g} output scale {r['output_scale']:.3f} (world model {pred})")


if __name__ == "__main__":
    main()
