"""DNR ablation on the seeded removal scenes: scene MI per strategy, then
paired fine-tuning runs (convergence step, masked/full PSNR).

    python scripts/ablation.py --steps 3000 --out results/ablation.json
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from nperf.experiments import ACCEPTANCE_SCENES, ACCEPTANCE_STEPS, finetune_run, mi_by_strategy, removal_scene
from nperf.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=ACCEPTANCE_STEPS)
    ap.add_argument("--strategies", default="none,gwfa", help="strategies to fine-tune (comma separated)")
    ap.add_argument("--scenes", type=int, default=len(ACCEPTANCE_SCENES))
    ap.add_argument("--skip-train", action="store_true")
    ap.add_argument("--out", type=Path, default=None, help="optional JSON dump of every number")
    args = ap.parse_args()

    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    cfg = TrainConfig(max_steps=args.steps)
    rows = []
    for spec in ACCEPTANCE_SCENES[: args.scenes]:
        rs = removal_scene(spec)
        mi = mi_by_strategy(rs)
        print(f"scene seed={spec.seed} {spec.object.kind}: MI " + " ".join(f"{k}={v:.4f}" for k, v in mi.items()), flush=True)
        row = {"seed": spec.seed, "kind": spec.object.kind, "mi": mi, "runs": {}}
        if not args.skip_train:
            for s in strategies:
                t = time.perf_counter()
                r = finetune_run(rs, s, cfg)
                row["runs"][s] = {
                    "convergence_step": r.convergence_step,
                    "loss_first": float(r.trace[:8].mean()),
                    "loss_last": float(r.trace[-8:].mean()),
                    "masked_psnr": [r.masked_psnr_init, r.masked_psnr_final],
                    "full_psnr": [r.full_psnr_init, r.full_psnr_final],
                    "seconds": time.perf_counter() - t,
                }
                print(
                    f"  {s:5s} c.s.={r.convergence_step:5d}  masked PSNR {r.masked_psnr_init:6.2f} -> "
                    f"{r.masked_psnr_final:6.2f}  full PSNR {r.full_psnr_init:6.2f} -> {r.full_psnr_final:6.2f}",
                    flush=True,
                )
        rows.append(row)

    print("\nmean scene MI: " + " ".join(f"{k}={np.mean([r['mi'][k] for r in rows]):.4f}" for k in rows[0]["mi"]))
    for s in strategies if not args.skip_train else []:
        cs = np.mean([r["runs"][s]["convergence_step"] for r in rows])
        mp = np.mean([r["runs"][s]["masked_psnr"][1] for r in rows])
        print(f"mean {s:5s}: c.s. {cs:7.1f}  masked PSNR {mp:6.2f} dB")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"steps": args.steps, "scenes": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()
