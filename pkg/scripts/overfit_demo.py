"""Overfit the default model on a handful of generated sequences and compare tracking to initialization.

    python3 scripts/overfit_demo.py --steps 5000 --out runs/overfit
    python3 scripts/overfit_demo.py --stop-when-met      # end as soon as EPE <= 0.1 x init and APD >= 80
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import torch

from anytime4d.evalmetrics import aggregate_reports
from anytime4d.inference import evaluate_model
from anytime4d.model import Model4D, ModelConfig
from anytime4d.scenegen import generate, random_spec
from anytime4d.training import TrainConfig, Trainer

EPE_RATIO, MIN_APD = 0.1, 80.0


def tracking(model, bundles):
    reports = [evaluate_model(model, b, metrics=("tracking",), name=f"seq{k}") for k, b in enumerate(bundles)]
    return aggregate_reports(reports)


def overfit(steps: int = 5000, sequences: int = 8, frames: int = 6, size: int = 64, seed: int = 0,
            lr: float = 1e-3, warmup: int = 100, eval_every: int = 500, stop_when_met: bool = False,
            out: Path | None = None, verbose: bool = True, **train_kw) -> dict:
    torch.manual_seed(seed)
    bundles = [generate(random_spec(seed + k, num_frames=frames, resolution=(size, size)))
               for k in range(sequences)]
    model = Model4D(ModelConfig())
    cfg = TrainConfig(steps=steps, lr=lr, warmup_steps=warmup, augment=False, seed=seed, **train_kw)
    trainer = Trainer(model, bundles, cfg)
    say = print if verbose else (lambda *a, **k: None)

    init = tracking(model, bundles)
    say(f"init   EPE {init.epe:.4f}  APD {init.apd:.2f}", flush=True)
    curve = [{"step": 0, "epe": init.epe, "apd": init.apd}]
    rows = []
    start = time.time()

    def on_step(step, br):
        rows.append(f"{step},{br.depth},{br.ray},{br.camera},{br.motion},{br.total}")
        if step % eval_every and step != steps:
            return False
        r = tracking(model, bundles)
        curve.append({"step": step, "epe": r.epe, "apd": r.apd, "seconds": time.time() - start})
        say(f"step {step:5d}  loss {br.total:8.4f}  EPE {r.epe:.4f}  APD {r.apd:.2f}  "
            f"{time.time() - start:.0f}s", flush=True)
        return stop_when_met and r.epe <= EPE_RATIO * init.epe and r.apd >= MIN_APD

    trainer.run(steps, on_step)
    final = tracking(model, bundles)
    result = {"init_epe": init.epe, "init_apd": init.apd, "final_epe": final.epe, "final_apd": final.apd,
              "epe_ratio": final.epe / init.epe, "steps": trainer.step, "max_steps": steps,
              "seconds": time.time() - start, "sequences": sequences, "frames": frames, "size": size,
              "seed": seed, "curve": curve}
    result["met"] = result["epe_ratio"] <= EPE_RATIO and final.apd >= MIN_APD
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.csv").write_text("step,depth,ray,camera,motion,total\n" + "\n".join(rows) + "\n")
        trainer.save(out / "checkpoint")
        (out / "result.json").write_text(json.dumps(result, indent=2))
    return result


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--sequences", type=int, default=8)
    ap.add_argument("--frames", type=int, default=6)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--warmup", type=int, default=100)
    ap.add_argument("--eval-every", type=int, default=500)
    ap.add_argument("--stop-when-met", action="store_true")
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    a = ap.parse_args(argv)
    result = overfit(a.steps, a.sequences, a.frames, a.size, a.seed, a.lr, a.warmup, a.eval_every,
                     a.stop_when_met, a.out)
    print(json.dumps({k: v for k, v in result.items() if k != "curve"}, indent=2))
    return result


if __name__ == "__main__":
    main()
