"""Train MUPOD and both baselines on a generated cohort and print validation/test AUC.

    python3 scripts/synthetic_benchmark.py --strength 0.8 --seeds 0 1 2
"""

import argparse
import time

import numpy as np

from mupod.representation import PretrainConfig
from mupod.synthetic import GeneratorConfig, generate_dataset, oracle_score
from mupod.evaluation import auc
from mupod.training import TrainConfig, baseline_concat_lstm, baseline_single_transformer, build_mupod, fit


def run(seed: int, args) -> dict:
    gen = GeneratorConfig(
        n_patients=args.n_patients, n_months=args.n_months, strength=args.strength, rule=args.rule, lag=args.lag, seed=seed
    )
    data = generate_dataset(gen)
    recipe = TrainConfig(lr=args.lr, batch_size=64, iterations=args.iterations, eval_every=100, seed=seed)
    test = data.part("test")
    out = {"oracle": (np.nan, auc([oracle_score(p, data.truth) for p in test], test.labels))}
    t0 = time.perf_counter()
    r = fit(build_mupod(data, PretrainConfig(iterations=args.pretrain_iterations), seed=seed, finetune=args.finetune), data, recipe)
    out["mupod"] = (r.val.auc, r.test.auc)
    r = baseline_single_transformer(data, recipe)
    out["single-transformer"] = (r.val.auc, r.test.auc)
    r = baseline_concat_lstm(data, recipe)
    out["concat-lstm"] = (r.val.auc, r.test.auc)
    print(f"seed {seed}: {time.perf_counter() - t0:.0f}s", flush=True)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--n-patients", type=int, default=2000)
    ap.add_argument("--n-months", type=int, default=24)
    ap.add_argument("--strength", type=float, default=0.8)
    ap.add_argument("--rule", default="cross-stream")
    ap.add_argument("--lag", type=int, default=2)
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--pretrain-iterations", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--finetune", action="store_true")
    args = ap.parse_args()

    runs = [run(s, args) for s in args.seeds]
    print(f"\n{'model':<20} {'val AUC':>9} {'test AUC':>9}")
    for name in runs[0]:
        val = f"{np.mean([r[name][0] for r in runs]):.3f}" if name != "oracle" else "-"
        test = np.mean([r[name][1] for r in runs])
        print(f"{name:<20} {val:>9} {test:>9.3f}")


if __name__ == "__main__":
    main()
