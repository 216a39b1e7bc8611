"""Imbalanced-ratio table for a trained checkpoint.

Subsamples positives of the chosen split to each positive:negative ratio and
prints mean precision/recall/F1/AUC over repeats.

    python3 scripts/imbalanced_table.py DATA_DIR model.json --ratios 0.5 0.2 0.1
"""

import argparse

from mupod.data import Dataset
from mupod.evaluation import imbalanced_eval, pretty_table
from mupod.models import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data")
    ap.add_argument("checkpoint")
    ap.add_argument("--split", default="test")
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.5, 0.2, 0.1])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    m = Dataset.load(args.data).part(args.split)
    model = load_model(args.checkpoint)
    scores = model.predict_proba(m.patients)
    rows = imbalanced_eval(scores, m.labels, args.ratios, args.repeats, args.seed)
    print(pretty_table([{"model": model.kind, **{k: getattr(r, k) for k in ("ratio", "precision", "recall", "f1", "auc")}} for r in rows]))


if __name__ == "__main__":
    main()
