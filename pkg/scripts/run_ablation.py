"""Generate the synthetic pair (if needed) and run an ablation matrix over seeds.

Example:
    python scripts/run_ablation.py --out runs/synergy --variants TM,TM-ML,SBL-All \
        --seeds 0,1,2 --set train.epochs=40
"""
import argparse
import logging
from pathlib import Path

from sbl.config import load_config
from sbl.synth import dataset_from_config
from sbl.training import VARIANTS, run_ablation_matrix


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.overrides)
    if not (Path(cfg.data.dir) / "inventory.tsv").exists():
        dataset_from_config(cfg.data)
    report = run_ablation_matrix(cfg, args.out, args.variants.split(","), [int(s) for s in args.seeds.split(",")])
    print(report.markdown())
    for name in report.variants:
        print(f"{name:<14} mean C-Bi Acc {report.mean_acc(name):.4f}")


if __name__ == "__main__":
    main()
