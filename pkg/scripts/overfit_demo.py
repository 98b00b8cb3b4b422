"""Memorise a 20-utterance toy set with SBL-All and print the learning curve."""
import argparse
import tempfile

from sbl import training as tr
from sbl.config import RunConfig
from sbl.synth import dataset_from_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--variant", default="SBL-All")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        cfg = RunConfig().apply([
            f"data.dir={tmp}", "data.words=10", "data.samples_per_word=1", "data.train_fraction=1.0",
            "model.dropout=0", f"train.variant={args.variant}", "train.batch_size=20", "train.lr_factor=1.0",
            f"train.max_steps={args.steps}", "train.eval_interval=100", f"train.seed={args.seed}",
        ])
        dataset_from_config(cfg.data)
        inv = tr.load_inventory(tmp)
        spec = tr.get_variant(args.variant)
        data = tr.load_split(tmp, "train", inv, inv.languages, spec.flag, cfg.model.max_len)
        result = tr.train(cfg, train_data=data, eval_data=data, inventory=inv)

    print(f"{len(data)} samples, {result.seconds:.1f}s")
    print(f"{'step':>6}{'loss':>10}{'C-Bi Acc':>10}")
    for r in result.metrics:
        if r.language == "all" and r.mode == "C-Bi":
            print(f"{r.step:>6}{result.losses[r.step - 1]:>10.4f}{r.acc:>10.3f}")


if __name__ == "__main__":
    main()
