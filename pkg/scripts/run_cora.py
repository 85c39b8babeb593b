"""Two-layer attention baseline on a citation dataset in node_dir format.

    python3 scripts/run_cora.py data/cora --seeds 5
"""

import argparse

import numpy as np

from dsgnn.graph import load_node_dataset, row_normalize
from dsgnn.models import ArchitectureSpec, build_model
from dsgnn.training import TrainConfig, train_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data_dir")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--variant", default="standard", choices=("standard", "jknet", "dsgnn"))
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--no-row-normalize", action="store_true")
    args = ap.parse_args()

    ds = load_node_dataset(args.data_dir)
    if not args.no_row_normalize:
        ds = ds.with_features(row_normalize(ds.graph.features))
    spec = ArchitectureSpec(variant=args.variant, depth=args.depth, hidden=8, num_heads=8, activation="elu",
                            feature_dropout=0.5, attention_dropout=0.5, num_classes=ds.num_classes)
    cfg = TrainConfig(epochs=args.epochs, optimizer="adam", lr=0.005, weight_decay=5e-4)
    accs = []
    for seed in range(args.seeds):
        m = build_model(spec, ds.graph.feature_dim, seed=seed)
        r = train_run(m, ds, cfg, seed=seed)
        accs.append(r.metrics["test"])
        print(f"seed {seed}: val {r.metrics['val']:.4f} test {r.metrics['test']:.4f} best_epoch {r.best_epoch}")
    sd = np.std(accs, ddof=1) if len(accs) > 1 else 0.0
    print(f"mean test accuracy {100 * np.mean(accs):.1f} ({100 * sd:.1f})")


if __name__ == "__main__":
    main()
