"""Train and evaluate the full variant on a raw ASSISTments skill-builder export.

Converts the raw CSV to the canonical format, trains on a seeded student
subsample with 200-step windows, and prints the held-out test metrics.
The raw file is not bundled; pass its location via --raw.
"""

import argparse
import json
import sys
from pathlib import Path

from littrace.cli import main as cli


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--raw", required=True, help="raw skill-builder CSV")
    ap.add_argument("--output_dir", default="assist09_out")
    ap.add_argument("--limit_students", default="500")
    ap.add_argument("--max_epochs", default="30")
    args = ap.parse_args(argv)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    canon = str(out / "assist09.csv")
    rc = cli(
        ["prep", "--input", args.raw, "--format", "assist09", "--out", canon,
         "--stats", str(out / "stats.json"), "--id_map", str(out / "id_map.csv")]
    )
    if rc != 0:
        return rc

    run_dir = out / "full"
    rc = cli(
        ["train", "--dataset", canon, "--output_dir", str(run_dir),
         "--variant", "full", "--max_seq_len", "200", "--model_dim", "32",
         "--hidden_dim", "32", "--n_heads", "4", "--batch_size", "16",
         "--learning_rate", "0.0002", "--dropout", "0.0", "--patience", "10",
         "--max_epochs", args.max_epochs, "--seed", "0", "--split_seed", "0",
         "--limit_students", args.limit_students]
    )
    if rc != 0:
        return rc

    report = json.loads((run_dir / "report.json").read_text())
    print(
        f"\nfull variant on {args.limit_students} students: "
        f"test_auc {report['test_auc']:.4f}, test_acc {report['test_acc']:.4f}, "
        f"best epoch {report['best_epoch']}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
