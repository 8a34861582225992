"""Full-scale check of published pre-trained weights against their claimed accuracy.

Not part of the test suite: it needs the full EMNIST / CIFAR-10 / SVHN test
splits under $TRUNK_DATA_ROOT and one weights directory per dataset, laid out
like a build directory (tree.json + nodes/<id>/weights.{pt,json}).

    python scripts/verify_pretrained_claims.py --weights_root /path/to/weights
"""

import argparse
import json
import sys
from pathlib import Path

from trunkrepro.config import load_config
from trunkrepro.evaluator import verify_pretrained

REFERENCE = Path(__file__).resolve().parents[1] / "src" / "trunkrepro"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--weights_root", required=True)
    p.add_argument("--claims", default=str(REFERENCE / "reference" / "published_claims.json"))
    p.add_argument("--tolerance", type=float, default=0.001, help="absolute, as a fraction")
    p.add_argument("--datasets", nargs="+", default=["emnist", "cifar10", "svhn"])
    args = p.parse_args(argv)

    failed = 0
    for name in args.datasets:
        weights = Path(args.weights_root) / name
        config = load_config(REFERENCE / "configs" / f"{name}.yaml")
        report = verify_pretrained(weights, weights / "tree.json", config, args.claims,
                                   args.tolerance)
        print(json.dumps(report.to_dict(), sort_keys=True))
        failed += report.status != "pass"
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
