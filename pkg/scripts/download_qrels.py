#!/usr/bin/env python3
"""Download the public qrels needed for the real-data overlap audit.

Fetches the TREC 2019/2020 Deep Learning passage judgments and the
MS MARCO passage training judgments into a data directory (default
./data, override with --dest or XTRAP_DATA_DIR). With these in place,
the real-data acceptance test runs instead of being skipped:

    python scripts/download_qrels.py
    python -m pytest tests/test_acceptance.py -k overlap_real
"""

from __future__ import annotations

import argparse
import os
import sys
import urllib.request
from pathlib import Path

FILES = {
    "2019qrels-pass.txt": "https://trec.nist.gov/data/deep/2019qrels-pass.txt",
    "2020qrels-pass.txt": "https://trec.nist.gov/data/deep/2020qrels-pass.txt",
    "qrels.train.tsv": "https://msmarco.z22.web.core.windows.net/msmarcoranking/qrels.train.tsv",
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--dest",
        default=os.environ.get("XTRAP_DATA_DIR", "data"),
        help="directory for the downloaded qrels (default: ./data or $XTRAP_DATA_DIR)",
    )
    args = parser.parse_args()
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    for name, url in FILES.items():
        target = dest / name
        if target.exists():
            print(f"{target} already present, skipping")
            continue
        print(f"downloading {url} -> {target}")
        try:
            with urllib.request.urlopen(url) as response, open(target, "wb") as f:
                while chunk := response.read(1 << 20):
                    f.write(chunk)
        except OSError as e:
            print(f"failed to download {url}: {e}", file=sys.stderr)
            target.unlink(missing_ok=True)
            return 1
    print(f"done; point XTRAP_DATA_DIR at {dest.resolve()} if it is not ./data")
    return 0


if __name__ == "__main__":
    sys.exit(main())
