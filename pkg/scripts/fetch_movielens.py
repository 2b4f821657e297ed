#!/usr/bin/env python3
"""Fetch MovieLens 100K ratings into data/ml-100k/u.data.

Tries the GroupLens zip first. If that host is unreachable (e.g. behind a
package-only mirror), falls back to the copy bundled in the RecBole wheel
on PyPI, whose ``ml-100k.inter`` file is u.data with a header line.

    python scripts/fetch_movielens.py [--out data/ml-100k/u.data]
"""
import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"


def from_grouplens() -> bytes:
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        blob = resp.read()
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        return zf.read("ml-100k/u.data")


def from_recbole_wheel() -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "recbole", "--no-deps",
                        "--only-binary", ":all:", "-d", tmp, "-q"], check=True)
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            text = zf.read("recbole/dataset_example/ml-100k/ml-100k.inter").decode()
    lines = text.splitlines()[1:]  # drop the typed header
    return ("\n".join(lines) + "\n").encode()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1]
                                         / "data" / "ml-100k" / "u.data"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    try:
        data = from_grouplens()
        source = "grouplens"
    except Exception as exc:  # network or format trouble: use the mirror route
        print(f"GroupLens download failed ({exc}); trying the RecBole wheel", file=sys.stderr)
        data = from_recbole_wheel()
        source = "recbole wheel"
    n = data.count(b"\n")
    if n != 100000:
        print(f"unexpected line count {n}", file=sys.stderr)
        return 1
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    print(f"wrote {n} ratings to {out} (source: {source})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
