#!/usr/bin/env python3
"""Rebuild MovieLens-100K `u.data` and `u.item` in their original wire format.

GroupLens is not always reachable, so this pulls the copy of ML-100K bundled
in the `pytorch-widedeep` wheel (parquet) and writes it back out as the
TAB-separated `u.data` and pipe-separated, Latin-1 encoded `u.item`.

    python3 scripts/fetch_movielens_100k.py [OUT_DIR]   # default: data/ml-100k
"""
import io
import math
import pathlib
import subprocess
import sys
import tempfile
import zipfile

import pandas as pd

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
PREFIX = "pytorch_widedeep/datasets/data/MovieLens100k_"


def field(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return str(value)


def main():
    root = pathlib.Path(__file__).resolve().parent.parent
    out = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else root / "data" / "ml-100k"
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", tmp, "pytorch-widedeep==1.7.0"],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as z:
            ratings = pd.read_parquet(io.BytesIO(z.read(PREFIX + "data.parquet.brotli")))
            items = pd.read_parquet(io.BytesIO(z.read(PREFIX + "items.parquet.brotli")))

    with open(out / "u.data", "w", encoding="ascii", newline="\n") as f:
        for row in ratings.itertuples(index=False):
            f.write(f"{row.user_id}\t{row.movie_id}\t{row.rating}\t{row.timestamp}\n")

    with open(out / "u.item", "w", encoding="latin-1", newline="\n") as f:
        for _, row in items.iterrows():
            head = [row["movie_id"], row["movie_title"], row["release_date"],
                    row["video_release_date"], row["IMDb_URL"]]
            flags = [int(row[g]) for g in GENRES]
            f.write("|".join([field(v) for v in head] + [str(x) for x in flags]) + "\n")

    print(f"wrote {len(ratings)} ratings and {len(items)} items to {out}")


if __name__ == "__main__":
    main()
