"""Materialize the MovieLens-100K raw files (u.data, u.user, u.item, u1..u5 splits).

The GroupLens host is not always reachable, so the ratings, user and item
tables are taken from the copy bundled in the ``recbole`` wheel on PyPI (its
``ml-100k.inter`` keeps the row order of ``u.data``). The five splits are then
regenerated with the rule of the dataset's own ``mku.sh``: split N takes rows
(N-1)*20000+1 .. N*20000 of ``u.data`` as the test set and the remainder as
the training set, both sorted by user then item.

Only the fields used numerically are faithful. ``u.item`` titles come from
recbole without the year suffix, and release dates and IMDb URLs are left empty.

Usage::

    python tools/fetch_ml100k.py [OUT_DIR]      # default: data/ml-100k
"""

import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
PREFIX = "recbole/dataset_example/ml-100k/ml-100k."


def _read_member(zf, suffix):
    with zf.open(PREFIX + suffix) as fh:
        rows = io.TextIOWrapper(fh, encoding="utf-8").read().splitlines()
    return [r.split("\t") for r in rows[1:]]


def _wheel_path(tmp):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
         "-d", tmp, "recbole==1.2.1"],
        check=True,
    )
    return next(Path(tmp).glob("recbole-*.whl"))


def _sorted_lines(rows):
    rows = sorted(rows, key=lambda r: (int(r[0]), int(r[1])))
    return "".join("\t".join(r) + "\n" for r in rows)


def main(out_dir="data/ml-100k"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        with zipfile.ZipFile(_wheel_path(tmp)) as zf:
            inter = _read_member(zf, "inter")
            users = _read_member(zf, "user")
            items = _read_member(zf, "item")

    data = [r[:4] for r in inter]
    if len(data) != 100000:
        raise SystemExit(f"expected 100000 ratings, got {len(data)}")
    (out / "u.data").write_text("".join("\t".join(r) + "\n" for r in data))
    (out / "u.user").write_text("".join("|".join(r) + "\n" for r in users))

    lines = []
    for item_id, title, _year, classes in items:
        present = set(classes.split(" "))
        flags = ["1" if g in present else "0" for g in GENRES]
        lines.append("|".join([item_id, title, "", "", ""] + flags) + "\n")
    (out / "u.item").write_bytes("".join(lines).encode("latin-1", "replace"))

    for n in range(1, 6):
        lo, hi = (n - 1) * 20000, n * 20000
        (out / f"u{n}.test").write_text(_sorted_lines(data[lo:hi]))
        (out / f"u{n}.base").write_text(_sorted_lines(data[:lo] + data[hi:]))
    print(f"wrote ML-100K files to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
