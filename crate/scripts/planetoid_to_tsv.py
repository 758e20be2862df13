#!/usr/bin/env python3
"""Convert the Planetoid citation files (ind.<name>.x, .tx, .allx, .y, .ty,
.ally, .graph, .test.index) into the TSV dataset layout read by `bam`.

Usage: planetoid_to_tsv.py RAW_DIR NAME OUT_DIR

The split is the standard one: the first len(y) nodes train, the next 500
validate, and the nodes listed in test.index test. Citeseer test indices
with no node are kept as unlabeled feature-less rows, as in the reference
preprocessing.
"""

import argparse
import hashlib
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

VAL_NODES = 500


def load(raw: Path, name: str, part: str):
    with open(raw / f"ind.{name}.{part}", "rb") as f:
        return pickle.load(f, encoding="latin1")


def dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write(out: Path, name: str, lines) -> dict:
    text = "".join(lines)
    (out / name).write_text(text)
    return {"path": name, "sha256": hashlib.sha256(text.encode()).hexdigest()}


def convert(raw: Path, name: str, out: Path) -> None:
    x, tx, allx = (dense(load(raw, name, p)) for p in ("x", "tx", "allx"))
    y, ty, ally = (np.asarray(load(raw, name, p)) for p in ("y", "ty", "ally"))
    graph = load(raw, name, "graph")
    test_idx = [int(line) for line in (raw / f"ind.{name}.test.index").read_text().split()]
    test_sorted = sorted(test_idx)

    if name == "citeseer":
        full = range(test_sorted[0], test_sorted[-1] + 1)
        tx_ext = np.zeros((len(full), tx.shape[1]))
        tx_ext[np.array(test_sorted) - test_sorted[0], :] = tx
        ty_ext = np.zeros((len(full), ty.shape[1]))
        ty_ext[np.array(test_sorted) - test_sorted[0], :] = ty
        tx, ty = tx_ext, ty_ext
        test_sorted = list(full)

    features = np.vstack([allx, tx])
    onehot = np.vstack([ally, ty])
    features[test_idx, :] = features[test_sorted, :]
    onehot[test_idx, :] = onehot[test_sorted, :]
    n, classes = features.shape[0], onehot.shape[1]

    split = ["none"] * n
    for i in range(len(y)):
        split[i] = "train"
    for i in range(len(y), len(y) + VAL_NODES):
        split[i] = "val"
    for i in test_idx:
        split[i] = "test"
    labeled = onehot.sum(axis=1) > 0
    for i in range(n):
        if not labeled[i]:
            split[i] = "none"

    edges = set()
    for a, nbrs in graph.items():
        for b in nbrs:
            if a != b and a < n and b < n:
                edges.add((min(a, b), max(a, b)))

    out.mkdir(parents=True, exist_ok=True)
    files = {
        "features": write(out, "features.tsv", (f"{i}\t" + "\t".join(fmt(v) for v in features[i]) + "\n" for i in range(n))),
        "edges": write(out, "edges.tsv", (f"{a}\t{b}\n" for a, b in sorted(edges))),
        "labels": write(out, "labels.tsv", (f"{i}\t{int(onehot[i].argmax())}\n" for i in range(n))),
        "splits": write(out, "splits.tsv", (f"{i}\t{split[i]}\n" for i in range(n))),
    }
    manifest = [f'name = "{name}"\n', f"classes = {classes}\n", "row_normalize = true\n"]
    for key, entry in files.items():
        manifest += [f"\n[{key}]\n", f'path = "{entry["path"]}"\n', f'sha256 = "{entry["sha256"]}"\n']
    (out / "manifest.toml").write_text("".join(manifest))
    print(f"{name}: {n} nodes, {features.shape[1]} features, {classes} classes, {len(edges)} edges -> {out}")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("raw_dir", type=Path)
    ap.add_argument("name", choices=["cora", "citeseer", "pubmed"])
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()
    convert(args.raw_dir, args.name, args.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
