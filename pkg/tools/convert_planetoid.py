"""Convert raw Planetoid files (ind.<name>.{x,tx,allx,y,ty,ally,graph,test.index}) to the dataset directory format.

    python tools/convert_planetoid.py RAW_DIR citeseer $FLATGRAPH_DATA/citeseer

Also writes ``planetoid.json`` holding the public split: the first 20 C
vertices train, the next 500 validation, the listed test indices test.
Test indices missing from the raw files (isolated CiteSeer vertices) get
zero features and class 0, the usual convention.
"""
import argparse
import json
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph")


def _load(raw: Path, name: str, part: str):
    with (raw / f"ind.{name}.{part}").open("rb") as fh:
        return pickle.load(fh, encoding="latin1")


def _dense(m) -> np.ndarray:
    return np.asarray(m.todense() if sp.issparse(m) else m, dtype=np.float64)


def convert(raw_dir, name: str, out_dir) -> dict:
    raw, out = Path(raw_dir), Path(out_dir)
    x, y, tx, ty, allx, ally, graph = (_load(raw, name, p) for p in PARTS)
    test_index = np.loadtxt(raw / f"ind.{name}.test.index", dtype=np.int64).reshape(-1)
    tx, ty, allx, ally = _dense(tx), _dense(ty), _dense(allx), _dense(ally)

    lo, hi = int(test_index.min()), int(test_index.max())
    if lo != allx.shape[0]:
        raise ValueError(f"test indices start at {lo}, expected {allx.shape[0]}")
    # row i of tx belongs to vertex test_index[i]
    full_tx = np.zeros((hi - lo + 1, tx.shape[1]))
    full_ty = np.zeros((hi - lo + 1, ty.shape[1]))
    full_tx[test_index - lo], full_ty[test_index - lo] = tx, ty
    features = np.vstack([allx, full_tx])
    onehot = np.vstack([ally, full_ty])
    labels = onehot.argmax(axis=1)

    n, f, c = features.shape[0], features.shape[1], onehot.shape[1]
    edges = {(min(a, b), max(a, b)) for a, nbrs in graph.items() for b in nbrs if a != b and max(a, b) < n}

    out.mkdir(parents=True, exist_ok=True)
    meta = {"num_vertices": n, "num_features": f, "num_classes": c, "multilabel": False}
    (out / "meta.json").write_text(json.dumps(meta) + "\n")
    features.astype("<f8").tofile(out / "features.f64")
    (out / "edges.tsv").write_text("".join(f"{a}\t{b}\n" for a, b in sorted(edges)))
    (out / "labels.txt").write_text("".join(f"{k}\n" for k in labels))
    n_train = _dense(y).shape[0]
    split = {"kind": "planetoid", "seed": None, "train": list(range(n_train)),
             "val": list(range(n_train, n_train + 500)), "test": sorted(test_index.tolist())}
    (out / "planetoid.json").write_text(json.dumps(split, separators=(",", ":")) + "\n")
    return meta | {"num_edges": len(edges)}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("raw_dir")
    p.add_argument("name", help="cora, citeseer or pubmed")
    p.add_argument("out_dir")
    args = p.parse_args(argv)
    try:
        info = convert(args.raw_dir, args.name.lower(), args.out_dir)
    except (OSError, pickle.UnpicklingError, ValueError) as exc:
        print(f"convert_planetoid: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(info))
    return 0


if __name__ == "__main__":
    sys.exit(main())
