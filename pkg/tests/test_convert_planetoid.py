import importlib.util
import pickle
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from flatgraph.datasets import load_dataset, load_split

_spec = importlib.util.spec_from_file_location(
    "convert_planetoid", Path(__file__).parents[1] / "tools" / "convert_planetoid.py")
convert_planetoid = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(convert_planetoid)


def write_raw(raw, n_all, test_index, num_classes=2, f=3):
    """Vertex v has feature row [v, v, v] and class v % C, so placement is checkable."""
    raw.mkdir()
    onehot = lambda vs: np.eye(num_classes)[[v % num_classes for v in vs]]
    feats = lambda vs: sp.csr_matrix(np.repeat(np.array(vs, dtype=float)[:, None], f, axis=1))
    allv = list(range(n_all))
    parts = {
        "x": feats(allv[:2 * num_classes]), "y": onehot(allv[:2 * num_classes]),
        "allx": feats(allv), "ally": onehot(allv),
        "tx": feats(test_index), "ty": onehot(test_index),
        "graph": {0: [1, 1, 0], 1: [0, 2], 2: [1], max(test_index): [0]},
    }
    for k, v in parts.items():
        with (raw / f"ind.toy.{k}").open("wb") as fh:
            pickle.dump(v, fh)
    (raw / "ind.toy.test.index").write_text("".join(f"{i}\n" for i in test_index))


def test_converter_places_shuffled_and_missing_test_rows(tmp_path):
    test_index = [1009, 1005, 1007, 1006]  # 1008 missing, as for isolated CiteSeer vertices
    write_raw(tmp_path / "raw", 1005, test_index)
    info = convert_planetoid.convert(tmp_path / "raw", "toy", tmp_path / "out")
    assert info["num_vertices"] == 1010 and info["num_edges"] == 3
    g = load_dataset(tmp_path / "out")
    for v in test_index + [3, 500]:
        assert g.features[v].tolist() == [v] * 3 and g.labels[v] == v % 2
    assert g.features[1008].tolist() == [0.0] * 3 and g.labels[1008] == 0
    split = load_split(tmp_path / "out" / "planetoid.json")
    assert split.train.tolist() == [0, 1, 2, 3] and split.val.tolist() == list(range(4, 504))
    assert split.test.tolist() == sorted(test_index)


def test_converter_cli_reports_missing_files(tmp_path, capsys):
    assert convert_planetoid.main([str(tmp_path), "cora", str(tmp_path / "out")]) == 3
    assert "convert_planetoid" in capsys.readouterr().err
