"""Regenerate the shipped experiment configs from tools/hyperparameters.json.

    python3 tools/gen_configs.py [--out src/flatgraph/configs]

Each (model, dataset, split) cell yields a base config plus one per method,
named ``{model}_{dataset}_{split}[_{method}].json``; inductive cells go to
the ``inductive/`` subdirectory. Columns without a split generator in this
package (arXiv, PPI) are skipped.
"""
import argparse
import json
from pathlib import Path

HERE = Path(__file__).resolve().parent
SEEDS = "0..99"
SPLIT_NAMES = {"planetoid": "planetoid", "ra_pl": "ra_pl", "622": "s622"}


def _int(v):
    return int(round(v))


def model_block(arch, hp):
    m = {
        "arch": arch,
        "num_layers": _int(hp["num_layers"]),
        "hidden_dim": _int(hp["hidden_dim"]),
        "norm": hp["norm"],
        "residual": hp["residual"],
        "input_dropout": hp["input_dropout"],
        "model_dropout": hp["model_dropout"],
    }
    if arch == "gat":
        m.update(attn_dropout=hp["attn_dropout"], heads=_int(hp["heads"]))
    if arch == "graphmlp":
        m.update(nc_layer=_int(hp["nc_layer"]), nc_weight=hp["nc_weight"], tau=hp["tau"],
                 r=_int(hp["r"]), batch_fraction=hp["b"] / 100.0)
    return m


def methods(hp):
    ewa = {"ewa.begin": _int(hp["ewa_begin"]), "ewa.end": _int(hp["ewa_end"]), "ewa.alpha": hp["ewa_alpha"]}
    gasam = {"asam.rho": hp["asam"], "gsam.alpha": hp["gasam"], "gsam.adv": "asam"}
    return {
        "sam": {"sam.rho": hp["sam"]},
        "asam": {"asam.rho": hp["asam"]},
        "pgn": {"sam.rho": hp["sam"], "pgn.alpha": hp["pgn"], "pgn.adv": "sam"},
        "pgna": {"asam.rho": hp["asam"], "pgn.alpha": hp["pgna"], "pgn.adv": "asam"},
        "gsam": {"sam.rho": hp["sam"], "gsam.alpha": hp["gsam"], "gsam.adv": "sam"},
        "gasam": gasam,
        "swa": {"swa.begin": _int(hp["swa_begin"]), "swa.end": _int(hp["swa_end"])},
        "ewa": ewa,
        "anti_pgd": {"anti_pgd.sigma": hp["anti_pgd_sigma"], "anti_pgd.stop_epoch": _int(hp["anti_pgd_e"])},
        "saf": {"saf.lambda": hp["saf_lambda"], "saf.tau": hp["saf_tau"], "saf.start_epoch": 5, "saf.gap": 3},
        "ewa_gasam": {**ewa, **gasam},
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=HERE.parent / "src" / "flatgraph" / "configs")
    args = ap.parse_args()
    tables = json.loads((HERE / "hyperparameters.json").read_text())
    count = 0
    for key, cells in sorted(tables.items()):
        arch, mode = key.split("/")
        out_dir = args.out if mode == "transductive" else args.out / "inductive"
        out_dir.mkdir(parents=True, exist_ok=True)
        for cell, hp in sorted(cells.items()):
            dataset, split = cell.split("/")
            if split not in SPLIT_NAMES:
                continue
            stem = f"{arch}_{dataset}_{split}"
            base = {
                "dataset": dataset,
                "split": {"kind": SPLIT_NAMES[split]},
                "mode": mode,
                "model": model_block(arch, hp),
                "method": {},
                "optimizer": {"lr": hp["lr"], "weight_decay": hp["weight_decay"]},
                "training": {"patience": 100, "max_epochs": 20000},
                "seeds": SEEDS,
            }
            variants = {"": {}}
            variants.update({"_" + name: m for name, m in methods(hp).items()})
            for suffix, method in variants.items():
                # the combination config only exists where it is reported
                if suffix == "_ewa_gasam" and (arch, dataset, split, mode) != ("gcn", "citeseer", "ra_pl", "transductive"):
                    continue
                cfg = dict(base, name=stem + suffix, method=method,
                           output=f"runs/{mode}/{stem}{suffix}")
                (out_dir / f"{stem}{suffix}.json").write_text(json.dumps(cfg, indent=1) + "\n")
                count += 1
    print(f"wrote {count} configs to {args.out}")


if __name__ == "__main__":
    main()
