"""Reading and writing datasets, models, reports and closed-loop traces.

JSON floats are written with Python's shortest round-trip representation
and CSV floats with 17 significant digits, so every save/load cycle is
bit-exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..averaging import WeightedModel, as_weighted
from ..dynamics import Dataset, SystemSpec
from ..edmd import GaussianNoiseModel, LinearEmbeddingModel, lift_from_dict

FMT = "%.17g"


def _fmt(v):
    return FMT % v


def matrix_to_dict(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {"rows": M.shape[0], "cols": M.shape[1], "data": M.ravel().tolist()}


def matrix_from_dict(d):
    return np.asarray(d["data"], dtype=float).reshape(d["rows"], d["cols"])


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# -- datasets ---------------------------------------------------------------


def save_dataset(ds: Dataset, path):
    """Write ``path`` (CSV) and its ``.json`` metadata sidecar.

    One row per visited state; the input column of a trajectory's final
    row is empty because successors are reconstructed from row adjacency.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, p = ds.X.shape[1], ds.U.shape[1]
    header = ["traj_id", "step", "partition"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(p)]
    ends = np.r_[np.flatnonzero(np.diff(ds.traj_id) != 0), len(ds) - 1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        start = 0
        for end in ends:
            for i in range(start, end + 1):
                w.writerow([int(ds.traj_id[i]), int(ds.step[i]), ds.partition[i]]
                           + [_fmt(v) for v in ds.X[i]] + [_fmt(v) for v in ds.U[i]])
            w.writerow([int(ds.traj_id[end]), int(ds.step[end]) + 1, ds.partition[end]]
                       + [_fmt(v) for v in ds.Y[end]] + [""] * p)
            start = end + 1
    meta = {
        "system": ds.system.to_dict(),
        "seed": ds.seed,
        "plan": {k: list(v) for k, v in (ds.plan or {}).items()},
        "n_samples": len(ds),
    }
    write_json(path.with_suffix(".json"), meta)


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    system = SystemSpec.from_dict(meta["system"])
    n, p = system.n, system.p
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    if header[:3] != ["traj_id", "step", "partition"] or len(header) != 3 + n + p:
        raise ValueError(f"{path}: unexpected dataset header {header}")
    X, U, Y, part, tid, stp = [], [], [], [], [], []
    for cur, nxt in zip(rows[:-1], rows[1:]):
        if cur[0] != nxt[0]:
            continue
        X.append([float(v) for v in cur[3:3 + n]])
        U.append([float(v) for v in cur[3 + n:]])
        Y.append([float(v) for v in nxt[3:3 + n]])
        part.append(cur[2])
        tid.append(int(cur[0]))
        stp.append(int(cur[1]))
    plan = {k: tuple(v) for k, v in meta.get("plan", {}).items()} or None
    return Dataset(
        system,
        np.array(X, dtype=float).reshape(-1, n),
        np.array(U, dtype=float).reshape(-1, p),
        np.array(Y, dtype=float).reshape(-1, n),
        np.array(part, dtype=str),
        np.array(tid, dtype=int),
        np.array(stp, dtype=int),
        meta.get("seed"),
        plan,
    )


# -- models -----------------------------------------------------------------


def model_to_dict(model: LinearEmbeddingModel, lift=None, system=None):
    d = {
        "type": "linear",
        "A": matrix_to_dict(model.A),
        "B": matrix_to_dict(model.B),
        "C": matrix_to_dict(model.C),
    }
    if model.noise is not None:
        d["sigma_x"] = model.noise.sigma_x.tolist()
        d["sigma_z"] = model.noise.sigma_z.tolist()
    if lift is not None:
        d["feature_map"] = lift.to_dict()
    if system is not None:
        d["system"] = system.to_dict()
    return d


def model_from_dict(d) -> LinearEmbeddingModel:
    noise = None
    if "sigma_x" in d:
        noise = GaussianNoiseModel(np.asarray(d["sigma_x"], dtype=float), np.asarray(d["sigma_z"], dtype=float))
    return LinearEmbeddingModel(matrix_from_dict(d["A"]), matrix_from_dict(d["B"]), matrix_from_dict(d["C"]), noise)


def weighted_to_dict(wm: WeightedModel, lift=None, system=None, elpds=None):
    d = {
        "type": "weighted",
        "A": matrix_to_dict(wm.A_bar),
        "B": matrix_to_dict(wm.B_bar),
        "CA": matrix_to_dict(wm.CA_bar),
        "CB": matrix_to_dict(wm.CB_bar),
        "w": wm.w.tolist(),
    }
    if elpds is not None:
        d["elpd"] = list(map(float, elpds))
    if lift is not None:
        d["feature_map"] = lift.to_dict()
    if system is not None:
        d["system"] = system.to_dict()
    return d


def weighted_from_dict(d) -> WeightedModel:
    return WeightedModel(
        matrix_from_dict(d["A"]),
        matrix_from_dict(d["B"]),
        matrix_from_dict(d["CA"]),
        matrix_from_dict(d["CB"]),
        np.asarray(d["w"], dtype=float),
    )


def save_model(path, model, lift=None, system=None, **extra):
    if isinstance(model, WeightedModel):
        d = weighted_to_dict(model, lift, system, extra.get("elpds"))
    else:
        d = model_to_dict(model, lift, system)
    write_json(path, d)


def load_model(path):
    """Load a model file; returns ``(model, lift, system)`` (lift/system may be None)."""
    d = read_json(path)
    model = weighted_from_dict(d) if d.get("type") == "weighted" else model_from_dict(d)
    lift = lift_from_dict(d["feature_map"]) if "feature_map" in d else None
    system = SystemSpec.from_dict(d["system"]) if "system" in d else None
    return model, lift, system


def load_predictor(path):
    """Load any model file as ``(WeightedModel, lift, system)``."""
    model, lift, system = load_model(path)
    if lift is None:
        raise ValueError(f"{path}: model file has no inline feature map")
    if isinstance(model, LinearEmbeddingModel):
        model = as_weighted(model)
    return model, lift, system


def save_features(path, lift):
    write_json(path, lift.to_dict())


def load_features(path):
    return lift_from_dict(read_json(path))


# -- reports ----------------------------------------------------------------


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def save_train_report(path, report):
    rows = [(i, tr, va) for i, (tr, va) in enumerate(zip(report.train_loss, report.val_loss))]
    write_csv(path, ["epoch", "train_loss", "val_loss"], rows)


def save_weights_report(path, elpds, w, n_heldout, partitions=None):
    d = {"elpd": list(map(float, elpds)), "w": list(map(float, w)), "n_heldout": int(n_heldout)}
    if partitions is not None:
        d["partitions"] = list(partitions)
    write_json(path, d)


def save_closed_loop(path, result):
    n, p = result.states.shape[1], result.inputs.shape[1]
    header = ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(p)]
    tracking = result.reference is not None
    if tracking:
        header.append("r")
    rows = []
    for k, t in enumerate(result.t):
        u = list(result.inputs[k]) if k < len(result.inputs) else [""] * p
        row = [float(t)] + list(map(float, result.states[k])) + [float(v) if v != "" else v for v in u]
        if tracking:
            row.append(float(result.reference[k][0]))
        rows.append(row)
    write_csv(path, header, rows)


def save_prediction(path, t, truth, pred):
    n = truth.shape[1]
    header = ["t"] + [f"x{i}_true" for i in range(n)] + [f"x{i}_pred" for i in range(n)]
    rows = [[float(tk)] + list(map(float, a)) + list(map(float, b)) for tk, a, b in zip(t, truth, pred)]
    write_csv(path, header, rows)
