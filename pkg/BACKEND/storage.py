"""
File schemas.

dataset.csv    s, y_obs, event, w_1..w_K, b_1..b_M           one row per subject
truth.csv      j, m, k, nu, mu, z, u, true_cluster          1-based indices
posterior.csv  iteration, parameter, index, value           long form, index 1-based (0 for scalars)
report.json    QualityReport, sorted keys
density.csv    x, dhat[, dhat0]
cell.npz       per-cell draw vectors, next to a DONE marker

Every reader/writer failure is re-raised as OSError naming the path.
"""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd

from BACKEND.dpm import PosteriorDraws
from BACKEND.trialgen import CONTROL, GroupTruth, TrialData

logger = logging.getLogger("surrogate_dpm.storage")

FLOAT_FORMAT = "%.17g"
DONE_MARKER = "DONE"


@contextmanager
def _io(path: Path):
    try:
        yield
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise OSError(f"{path}: {exc}") from exc


def _prepare(path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_dataset(data: TrialData, path: Path) -> Path:
    path = _prepare(path)
    K, M = data.n_treatments, data.n_biomarkers
    frame = pd.DataFrame({"s": data.s, "y_obs": data.y_obs, "event": data.event.astype(int)})
    for k in range(K):
        frame[f"w_{k + 1}"] = (data.treatment == k).astype(int)
    for m in range(M):
        frame[f"b_{m + 1}"] = (data.biomarker == m).astype(int)
    with _io(path):
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="NA")
    logger.info("wrote %s (%d subjects)", path, data.n_subjects)
    return path


def read_table(path: Path, **kwargs) -> pd.DataFrame:
    """Read a CSV written by this module: exact floats, only "NA" is missing."""
    path = Path(path)
    with _io(path):
        return pd.read_csv(path, float_precision="round_trip", keep_default_na=False, na_values=["NA"], **kwargs)


def read_dataset(path: Path) -> TrialData:
    path = Path(path)
    frame = read_table(path)
    w_cols = [c for c in frame.columns if c.startswith("w_")]
    b_cols = [c for c in frame.columns if c.startswith("b_")]
    w = frame[w_cols].to_numpy(dtype=int)
    b = frame[b_cols].to_numpy(dtype=int)
    if np.any(w.sum(axis=1) > 1) or np.any(b.sum(axis=1) != 1):
        raise ValueError(f"{path}: invalid treatment or biomarker indicators")
    return TrialData(
        s=frame["s"].to_numpy(dtype=float),
        y_obs=frame["y_obs"].to_numpy(dtype=float),
        event=frame["event"].to_numpy(dtype=int).astype(bool),
        treatment=np.where(w.sum(axis=1) == 1, w.argmax(axis=1), CONTROL),
        biomarker=b.argmax(axis=1),
        n_treatments=len(w_cols),
        n_biomarkers=len(b_cols),
    )


def write_truth(truth: list[GroupTruth], path: Path) -> Path:
    path = _prepare(path)
    frame = pd.DataFrame({
        "j": [g.j + 1 for g in truth],
        "m": [g.m + 1 for g in truth],
        "k": [g.k + 1 for g in truth],
        "nu": [g.nu for g in truth],
        "mu": [g.mu for g in truth],
        "z": [g.z for g in truth],
        "u": [g.u for g in truth],
        "true_cluster": pd.array([g.true_cluster for g in truth], dtype="Int64"),
    })
    with _io(path):
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="NA")
    return path


def read_truth(path: Path) -> list[GroupTruth]:
    frame = read_table(path, dtype={"true_cluster": "Int64"})
    return [
        GroupTruth(
            j=int(row.j) - 1, m=int(row.m) - 1, k=int(row.k) - 1,
            nu=float(row.nu), mu=float(row.mu), z=float(row.z), u=float(row.u),
            true_cluster=None if pd.isna(row.true_cluster) else int(row.true_cluster),
        )
        for row in frame.itertuples(index=False)
    ]


def posterior_frame(draws: PosteriorDraws) -> pd.DataFrame:
    pieces = []
    iterations = draws.iterations
    for name, values in (("nu", draws.nu), ("mu", draws.mu), ("eta", draws.eta), ("xi", draws.xi),
                         ("label", draws.labels + 1)):
        t, n = values.shape
        pieces.append(pd.DataFrame({
            "iteration": np.repeat(iterations, n),
            "parameter": name,
            "index": np.tile(np.arange(1, n + 1), t),
            "value": values.ravel().astype(float),
        }))
    for name, values in (("sigma_s", draws.sigma_s), ("sigma_y", draws.sigma_y),
                         ("alpha", draws.alpha), ("n_clusters", draws.n_clusters)):
        pieces.append(pd.DataFrame({
            "iteration": iterations, "parameter": name, "index": 0, "value": values.astype(float),
        }))
    return pd.concat(pieces, ignore_index=True)


def write_posterior(draws: PosteriorDraws, path: Path) -> Path:
    path = _prepare(path)
    with _io(path):
        posterior_frame(draws).to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="NA")
    logger.info("wrote %s (%d draws)", path, draws.n_draws)
    return path


def write_report(report: dict, path: Path) -> Path:
    path = _prepare(path)
    with _io(path):
        path.write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def read_report(path: Path) -> dict:
    path = Path(path)
    with _io(path):
        return json.loads(path.read_text(encoding="utf-8"))


def write_table(rows, path: Path) -> Path:
    path = _prepare(path)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
    with _io(path):
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="NA")
    return path


def save_cell(path: Path, **arrays) -> Path:
    """Store a finished cell's draws and drop the completion marker beside it."""
    path = _prepare(path)
    with _io(path):
        np.savez(path, **{k: np.asarray(v) for k, v in arrays.items()})
        (path.parent / DONE_MARKER).write_text("ok\n", encoding="utf-8")
    return path


def load_cell(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with _io(path):
        with np.load(path, allow_pickle=False) as npz:
            return {k: npz[k] for k in npz.files}


def is_done(cell_dir: Path) -> bool:
    return (Path(cell_dir) / DONE_MARKER).exists()
