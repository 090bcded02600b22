"""
Artifact persistence.

- JSON: sorted keys, 2-space indent, trailing newline
- CSV: pandas, float_format "%.17g" (exact float round trip), "\\n" line endings
- NPY: numpy.save of float64 arrays
- Model directory: A.csv, B.csv, C.csv, theta.csv, hyperparams.toml
"""

from __future__ import annotations

import hashlib
import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .config import HyperParams, build_config
from .embedding import EmbeddingTable, SimilarityMatrix
from .factorization import FactorModel, TrainTrace
from .tensor import TensorMode, TransitionTensor

FLOAT_FORMAT = "%.17g"


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, Path):
        return value.as_posix()
    return value


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_frame(path: Path, dtype: dict[str, Any] | None = None) -> pd.DataFrame:
    return pd.read_csv(path, dtype=dtype, keep_default_na=False, na_values=[""])


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_flat_toml(path: Path, values: dict[str, Any]) -> Path:
    """`key = value` lines with sorted keys; scalars only."""
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, int):
            text = str(value)
        elif isinstance(value, float):
            text = repr(value) if math.isfinite(value) else ("nan" if math.isnan(value) else ("inf" if value > 0 else "-inf"))
        elif isinstance(value, str):
            text = json.dumps(value)
        else:
            raise TypeError(f"cannot write {key}={value!r} as a flat TOML value")
        lines.append(f"{key} = {text}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _matrix_frame(X: np.ndarray, index_name: str, index: Sequence[Any]) -> pd.DataFrame:
    frame = pd.DataFrame(X, columns=[f"r{r}" for r in range(X.shape[1])])
    frame.insert(0, index_name, list(index))
    return frame


def save_model(model: FactorModel, directory: Path, codes: Sequence[str]) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    write_frame(directory / "A.csv", _matrix_frame(model.A, "patient", range(model.A.shape[0])))
    write_frame(directory / "B.csv", _matrix_frame(model.B, "code", codes))
    write_frame(directory / "C.csv", _matrix_frame(model.C, "code", codes))
    names = [f"r{r}" for r in range(model.rank)] + ["intercept"]
    write_frame(directory / "theta.csv", pd.DataFrame({"parameter": names, "value": model.theta}))
    write_flat_toml(directory / "hyperparams.toml", model.hyper.model_dump(by_alias=True))
    return directory


def load_model(directory: Path) -> tuple[FactorModel, list[str]]:
    """Model plus the entity codes labelling the rows of B and C."""
    A = read_frame(directory / "A.csv").drop(columns=["patient"]).to_numpy(dtype=float)
    B_frame = read_frame(directory / "B.csv", dtype={"code": str})
    C_frame = read_frame(directory / "C.csv", dtype={"code": str})
    theta = read_frame(directory / "theta.csv")["value"].to_numpy(dtype=float)
    with open(directory / "hyperparams.toml", "rb") as f:
        hyper = build_config(HyperParams, tomllib.load(f))
    codes = [str(c) for c in B_frame["code"]]
    B = B_frame.drop(columns=["code"]).to_numpy(dtype=float)
    C = C_frame.drop(columns=["code"]).to_numpy(dtype=float)
    return FactorModel(A.reshape(-1, B.shape[1]), B, C, theta, hyper), codes


def save_trace(trace: TrainTrace, path: Path) -> Path:
    return write_frame(path, trace.to_frame())


def save_embeddings(table: EmbeddingTable, codes: Sequence[str], path: Path) -> Path:
    """One row per entity: code, kind of vector (input/output), then d floats."""
    d = table.d
    columns = [f"v{k}" for k in range(d)]
    frames = []
    for vector, X in (("input", table.input_vectors), ("output", table.output_vectors)):
        frame = pd.DataFrame(X, columns=columns)
        frame.insert(0, "vector", vector)
        frame.insert(0, "code", list(codes))
        frames.append(frame)
    return write_frame(path, pd.concat(frames, ignore_index=True))


def load_embeddings(path: Path) -> tuple[EmbeddingTable, list[str]]:
    frame = read_frame(path, dtype={"code": str})
    inputs = frame[frame["vector"] == "input"]
    outputs = frame[frame["vector"] == "output"]
    values = [c for c in frame.columns if c.startswith("v") and c[1:].isdigit()]
    table = EmbeddingTable(inputs[values].to_numpy(dtype=float), outputs[values].to_numpy(dtype=float))
    return table, [str(c) for c in inputs["code"]]


def save_similarity(similarity: SimilarityMatrix, path: Path, codes: Sequence[str] | None = None) -> Path:
    """`.npy` → numpy binary; otherwise dense CSV with a code header and a code column."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, np.ascontiguousarray(similarity.S, dtype=np.float64))
        return path
    labels = list(codes) if codes is not None else [str(j) for j in range(similarity.n_entities)]
    frame = pd.DataFrame(similarity.S, columns=labels)
    frame.insert(0, "code", labels)
    return write_frame(path, frame)


def load_similarity(path: Path) -> SimilarityMatrix:
    if path.suffix == ".npy":
        return SimilarityMatrix(np.load(path))
    return SimilarityMatrix(read_frame(path).drop(columns=["code"]).to_numpy(dtype=float))


def save_tensor(tensor: TransitionTensor, codes: Sequence[str], path: Path) -> Path:
    """Coordinate list CSV (patient_id, from_code, to_code, value) plus a `<name>.json` sidecar with shape and mode."""
    frame = pd.DataFrame(
        {
            "patient_id": tensor.subs[:, 0],
            "from_code": [codes[j] for j in tensor.subs[:, 1]],
            "to_code": [codes[k] for k in tensor.subs[:, 2]],
            "value": tensor.vals,
        }
    )
    write_frame(path, frame)
    write_json(path.with_suffix(".json"), {"shape": list(tensor.shape), "mode": tensor.mode.value, "codes": list(codes)})
    return path


def load_tensor(path: Path) -> tuple[TransitionTensor, list[str]]:
    meta = read_json(path.with_suffix(".json"))
    codes = [str(c) for c in meta["codes"]]
    index = {c: j for j, c in enumerate(codes)}
    frame = pd.read_csv(path, dtype={"from_code": str, "to_code": str}, keep_default_na=False)
    subs = np.column_stack(
        [
            frame["patient_id"].to_numpy(dtype=np.int64),
            frame["from_code"].map(index).to_numpy(dtype=np.int64),
            frame["to_code"].map(index).to_numpy(dtype=np.int64),
        ]
    ).reshape(-1, 3)
    tensor = TransitionTensor(tuple(meta["shape"]), subs, frame["value"].to_numpy(dtype=float), TensorMode(meta["mode"]))
    return tensor, codes
