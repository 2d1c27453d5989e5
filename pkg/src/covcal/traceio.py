"""File formats: trace CSV/JSONL with a JSON schema header, trajectory logs,
versioned binary model files, overlay CSVs, and report JSON.

All writers are byte-deterministic: floats are emitted with shortest
round-trip repr, JSON keys are sorted, and no timestamps are embedded.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .calmaps import MatrixMap, MlpMap, ScalarMap
from .errors import InvalidInput, SchemaMismatch
from .filters import EstimateTrace
from .groundtruth import AlignmentTransform
from .statmath import EmpiricalDensity, chi2_pdf, tri_size

TRACE_SCHEMA = "covcal-trace"
TRAJ_SCHEMA = "covcal-traj"
MODEL_MAGIC = b"CVCM"
FORMAT_VERSION = 1


def _fmt(v) -> str:
    return repr(float(v))


def _dump_header(obj: dict) -> str:
    return "#" + json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _parse_header(line: str, schema: str) -> dict:
    if not line.startswith("#"):
        raise SchemaMismatch("missing JSON header line")
    try:
        header = json.loads(line[1:])
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"unparseable header: {exc}") from None
    if header.get("schema") != schema:
        raise SchemaMismatch(
            f"expected schema {schema!r}, found {header.get('schema')!r}"
        )
    if header.get("version") != FORMAT_VERSION:
        raise SchemaMismatch(f"unsupported version {header.get('version')!r}")
    return header


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------

DIFF_RULES = ("euclidean", "rotation-vector")


@dataclass(frozen=True)
class StateBlock:
    """Named contiguous slice of the state with its error-difference rule."""

    name: str
    size: int
    diff: str = "euclidean"

    def __post_init__(self):
        if self.diff not in DIFF_RULES:
            raise InvalidInput(f"unknown diff rule {self.diff!r}")
        if self.size < 1:
            raise InvalidInput("block size must be >= 1")
        if self.diff == "rotation-vector" and self.size != 3:
            raise InvalidInput("rotation-vector blocks must have size 3")


def default_blocks(n: int) -> tuple:
    return (StateBlock(name="state", size=n),)


def vio_blocks() -> tuple:
    """Translation / rotation-vector / velocity layout of a 9-dim VIO state."""
    return (
        StateBlock(name="translation", size=3),
        StateBlock(name="rotation", size=3, diff="rotation-vector"),
        StateBlock(name="velocity", size=3),
    )


@dataclass(frozen=True)
class TraceFile:
    """In-memory form of a trace log: header fields plus row arrays."""

    n: int
    m: int
    dt: float
    blocks: tuple
    k: np.ndarray        # (N,) int
    t: np.ndarray        # (N,)
    x_true: np.ndarray   # (N, n)
    x_hat: np.ndarray    # (N, n)
    p_hat: np.ndarray    # (N, n(n+1)/2)

    def __post_init__(self):
        if sum(b.size for b in self.blocks) != self.n:
            raise InvalidInput("state blocks must cover the state dimension")
        if np.any(np.diff(self.k) <= 0):
            raise InvalidInput("timestep indices must be strictly increasing")
        if self.p_hat.shape[1] != tri_size(self.n):
            raise InvalidInput("packed covariance width mismatch")

    @property
    def steps(self) -> int:
        return len(self.k)

    def block_slices(self):
        out = []
        start = 0
        for b in self.blocks:
            out.append((b, slice(start, start + b.size)))
            start += b.size
        return out

    def errors(self) -> np.ndarray:
        """Estimation errors with each block's declared difference rule."""
        e = np.empty_like(self.x_true)
        for b, sl in self.block_slices():
            if b.diff == "euclidean":
                e[:, sl] = self.x_true[:, sl] - self.x_hat[:, sl]
            else:
                r_true = Rotation.from_rotvec(self.x_true[:, sl])
                r_est = Rotation.from_rotvec(self.x_hat[:, sl])
                e[:, sl] = (r_true * r_est.inv()).as_rotvec()
        return e

    def replace_p_hat(self, packed: np.ndarray) -> "TraceFile":
        if packed.shape != self.p_hat.shape:
            raise InvalidInput("replacement covariance shape mismatch")
        return TraceFile(
            n=self.n, m=self.m, dt=self.dt, blocks=self.blocks,
            k=self.k, t=self.t, x_true=self.x_true, x_hat=self.x_hat,
            p_hat=packed,
        )


def trace_from_estimate(est: EstimateTrace, blocks=None) -> TraceFile:
    """Serializable trace from a simulation run."""
    n = est.n
    return TraceFile(
        n=n, m=est.y.shape[1], dt=est.dt,
        blocks=tuple(blocks) if blocks else default_blocks(n),
        k=np.arange(1, est.steps + 1),
        t=est.t, x_true=est.x_true, x_hat=est.x_hat, p_hat=est.p_hat,
    )


def _trace_header(tf: TraceFile) -> dict:
    return {
        "schema": TRACE_SCHEMA,
        "version": FORMAT_VERSION,
        "n": tf.n,
        "m": tf.m,
        "dt": tf.dt,
        "blocks": [
            {"name": b.name, "size": b.size, "diff": b.diff} for b in tf.blocks
        ],
    }


def _trace_columns(n: int) -> list:
    cols = ["k", "t"]
    cols += [f"x_true_{i}" for i in range(n)]
    cols += [f"x_hat_{i}" for i in range(n)]
    iu = np.triu_indices(n)
    cols += [f"p_hat_{i}_{j}" for i, j in zip(*iu)]
    return cols


def write_trace(path, tf: TraceFile) -> None:
    lines = [_dump_header(_trace_header(tf))]
    lines.append("# " + ",".join(_trace_columns(tf.n)))
    for i in range(tf.steps):
        row = [str(int(tf.k[i])), _fmt(tf.t[i])]
        row += [_fmt(v) for v in tf.x_true[i]]
        row += [_fmt(v) for v in tf.x_hat[i]]
        row += [_fmt(v) for v in tf.p_hat[i]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _blocks_from_header(header: dict, n: int) -> tuple:
    raw = header.get("blocks")
    if not raw:
        return default_blocks(n)
    return tuple(
        StateBlock(name=b["name"], size=int(b["size"]), diff=b.get("diff", "euclidean"))
        for b in raw
    )


def _trace_from_rows(header: dict, rows: np.ndarray) -> TraceFile:
    n = int(header["n"])
    width = 2 + 2 * n + tri_size(n)
    rows = np.atleast_2d(rows)
    if rows.shape[1] != width:
        raise SchemaMismatch(
            f"row width {rows.shape[1]} does not match header (expected {width})"
        )
    return TraceFile(
        n=n,
        m=int(header["m"]),
        dt=float(header["dt"]),
        blocks=_blocks_from_header(header, n),
        k=rows[:, 0].astype(int),
        t=rows[:, 1],
        x_true=rows[:, 2 : 2 + n],
        x_hat=rows[:, 2 + n : 2 + 2 * n],
        p_hat=rows[:, 2 + 2 * n :],
    )


def read_trace(path) -> TraceFile:
    """Read a trace in CSV (native) or JSONL form."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return _read_trace_jsonl(stripped)
    lines = text.splitlines()
    if not lines:
        raise SchemaMismatch("empty trace file")
    header = _parse_header(lines[0], TRACE_SCHEMA)
    data = [ln for ln in lines[1:] if ln and not ln.startswith("#")]
    if not data:
        raise SchemaMismatch("trace file has no rows")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in data])
    return _trace_from_rows(header, rows)


def _read_trace_jsonl(text: str) -> TraceFile:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = json.loads(lines[0])
    if header.get("schema") != TRACE_SCHEMA:
        raise SchemaMismatch("JSONL header missing covcal-trace schema")
    n = int(header["n"])
    rows = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        rows.append(
            [rec["k"], rec["t"], *rec["x_true"], *rec["x_hat"], *rec["p_hat"]]
        )
    return _trace_from_rows(header, np.asarray(rows, dtype=float))


# ---------------------------------------------------------------------------
# trajectory files (external ground truth)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryFile:
    """Timestamped positions with optional rotation-vector orientations."""

    t: np.ndarray
    position: np.ndarray           # (N, 3)
    rotation: Optional[np.ndarray] = None  # (N, 3) rotation vectors

    def __post_init__(self):
        if np.any(np.diff(self.t) <= 0):
            raise InvalidInput("trajectory timestamps must be strictly increasing")


def write_trajectory(path, traj: TrajectoryFile) -> None:
    header = {
        "schema": TRAJ_SCHEMA,
        "version": FORMAT_VERSION,
        "has_rotation": traj.rotation is not None,
    }
    cols = "t,px,py,pz" + (",rx,ry,rz" if traj.rotation is not None else "")
    lines = [_dump_header(header), "# " + cols]
    for i in range(len(traj.t)):
        row = [_fmt(traj.t[i])] + [_fmt(v) for v in traj.position[i]]
        if traj.rotation is not None:
            row += [_fmt(v) for v in traj.rotation[i]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trajectory(path) -> TrajectoryFile:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaMismatch("empty trajectory file")
    header = _parse_header(lines[0], TRAJ_SCHEMA)
    data = [ln for ln in lines[1:] if ln and not ln.startswith("#")]
    rows = np.array([[float(v) for v in ln.split(",")] for ln in data])
    has_rot = bool(header.get("has_rotation"))
    width = 7 if has_rot else 4
    if rows.shape[1] != width:
        raise SchemaMismatch("trajectory row width does not match header")
    return TrajectoryFile(
        t=rows[:, 0],
        position=rows[:, 1:4],
        rotation=rows[:, 4:7] if has_rot else None,
    )


def interpolate_trajectory(traj: TrajectoryFile, t_query) -> TrajectoryFile:
    """Linear interpolation onto query timestamps (slerp for rotations).

    Query times must lie inside the trajectory's time range.
    """
    t_query = np.asarray(t_query, dtype=float)
    if np.min(t_query) < traj.t[0] or np.max(t_query) > traj.t[-1]:
        raise InvalidInput("query timestamps outside trajectory range")
    pos = np.column_stack(
        [np.interp(t_query, traj.t, traj.position[:, i]) for i in range(3)]
    )
    rot = None
    if traj.rotation is not None:
        slerp = Slerp(traj.t, Rotation.from_rotvec(traj.rotation))
        rot = slerp(t_query).as_rotvec()
    return TrajectoryFile(t=t_query, position=pos, rotation=rot)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def _model_payload(model):
    if isinstance(model, ScalarMap):
        header = {"kind": "scalar", "dim": None}
        arrays = [("s", np.array([model.s]))]
    elif isinstance(model, MatrixMap):
        header = {"kind": "matrix", "dim": int(model.a.shape[0])}
        arrays = [("A", model.a)]
    elif isinstance(model, MlpMap):
        header = {
            "kind": "mlp",
            "dim": model.dim,
            "use_state": model.use_state,
            "state_dim": model.state_dim,
        }
        arrays = []
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            arrays.append((f"W{i}", w))
            arrays.append((f"b{i}", b))
    else:
        raise InvalidInput(f"cannot serialize {type(model).__name__}")
    header["arrays"] = [[name, list(arr.shape)] for name, arr in arrays]
    return header, arrays


def write_model(path, model) -> None:
    """Versioned little-endian binary model file with a JSON header."""
    header, arrays = _model_payload(model)
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
        fh.write(hdr)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_model(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise SchemaMismatch("not a covcal model file")
    version, hdr_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise SchemaMismatch(f"unsupported model version {version}")
    header = json.loads(raw[12 : 12 + hdr_len].decode("utf-8"))
    offset = 12 + hdr_len
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(float)
        arrays[name] = arr.reshape(shape)
        offset += count * 8
    kind = header["kind"]
    if kind == "scalar":
        return ScalarMap(s=float(arrays["s"][0]))
    if kind == "matrix":
        return MatrixMap(a=arrays["A"])
    if kind == "mlp":
        layers = sum(1 for name in arrays if name.startswith("W"))
        return MlpMap(
            dim=int(header["dim"]),
            use_state=bool(header["use_state"]),
            state_dim=int(header["state_dim"]),
            weights=[arrays[f"W{i}"] for i in range(layers)],
            biases=[arrays[f"b{i}"] for i in range(layers)],
        )
    raise SchemaMismatch(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# overlays, reports, transforms, training curves
# ---------------------------------------------------------------------------

def write_overlay(path, density: EmpiricalDensity, dof: int) -> None:
    """Four-column overlay CSV: x, empirical height, chi2 pdf, |difference|."""
    centers = density.centers
    pdf = chi2_pdf(centers, dof)
    header = {"schema": "covcal-overlay", "version": FORMAT_VERSION, "dof": dof}
    lines = [_dump_header(header), "# x,empirical,chi2,abs_diff"]
    for x, e, c in zip(centers, density.bin_heights, pdf):
        lines.append(
            ",".join([_fmt(x), _fmt(e), _fmt(c), _fmt(abs(e - c))])
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(path, report: dict) -> None:
    Path(path).write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_transform(path, transform: AlignmentTransform) -> None:
    write_report(path, {
        "schema": "covcal-transform",
        "version": FORMAT_VERSION,
        "rotation": transform.rotation.tolist(),
        "translation": transform.translation.tolist(),
    })


def write_curve(path, curve) -> None:
    """Training-curve CSV: iteration index and objective value."""
    lines = ["# iteration,loss"]
    for i, v in enumerate(np.asarray(curve, dtype=float)):
        lines.append(f"{i},{_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path) -> dict:
    """Parse a TOML configuration file."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)
