"""File formats: JSON model configs, JSONL event logs, CSV tables and
run manifests.

Complex numbers are written as ``[re, im]`` pairs and floats with 17
significant digits so that every 64-bit value round-trips exactly.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .engine import EventLog, EventRecord
from .errors import ValidationError
from .model import NORM_TOL, HybridModel, PureHybridState, build_chain_model, build_model

FORMAT_VERSION = 1


def fmt(x: float) -> str:
    """Decimal text with 17 significant digits."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x!r}")
    return format(x, ".17g")


# -- matrices and vectors ---------------------------------------------------------

def _complex(z, where: str) -> complex:
    if isinstance(z, (int, float)) and not isinstance(z, bool):
        return complex(z)
    if isinstance(z, (list, tuple)) and len(z) == 2 and all(
        isinstance(c, (int, float)) and not isinstance(c, bool) for c in z
    ):
        return complex(z[0], z[1])
    raise ValidationError(f"{where}: expected a number or an [re, im] pair, got {z!r}")


def matrix_from_json(data, where: str) -> np.ndarray:
    if not isinstance(data, list) or not data or not all(isinstance(r, list) for r in data):
        raise ValidationError(f"{where}: expected a nonempty list of rows")
    width = len(data[0])
    if any(len(r) != width for r in data):
        raise ValidationError(f"{where}: rows have different lengths")
    return np.array(
        [[_complex(z, f"{where}[{i}][{j}]") for j, z in enumerate(r)] for i, r in enumerate(data)],
        dtype=np.complex128,
    )


def vector_from_json(data, where: str) -> np.ndarray:
    if not isinstance(data, list) or not data:
        raise ValidationError(f"{where}: expected a nonempty list")
    return np.array([_complex(z, f"{where}[{i}]") for i, z in enumerate(data)], dtype=np.complex128)


def vector_to_json(v) -> list:
    return [[float(z.real), float(z.imag)] for z in np.asarray(v)]


# -- models ---------------------------------------------------------------------------

def _load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"{path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be a JSON object")
    return data


def _sector_ref(ref, names: dict[str, int], m: int, where: str) -> int:
    if isinstance(ref, bool):
        raise ValidationError(f"{where}: invalid sector reference {ref!r}")
    if isinstance(ref, int):
        if not 0 <= ref < m:
            raise ValidationError(f"{where}: sector index {ref} out of range")
        return ref
    if isinstance(ref, str) and ref in names:
        return names[ref]
    raise ValidationError(f"{where}: unknown sector {ref!r}")


def model_from_config(cfg: dict) -> HybridModel:
    """Build and validate a model from the decoded JSON config."""
    if "chain" in cfg:
        ch = cfg["chain"]
        if not isinstance(ch, dict):
            raise ValidationError("chain: expected an object")
        try:
            dim = int(ch["dim"])
            H = matrix_from_json(ch["hamiltonian"], "chain.hamiltonian")
            couplings = {}
            for i, c in enumerate(ch.get("couplings", [])):
                off = int(c["offset"])
                if off in couplings:
                    raise ValidationError(f"chain.couplings[{i}]: duplicate offset {off}")
                couplings[off] = matrix_from_json(c["matrix"], f"chain.couplings[{i}].matrix")
        except KeyError as exc:
            raise ValidationError(f"chain: missing field {exc.args[0]!r}") from exc
        return build_chain_model(dim, H, couplings)
    for key in ("sectors", "hamiltonians"):
        if key not in cfg:
            raise ValidationError(f"missing field {key!r}")
    sectors = cfg["sectors"]
    hams = cfg["hamiltonians"]
    if not isinstance(sectors, list) or not isinstance(hams, list):
        raise ValidationError("sectors and hamiltonians must be lists")
    if len(sectors) != len(hams):
        raise ValidationError(f"{len(sectors)} sectors but {len(hams)} hamiltonians")
    names, dims, H = [], [], []
    for a, sec in enumerate(sectors):
        if not isinstance(sec, dict) or "dim" not in sec:
            raise ValidationError(f"sectors[{a}]: expected an object with 'dim'")
        names.append(str(sec.get("name", a)))
        dims.append(int(sec["dim"]))
        M = matrix_from_json(hams[a], f"hamiltonians[{a}]")
        if M.shape != (dims[a], dims[a]):
            raise ValidationError(f"hamiltonians[{a}]: shape {M.shape} does not match dim {dims[a]}")
        H.append(M)
    if len(set(names)) != len(names):
        raise ValidationError("sector names must be unique")
    lookup = {n: i for i, n in enumerate(names)}
    g = {}
    for i, c in enumerate(cfg.get("couplings", [])):
        where = f"couplings[{i}]"
        if not isinstance(c, dict) or not {"to", "from", "matrix"} <= set(c):
            raise ValidationError(f"{where}: expected an object with 'to', 'from', 'matrix'")
        b = _sector_ref(c["to"], lookup, len(names), f"{where}.to")
        a = _sector_ref(c["from"], lookup, len(names), f"{where}.from")
        if (b, a) in g:
            raise ValidationError(f"{where}: duplicate coupling ({b}, {a})")
        g[(b, a)] = matrix_from_json(c["matrix"], f"{where}.matrix")
    return build_model(H, g, names=names)


def parse_model(path) -> HybridModel:
    data = _load_json(path)
    try:
        return model_from_config(data)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def serialize_model(model: HybridModel, initial: PureHybridState | None = None) -> str:
    cfg = model.to_config()
    if initial is not None:
        cfg["initial"] = {"sector": initial.sector, "psi": vector_to_json(initial.psi)}
    return _pretty(cfg) + "\n"


def _pretty(obj, indent: int = 0) -> str:
    """JSON with one matrix row (or vector) per line."""
    pad = " " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_pretty(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + " " * indent + "}"
    if isinstance(obj, list) and obj and isinstance(obj[0], (dict, list)) and not _is_row(obj):
        items = [pad + _pretty(v, indent + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + " " * indent + "]"
    return json.dumps(obj, separators=(", ", ": "))


def _is_row(obj) -> bool:
    return all(isinstance(z, list) and len(z) == 2 and all(isinstance(c, (int, float)) for c in z) for z in obj)


def initial_state_from_config(cfg: dict, model: HybridModel) -> PureHybridState:
    """Initial state from the optional ``initial`` field; defaults to the
    first basis vector of sector 0.  Vectors that are not unit within
    ``NORM_TOL`` are normalised."""
    init = cfg.get("initial")
    if init is None:
        psi = np.zeros(model.dim(0), dtype=np.complex128)
        psi[0] = 1.0
        return PureHybridState(0, psi)
    sector = int(init.get("sector", 0))
    model.check_sector(sector)
    psi = vector_from_json(init["psi"], "initial.psi")
    if psi.shape[0] != model.dim(sector):
        raise ValidationError(f"initial.psi has dimension {psi.shape[0]}, sector needs {model.dim(sector)}")
    if abs(np.linalg.norm(psi) - 1.0) <= NORM_TOL:
        return PureHybridState(sector, psi)
    return PureHybridState.normalized(sector, psi)


def parse_initial_state(path, model: HybridModel) -> PureHybridState:
    return initial_state_from_config(_load_json(path), model)


# -- event logs -----------------------------------------------------------------------

def _complex_json(v) -> str:
    return "[" + ",".join(f"[{fmt(z.real)},{fmt(z.imag)}]" for z in np.asarray(v)) + "]"


def event_log_lines(log: EventLog):
    """JSONL lines for one trajectory: a header line, then one line per record."""
    yield (
        f'{{"trajectory_index":{log.trajectory_index},"model_id":"{log.model_id}",'
        f'"master_seed":{log.master_seed},"t_end":{fmt(log.t_end)},'
        f'"n_records":{len(log.records)}}}'
    )
    for r in log.records:
        yield (
            f'{{"trajectory_index":{log.trajectory_index},"n":{r.n},"t":{fmt(r.t)},'
            f'"sector":{r.sector},"psi":{_complex_json(r.psi)}}}'
        )


def write_event_logs(logs, path) -> None:
    with open(path, "w", newline="\n") as fh:
        for log in logs:
            for line in event_log_lines(log):
                fh.write(line + "\n")


def read_event_logs(path, model: HybridModel | None = None) -> list[EventLog]:
    """Parse and validate an event-log file; errors name the offending line."""
    logs: list[EventLog] = []
    current: EventLog | None = None
    expected = 0

    def close(lineno):
        if current is not None and len(current.records) != expected:
            raise ValidationError(
                f"{path}:{lineno}: trajectory {current.trajectory_index} has "
                f"{len(current.records)} records, header announced {expected}"
            )

    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc.msg}") from exc
            try:
                if "psi" not in obj:
                    close(lineno)
                    current = EventLog(str(obj["model_id"]), int(obj["master_seed"]),
                                       int(obj["trajectory_index"]), [], float(obj["t_end"]))
                    expected = int(obj["n_records"])
                    logs.append(current)
                    continue
                if current is None:
                    raise ValidationError("record before any trajectory header")
                if int(obj["trajectory_index"]) != current.trajectory_index:
                    raise ValidationError("record belongs to a different trajectory")
                psi = vector_from_json(obj["psi"], "psi")
                if abs(np.linalg.norm(psi) - 1) > 1e-10:
                    raise ValidationError("psi is not a unit vector")
                current.records.append(EventRecord(int(obj["n"]), float(obj["t"]), int(obj["sector"]), psi))
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        close(lineno if logs else 0)
    if not logs:
        raise ValidationError(f"{path}: no trajectories")
    for log in logs:
        try:
            log.check()
        except ValueError as exc:
            raise ValidationError(f"{path}: trajectory {log.trajectory_index}: {exc}") from exc
        if model is not None:
            if log.model_id != model.digest:
                raise ValidationError(f"{path}: trajectory {log.trajectory_index} was produced by another model")
            for r in log.records:
                model.check_sector(r.sector)
                if r.psi.shape[0] != model.dim(r.sector):
                    raise ValidationError(f"{path}: record {r.n} has the wrong dimension for sector {r.sector}")
    return logs


# -- tables and manifests ------------------------------------------------------------------

def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_stats_csv(stats, path) -> None:
    """One row per grid point: occupations, count moments, compensator."""
    sectors = stats.sectors
    header = (["t"] + [f"occupation_{a}" for a in sectors]
              + ["count_mean", "count_var", "compensator_mean", "martingale_mean", "martingale_var"])
    occ = stats.occupation_array(sectors)
    rows = []
    for j, t in enumerate(stats.grid.times):
        rows.append([float(t), *map(float, occ[j]), float(stats.jump_count_mean[j]),
                     float(stats.jump_count_var[j]), float(stats.compensator_mean[j]),
                     float(stats.martingale_mean[j]), float(stats.martingale_var[j])])
    write_csv(path, header, rows)


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def write_manifest(out, manifest: dict) -> Path:
    path = manifest_path(out)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
