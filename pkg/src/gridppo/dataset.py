"""Scenario generation, oracle labeling, splitting and persistence."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ac_pf import check_violations, solve_pf
from .grid_model import Case
from .opf_oracle import OpfStatus, solve_opf

log = logging.getLogger(__name__)

FORMAT_NAME = "gridppo-dataset"
FORMAT_VERSION = 1
OPTIMAL_REWARD = 500.0


class DatasetError(RuntimeError):
    pass


class LabelingAborted(DatasetError):
    """Too many oracle failures; ``partial`` holds what was labeled so far."""

    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


@dataclass
class Scenario:
    Pd: np.ndarray  # MW per bus
    Qd: np.ndarray  # MVAr per bus
    Pg0: np.ndarray  # MW per generator
    Vg0: np.ndarray  # p.u. per generator
    Pg_opt: np.ndarray | None = None
    Vg_opt: np.ndarray | None = None
    cost_opt: float | None = None
    feasible: bool | None = None  # None until labeled

    @property
    def labeled(self) -> bool:
        return self.cost_opt is not None

    def to_record(self) -> dict:
        rec = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Scenario":
        arr = {k: (np.array(v, dtype=float) if isinstance(v, list) else v) for k, v in rec.items()}
        return cls(**arr)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.to_record() == other.to_record()


@dataclass
class Calibration:
    """Affine map from cost to reward so that optimal dispatch scores 500 points."""

    k: float
    b: float
    c_min: float
    c_max: float

    @classmethod
    def from_costs(cls, costs) -> "Calibration | None":
        costs = np.asarray(costs, dtype=float)
        if costs.size < 2 or not costs.max() > costs.min():
            return None
        c_min, c_max = float(costs.min()), float(costs.max())
        span = c_max - c_min
        return cls(k=-OPTIMAL_REWARD / span, b=OPTIMAL_REWARD * c_max / span, c_min=c_min, c_max=c_max)

    def z(self, cost_opt: float) -> float:
        """Per-scenario correction putting that scenario's optimum at exactly 500."""
        return OPTIMAL_REWARD - (self.k * cost_opt + self.b)


@dataclass
class Dataset:
    case_fingerprint: str
    scenarios: list[Scenario]
    calibration: Calibration | None = None
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenarios)

    def z_values(self) -> np.ndarray:
        if self.calibration is None:
            raise DatasetError("dataset has no reward calibration")
        return np.array([self.calibration.z(s.cost_opt) for s in self.scenarios])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.case_fingerprint, [self.scenarios[i] for i in idx],
                       self.calibration, self.seed, dict(self.params))


def generate_scenarios(case: Case, n: int, load_range=(0.6, 1.4), seed: int = 0,
                       per_bus: bool = True) -> list[Scenario]:
    """Random operating conditions around the case's base loads.

    Each bus load (P and Q alike) is scaled by an independent uniform draw
    from ``load_range`` (a single system-wide draw when ``per_bus`` is False);
    initial generator settings are uniform within their boxes.
    """
    lo, hi = load_range
    if not 0 < lo <= hi:
        raise ValueError("load_range must satisfy 0 < lo <= hi")
    rng = np.random.default_rng(seed)
    m, s = case.n_bus, case.n_gen
    mult = rng.uniform(lo, hi, size=(n, m if per_bus else 1))
    mult = np.broadcast_to(mult, (n, m))
    pg0 = rng.uniform(case.Pmin, case.Pmax, size=(n, s))
    vg0 = rng.uniform(case.Vgmin, case.Vgmax, size=(n, s))
    return [
        Scenario(Pd=case.Pd * mult[i], Qd=case.Qd * mult[i], Pg0=pg0[i], Vg0=vg0[i])
        for i in range(n)
    ]


def label_one(case: Case, sc: Scenario, replay_tol: float = 1e-4):
    """Solve the OPF for one scenario; returns (status, Pg, Vg, cost)."""
    sub = case.with_operating_point(Pd=sc.Pd, Qd=sc.Qd)
    sol = solve_opf(sub)
    if not sol.optimal:
        return sol.status, None, None, None
    # the label must survive a power-flow replay of its own setpoints
    pf = solve_pf(sub.with_operating_point(Pg=sol.Pg_opt, Vg=sol.Vg_opt), validate=False)
    if not pf.converged or not check_violations(sub, pf, replay_tol).empty:
        return OpfStatus.INFEASIBLE, None, None, None
    return sol.status, sol.Pg_opt, sol.Vg_opt, sol.objective


def _label_chunk(args):
    case, chunk = args
    return [label_one(case, sc) for sc in chunk]


def label_scenarios(case: Case, scenarios: list[Scenario], *, labels=None, workers: int = 1,
                    max_failure_rate: float = 0.05, seed: int | None = None,
                    params: dict | None = None) -> Dataset:
    """Label scenarios with the OPF oracle (or an external label file) and keep the feasible ones.

    ``labels`` is an optional path to a JSON-lines label file (see
    :func:`read_labels`).  Scenarios whose oracle run ends at the iteration
    limit count as oracle failures; above ``max_failure_rate`` labeling stops
    with :class:`LabelingAborted` carrying the partial dataset.
    """
    fp = case.fingerprint()
    params = dict(params or {})
    if labels is not None:
        results = read_labels(labels, len(scenarios), case.n_gen)
    elif workers > 1 and len(scenarios) > 1:
        chunks = np.array_split(np.arange(len(scenarios)), workers * 4)
        with ProcessPoolExecutor(workers) as ex:
            parts = ex.map(_label_chunk, [(case, [scenarios[i] for i in c]) for c in chunks])
        results = [r for part in parts for r in part]
    else:
        results = []
        for i, sc in enumerate(scenarios):
            results.append(label_one(case, sc))
            n_fail = sum(r[0] is OpfStatus.ITER_LIMIT for r in results)
            if len(results) >= 20 and n_fail / len(results) > max_failure_rate:
                partial = _assemble(fp, scenarios[:len(results)], results, seed, params)
                raise LabelingAborted(
                    f"oracle failure rate {n_fail}/{len(results)} exceeds {max_failure_rate}", partial)
    n_fail = sum(r[0] is OpfStatus.ITER_LIMIT for r in results)
    if results and n_fail / len(results) > max_failure_rate:
        raise LabelingAborted(f"oracle failure rate {n_fail}/{len(results)} exceeds {max_failure_rate}",
                              _assemble(fp, scenarios, results, seed, params))
    return _assemble(fp, scenarios, results, seed, params)


def _assemble(fp, scenarios, results, seed, params) -> Dataset:
    kept = []
    for sc, (status, pg, vg, cost) in zip(scenarios, results):
        if status is OpfStatus.OPTIMAL:
            kept.append(Scenario(sc.Pd, sc.Qd, sc.Pg0, sc.Vg0, Pg_opt=np.asarray(pg, dtype=float),
                                 Vg_opt=np.asarray(vg, dtype=float), cost_opt=float(cost),
                                 feasible=True))
    dropped = len(results) - len(kept)
    log.info("labeled %d scenarios, dropped %d infeasible or failed", len(results), dropped)
    params = dict(params, n_labeled=len(results), n_dropped=dropped)
    cal = Calibration.from_costs([s.cost_opt for s in kept])
    if cal is None:
        log.warning("reward calibration undefined (fewer than two distinct optimal costs)")
    return Dataset(fp, kept, cal, seed, params)


def read_labels(path, n: int, n_gen: int):
    """Read externally computed labels.

    One JSON object per line: ``{"index": i, "feasible": bool, "Pg_opt": [...],
    "Vg_opt": [...], "cost_opt": float}``.  Scenarios missing from the file
    count as infeasible.
    """
    results = [(OpfStatus.INFEASIBLE, None, None, None)] * n
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            i = int(rec["index"])
            if not 0 <= i < n:
                raise DatasetError(f"{path}:{lineno}: scenario index {i} out of range")
            if rec.get("feasible", True):
                pg, vg = rec["Pg_opt"], rec["Vg_opt"]
                if len(pg) != n_gen or len(vg) != n_gen:
                    raise DatasetError(f"{path}:{lineno}: expected {n_gen} generator labels")
                results[i] = (OpfStatus.OPTIMAL, pg, vg, float(rec["cost_opt"]))
    return results


def split(dataset: Dataset, fractions=(0.8, 0.2), seed: int = 0) -> tuple[Dataset, ...]:
    """Shuffled disjoint partition; calibration is fitted on the first part and shared."""
    fractions = np.asarray(fractions, dtype=float)
    if not np.isclose(fractions.sum(), 1.0):
        raise ValueError("fractions must sum to 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum(fractions) * n).astype(int)
    parts = np.split(order, bounds[:-1])
    subsets = [dataset.subset(p) for p in parts]
    cal = Calibration.from_costs([s.cost_opt for s in subsets[0].scenarios])
    for sub in subsets:
        sub.calibration = cal
    return tuple(subsets)


# --------------------------------------------------------------------------
# persistence

def _header(ds: Dataset, checksum: str) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "case_fingerprint": ds.case_fingerprint,
        "calibration": asdict(ds.calibration) if ds.calibration else None,
        "seed": ds.seed,
        "params": ds.params,
        "count": len(ds),
        "checksum": checksum,
    }


def save(dataset: Dataset, path) -> None:
    """Write ``path`` as JSON lines (``.jsonl``) or columnar arrays (``.npz``)."""
    path = Path(path)
    if path.suffix == ".npz":
        _save_npz(dataset, path)
        return
    lines = [json.dumps(s.to_record()) for s in dataset.scenarios]
    body = "\n".join(lines)
    checksum = hashlib.sha256(body.encode()).hexdigest()
    with open(path, "w") as fh:
        fh.write(json.dumps(_header(dataset, checksum)) + "\n")
        if lines:
            fh.write(body + "\n")


def load(path, case: Case | None = None) -> Dataset:
    """Read a dataset written by :func:`save`; verifies version, checksum and case fingerprint."""
    path = Path(path)
    if path.suffix == ".npz":
        ds = _load_npz(path)
    else:
        text = path.read_text()
        head, _, body = text.partition("\n")
        try:
            header = json.loads(head)
        except json.JSONDecodeError:
            raise DatasetError(f"{path}: corrupt header") from None
        _check_header(header, path)
        body = body[:-1] if body.endswith("\n") else body
        if hashlib.sha256(body.encode()).hexdigest() != header["checksum"]:
            raise DatasetError(f"{path}: checksum mismatch (file truncated or corrupted)")
        scenarios = [Scenario.from_record(json.loads(line)) for line in body.split("\n") if line]
        if len(scenarios) != header["count"]:
            raise DatasetError(f"{path}: expected {header['count']} records, found {len(scenarios)}")
        cal = Calibration(**header["calibration"]) if header["calibration"] else None
        ds = Dataset(header["case_fingerprint"], scenarios, cal, header["seed"], header["params"])
    if case is not None and case.fingerprint() != ds.case_fingerprint:
        raise DatasetError(f"{path}: dataset was generated for a different case (fingerprint mismatch)")
    return ds


def _check_header(header, path):
    if header.get("format") != FORMAT_NAME:
        raise DatasetError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {header.get('version')}")


_COLUMNS = ("Pd", "Qd", "Pg0", "Vg0", "Pg_opt", "Vg_opt")


def _save_npz(ds: Dataset, path: Path) -> None:
    cols = {}
    for name in _COLUMNS:
        rows = [getattr(s, name) for s in ds.scenarios]
        if rows and all(r is not None for r in rows):
            cols[name] = np.vstack(rows)
    cols["cost_opt"] = np.array([np.nan if s.cost_opt is None else s.cost_opt for s in ds.scenarios])
    cols["feasible"] = np.array([-1 if s.feasible is None else int(s.feasible) for s in ds.scenarios])
    digest = hashlib.sha256()
    for name in sorted(cols):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(cols[name]).tobytes())
    header = _header(ds, digest.hexdigest())
    np.savez(path, header=np.array(json.dumps(header)), **cols)


def _load_npz(path: Path) -> Dataset:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            cols = {k: z[k] for k in z.files if k != "header"}
    except Exception as exc:  # zip/npy decoding errors vary by failure mode
        raise DatasetError(f"{path}: corrupt file ({exc})") from None
    _check_header(header, path)
    digest = hashlib.sha256()
    for name in sorted(cols):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(cols[name]).tobytes())
    if digest.hexdigest() != header["checksum"]:
        raise DatasetError(f"{path}: checksum mismatch")
    n = header["count"]
    scenarios = []
    for i in range(n):
        feas = int(cols["feasible"][i])
        cost = float(cols["cost_opt"][i])
        scenarios.append(Scenario(
            Pd=cols["Pd"][i], Qd=cols["Qd"][i], Pg0=cols["Pg0"][i], Vg0=cols["Vg0"][i],
            Pg_opt=cols["Pg_opt"][i] if "Pg_opt" in cols else None,
            Vg_opt=cols["Vg_opt"][i] if "Vg_opt" in cols else None,
            cost_opt=None if np.isnan(cost) else cost,
            feasible=None if feas < 0 else bool(feas)))
    cal = Calibration(**header["calibration"]) if header["calibration"] else None
    return Dataset(header["case_fingerprint"], scenarios, cal, header["seed"], header["params"])


# --------------------------------------------------------------------------
# named presets

@dataclass(frozen=True)
class DataPreset:
    n_train: int
    n_test: int
    load_range: tuple = (0.6, 1.4)

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_test

    @property
    def fractions(self) -> tuple:
        return (self.n_train / self.n_total, self.n_test / self.n_total)


PRESETS = {
    "desk": DataPreset(5000, 1000),
    "full": DataPreset(55000, 17364),
}


def build_preset(case: Case, name: str = "desk", seed: int = 0, workers: int = 1):
    """Generate, label and split one pool of scenarios; returns (train, test).

    Infeasible draws are dropped after splitting proportions are fixed, so
    the parts can be slightly smaller than the nominal counts.
    """
    preset = PRESETS[name]
    scs = generate_scenarios(case, preset.n_total, preset.load_range, seed=seed)
    ds = label_scenarios(case, scs, workers=workers, seed=seed,
                         params={"preset": name, "load_range": list(preset.load_range)})
    return split(ds, preset.fractions, seed=seed)
