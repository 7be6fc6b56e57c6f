"""
N-1 contingency enumeration and labeled dataset generation.

Every sample slot owns an independent random stream derived from
(seed, slot), so datasets are identical whatever the worker count.
"""

import hashlib
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import networkx as nx
import numpy as np
import pandas as pd

from common.helpers import dump_json, read_json, write_json
from common.netmodel import BusKind, network_fingerprint, network_graph, scale_loads, transformers
from common.powerflow import PowerFlowError, SolverOptions, solve_nr
from common.security import LimitConfig, default_limits, natural_key, security_index

DATASET_SCHEMA_VERSION = 1
DATASET_CSV = "dataset.csv"
DATASET_JSON = "dataset.json"

_SLOT_STREAM = 1
_SPLIT_STREAM = 2
_FIXED_POINT_STREAM = 3


class DatasetError(ValueError):
    pass


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Contingency:
    id: str
    outage_branch: int
    from_bus: int
    to_bus: int


@dataclass(frozen=True)
class ControlRanges:
    v_min: float = 0.95
    v_max: float = 1.05
    tap_min: float = 0.9
    tap_max: float = 1.1
    tap_step: float = 0.0125
    # capacitor bounds and step in p.u. of base MVA
    qc_min: float = 0.0
    qc_max: float = 0.5
    qc_step: float = 0.01

    def __post_init__(self):
        for lo, hi in (("v_min", "v_max"), ("tap_min", "tap_max"), ("qc_min", "qc_max")):
            if getattr(self, lo) > getattr(self, hi):
                raise GridError(f"{lo} exceeds {hi}")
        for step in ("tap_step", "qc_step"):
            if not getattr(self, step) > 0:
                raise GridError(f"{step} must be positive")


@dataclass(frozen=True)
class ControlVector:
    p_g: tuple
    v_setpoints: tuple
    taps: tuple
    q_c: tuple

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: tuple(float(x) for x in data[k]) for k in ("p_g", "v_setpoints", "taps", "q_c")})


@dataclass(frozen=True)
class DatasetConfig:
    samples_per_contingency: int = 50
    load_min: float = 0.5
    load_max: float = 1.5
    ranges: ControlRanges = field(default_factory=ControlRanges)
    limits: LimitConfig = field(default_factory=LimitConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    retry_budget: int = 10
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.samples_per_contingency < 1:
            raise ValueError("samples_per_contingency must be at least 1")
        if not 0 < self.load_min <= self.load_max:
            raise ValueError(f"invalid load range [{self.load_min}, {self.load_max}]")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be non-negative")
        if not 0 <= self.test_fraction < 1:
            raise ValueError(f"test_fraction must be in [0, 1), got {self.test_fraction}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        return cls(
            ranges=ControlRanges(**data.pop("ranges")),
            limits=LimitConfig(**data.pop("limits")),
            solver=SolverOptions(**data.pop("solver")),
            **data,
        )


@dataclass(frozen=True)
class FeatureLayout:
    names: tuple
    generators: tuple
    voltage_buses: tuple
    transformers: tuple
    capacitors: tuple
    lines: tuple

    @property
    def size(self):
        return len(self.names)

    def block(self, prefix):
        """Slice of the feature vector holding one block (PG, QG, U, T, QC, L)."""
        lengths = {
            "PG": len(self.generators),
            "QG": len(self.generators),
            "U": len(self.voltage_buses),
            "T": len(self.transformers),
            "QC": len(self.capacitors),
            "L": len(self.lines),
        }
        start = 0
        for name, length in lengths.items():
            if name == prefix:
                return slice(start, start + length)
            start += length
        raise KeyError(prefix)

    @property
    def fingerprint(self):
        return hashlib.sha256(dump_json(list(self.names)).encode("utf-8")).hexdigest()

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: tuple(v) for k, v in data.items()})


@dataclass(frozen=True)
class Sample:
    slot: int
    contingency: str
    load_factor: float
    features: np.ndarray
    response: float
    converged: bool
    attempts: int = 1


@dataclass(frozen=True)
class TrainingSet:
    samples: tuple
    train: tuple
    test: tuple
    rng_seed: int
    network_fingerprint: str
    layout: FeatureLayout
    config: DatasetConfig

    def matrix(self, indices=None):
        """Features, responses and load factors of the given sample indices (all by default)."""
        if indices is None:
            indices = range(len(self.samples))
        rows = [self.samples[i] for i in indices]
        if not rows:
            return np.zeros((0, self.layout.size)), np.zeros(0), np.zeros(0)
        X = np.vstack([s.features for s in rows])
        y = np.array([s.response for s in rows], dtype=float)
        f = np.array([s.load_factor for s in rows], dtype=float)
        return X, y, f

    @property
    def converged_count(self):
        return sum(1 for s in self.samples if s.converged)


def voltage_controlled_buses(net):
    """Ids of the slack bus and PV buses that host a generator, ascending."""
    gen_buses = {gen.bus for gen in net.generators}
    return sorted(
        bus.id for bus in net.buses
        if bus.kind is BusKind.SLACK or (bus.kind is BusKind.PV and bus.id in gen_buses)
    )


def _suffixed(prefix, keys):
    seen = {}
    names = []
    for key in keys:
        seen[key] = seen.get(key, 0) + 1
        names.append(f"{prefix}_{key}" if seen[key] == 1 else f"{prefix}_{key}_{seen[key]}")
    return names


def feature_layout(net):
    generators = tuple(sorted(range(len(net.generators)), key=lambda k: (net.generators[k].bus, k)))
    voltage_buses = tuple(voltage_controlled_buses(net))
    taps = tuple(transformers(net))
    capacitors = tuple(sorted(range(len(net.shunt_capacitors)), key=lambda c: (net.shunt_capacitors[c].bus, c)))
    lines = tuple(j for j, br in enumerate(net.branches) if br.in_service)

    gen_buses = [net.generators[k].bus for k in generators]
    names = (
        _suffixed("PG", gen_buses)
        + _suffixed("QG", gen_buses)
        + [f"U_{bus}" for bus in voltage_buses]
        + [f"T_L{j + 1}" for j in taps]
        + _suffixed("QC", [net.shunt_capacitors[c].bus for c in capacitors])
        + [f"L{j + 1}" for j in lines]
    )
    return FeatureLayout(
        names=tuple(names),
        generators=generators,
        voltage_buses=voltage_buses,
        transformers=taps,
        capacitors=capacitors,
        lines=lines,
    )


def build_features(layout, controls, q_gen, outage_branch, base_mva):
    """
    Observation vector [PG | QG | U | T | QC | L] in p.u.

    `controls.p_g` carries the solved slack output; `q_gen` is the recorded
    reactive output per generator in MVAr.
    """
    p_g = np.asarray(controls.p_g, dtype=float)
    q_g = np.asarray(q_gen, dtype=float)
    gens = list(layout.generators)
    caps = list(layout.capacitors)
    flags = np.array([0.0 if j == outage_branch else 1.0 for j in layout.lines])
    return np.concatenate([
        p_g[gens] / base_mva,
        q_g[gens] / base_mva,
        np.asarray(controls.v_setpoints, dtype=float),
        np.asarray(controls.taps, dtype=float),
        np.asarray(controls.q_c, dtype=float)[caps] / base_mva,
        flags,
    ])


def islanding_branches(net):
    """
    Branches whose outage splits the network, mapped to the reason.

    A branch that is the only connection of a generator bus is reported as
    such; other bridges island part of the network.
    """
    graph = network_graph(net)
    gen_buses = {gen.bus for gen in net.generators}
    excluded = {}
    for u, v in nx.bridges(graph):
        members = graph[u][v]["branches"]
        if len(members) > 1:
            continue
        leaf = [bus for bus in (u, v) if graph.degree(bus) == 1 and bus in gen_buses]
        if leaf:
            excluded[members[0]] = f"sole connection of generator bus {leaf[0]}"
        else:
            excluded[members[0]] = "outage islands the network"
    return dict(sorted(excluded.items()))


def enumerate_contingencies(net):
    excluded = islanding_branches(net)
    for j, reason in excluded.items():
        br = net.branches[j]
        logging.info(f"Excluding branch L{j + 1} ({br.label}): {reason}")
    contingencies = [
        Contingency(id=f"L{j + 1}", outage_branch=j, from_bus=br.from_bus, to_bus=br.to_bus)
        for j, br in enumerate(net.branches)
        if br.in_service and j not in excluded
    ]
    logging.info(f"Enumerated {len(contingencies)} N-1 contingencies ({len(excluded)} excluded)")
    return contingencies


def grid_values(lo, hi, step):
    """{lo, lo+step, ...} within [lo, hi]."""
    if not step > 0:
        raise GridError(f"grid step must be positive, got {step}")
    if lo > hi:
        raise GridError(f"empty grid [{lo}, {hi}]")
    count = math.floor((hi - lo) / step + 1e-9) + 1
    return np.round(lo + step * np.arange(count), 12)


def sample_controls(net, ranges, rng):
    """Draw one ControlVector uniformly within the control ranges."""
    slack = net.slack_bus.id
    p_g = tuple(
        float(gen.p_out) if gen.bus == slack else float(rng.uniform(gen.p_min, gen.p_max))
        for gen in net.generators
    )
    v_setpoints = tuple(float(rng.uniform(ranges.v_min, ranges.v_max)) for _ in voltage_controlled_buses(net))
    tap_grid = grid_values(ranges.tap_min, ranges.tap_max, ranges.tap_step)
    taps = tuple(float(tap_grid[rng.integers(len(tap_grid))]) for _ in transformers(net))
    qc_grid = grid_values(ranges.qc_min, ranges.qc_max, ranges.qc_step) * net.base_mva
    q_c = tuple(float(qc_grid[rng.integers(len(qc_grid))]) for _ in net.shunt_capacitors)
    return ControlVector(p_g=p_g, v_setpoints=v_setpoints, taps=taps, q_c=q_c)


def fixed_controls(net, ranges, seed):
    """Controls of the evaluation operating point: one draw from the ranges on its own stream."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_FIXED_POINT_STREAM,)))
    return sample_controls(net, ranges, rng)


def base_controls(net):
    """The controls written in the case file."""
    setpoint = {}
    for gen in net.generators:
        setpoint.setdefault(gen.bus, gen.v_setpoint)
    return ControlVector(
        p_g=tuple(float(gen.p_out) for gen in net.generators),
        v_setpoints=tuple(float(setpoint[bus]) for bus in voltage_controlled_buses(net)),
        taps=tuple(float(net.branches[j].tap) for j in transformers(net)),
        q_c=tuple(float(cap.q_switched) for cap in net.shunt_capacitors),
    )


def apply_controls(net, controls):
    voltage_buses = voltage_controlled_buses(net)
    tap_branches = transformers(net)
    if (len(controls.p_g), len(controls.v_setpoints), len(controls.taps), len(controls.q_c)) != (
        len(net.generators), len(voltage_buses), len(tap_branches), len(net.shunt_capacitors)
    ):
        raise ValueError("control vector does not match the network")

    setpoints = dict(zip(voltage_buses, controls.v_setpoints))
    generators = tuple(
        replace(gen, p_out=p, v_setpoint=setpoints.get(gen.bus, gen.v_setpoint))
        for gen, p in zip(net.generators, controls.p_g)
    )
    branches = list(net.branches)
    for j, tap in zip(tap_branches, controls.taps):
        branches[j] = replace(branches[j], tap=tap)
    capacitors = tuple(
        replace(cap, q_switched=q, q_min=min(cap.q_min, q), q_max=max(cap.q_max, q))
        for cap, q in zip(net.shunt_capacitors, controls.q_c)
    )
    return replace(net, generators=generators, branches=tuple(branches), shunt_capacitors=capacitors)


def apply_outage(net, branch_index):
    branches = list(net.branches)
    branches[branch_index] = replace(branches[branch_index], in_service=False)
    return replace(net, branches=tuple(branches))


def solve_contingency(net, controls, load_factor, outage_branch, cfg):
    """Scale loads, apply controls, drop the outage branch and solve. Returns (network, solution)."""
    case = apply_outage(apply_controls(scale_loads(net, load_factor), controls), outage_branch)
    return case, solve_nr(case, cfg.solver)


def slot_rng(seed, slot):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SLOT_STREAM, slot)))


def _generate_slot(net, layout, contingency, slot, seed, cfg):
    rng = slot_rng(seed, slot)
    limits = default_limits(net, cfg.limits)
    attempts = 0
    for attempts in range(1, cfg.retry_budget + 2):
        load_factor = float(rng.uniform(cfg.load_min, cfg.load_max))
        controls = sample_controls(net, cfg.ranges, rng)
        try:
            case, sol = solve_contingency(net, controls, load_factor, contingency.outage_branch, cfg)
        except PowerFlowError as exc:
            logging.debug(f"Slot {slot} ({contingency.id}) attempt {attempts}: {exc}")
            continue
        if not sol.converged:
            logging.debug(f"Slot {slot} ({contingency.id}) attempt {attempts} did not converge")
            continue
        recorded = replace(controls, p_g=tuple(sol.p_gen.tolist()))
        features = build_features(layout, recorded, sol.q_gen, contingency.outage_branch, net.base_mva)
        return Sample(
            slot=slot,
            contingency=contingency.id,
            load_factor=load_factor,
            features=features,
            response=security_index(sol, limits).value,
            converged=True,
            attempts=attempts,
        )

    logging.warning(f"Slot {slot} ({contingency.id}) exhausted its retry budget of {cfg.retry_budget}")
    q_unknown = np.full(len(net.generators), np.nan)
    features = build_features(layout, controls, q_unknown, contingency.outage_branch, net.base_mva)
    return Sample(
        slot=slot,
        contingency=contingency.id,
        load_factor=load_factor,
        features=features,
        response=math.nan,
        converged=False,
        attempts=attempts,
    )


def _generate_chunk(net, layout, contingencies, slots, seed, cfg):
    spc = cfg.samples_per_contingency
    return [_generate_slot(net, layout, contingencies[slot // spc], slot, seed, cfg) for slot in slots]


def split_indices(samples, seed, test_fraction):
    """Shuffled train/test split over converged samples; |test| = round(fraction * S)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SPLIT_STREAM,)))
    usable = np.array([i for i, s in enumerate(samples) if s.converged], dtype=int)
    order = rng.permutation(usable)
    n_test = int(math.floor(test_fraction * len(usable) + 0.5))
    return tuple(sorted(order[n_test:].tolist())), tuple(sorted(order[:n_test].tolist()))


def _check_q_ranges(net, layout, samples):
    lo = np.array([net.generators[k].q_min for k in layout.generators]) / net.base_mva
    hi = np.array([net.generators[k].q_max for k in layout.generators]) / net.base_mva
    q_block = layout.block("QG")
    outside = sum(
        1 for s in samples
        if s.converged and np.any((s.features[q_block] < lo - 1e-9) | (s.features[q_block] > hi + 1e-9))
    )
    if outside:
        logging.warning(f"{outside} samples record reactive generation outside the declared Q_G range")


def generate_dataset(net, cfg=None, seed=0, jobs=1, contingencies=None):
    """
    Generate samples_per_contingency samples for every contingency.

    Slot s belongs to contingency s // samples_per_contingency. Raises
    DatasetError when no slot converges at all.
    """
    cfg = cfg or DatasetConfig()
    contingencies = contingencies if contingencies is not None else enumerate_contingencies(net)
    if not contingencies:
        raise DatasetError("network has no eligible contingencies")
    layout = feature_layout(net)
    total = cfg.samples_per_contingency * len(contingencies)
    jobs = max(1, jobs or os.cpu_count() or 1)

    logging.info(
        f"Generating {total} samples ({cfg.samples_per_contingency} x {len(contingencies)} contingencies, "
        f"seed {seed}, {jobs} jobs)"
    )
    if jobs == 1:
        samples = _generate_chunk(net, layout, contingencies, range(total), seed, cfg)
    else:
        chunks = [c.tolist() for c in np.array_split(np.arange(total), min(total, jobs * 4)) if len(c)]
        samples = []
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            futures = [
                executor.submit(_generate_chunk, net, layout, contingencies, chunk, seed, cfg)
                for chunk in chunks
            ]
            for future in futures:
                samples.extend(future.result())

    converged = sum(1 for s in samples if s.converged)
    if converged == 0:
        diverged = sorted({s.contingency for s in samples}, key=natural_key)
        raise DatasetError(f"no sample converged; diverged contingencies: {', '.join(diverged)}")
    retries = sum(s.attempts - 1 for s in samples)
    _check_q_ranges(net, layout, samples)

    train, test = split_indices(samples, seed, cfg.test_fraction)
    logging.info(
        f"Generated {total} samples: {converged} converged, {total - converged} diverged, "
        f"{retries} retries; split {len(train)} train / {len(test)} test"
    )
    return TrainingSet(
        samples=tuple(samples),
        train=train,
        test=test,
        rng_seed=seed,
        network_fingerprint=network_fingerprint(net),
        layout=layout,
        config=cfg,
    )


def split_by_bucket(ts, buckets):
    """
    Partition a dataset by load factor. `buckets` are objects with `label`
    and `contains(factor)`; train/test membership is kept.
    """
    parts = {}
    train, test = set(ts.train), set(ts.test)
    for bucket in buckets:
        members = [i for i, s in enumerate(ts.samples) if bucket.contains(s.load_factor)]
        position = {old: new for new, old in enumerate(members)}
        parts[bucket.label] = replace(
            ts,
            samples=tuple(ts.samples[i] for i in members),
            train=tuple(position[i] for i in members if i in train),
            test=tuple(position[i] for i in members if i in test),
        )
        logging.debug(f"Bucket {bucket.label}: {len(members)} samples")
    return parts


def _split_label(i, train, test):
    if i in train:
        return "train"
    if i in test:
        return "test"
    return ""


def dataset_frame(ts):
    train, test = set(ts.train), set(ts.test)
    X, y, f = ts.matrix()
    frame = pd.DataFrame(X, columns=list(ts.layout.names))
    frame.insert(0, "slot", [s.slot for s in ts.samples])
    frame.insert(1, "contingency", [s.contingency for s in ts.samples])
    frame.insert(2, "load_factor", f)
    frame.insert(3, "attempts", [s.attempts for s in ts.samples])
    frame["pi_c"] = y
    frame["converged"] = [int(s.converged) for s in ts.samples]
    frame["split"] = [_split_label(i, train, test) for i in range(len(ts.samples))]
    return frame


def save_dataset(ts, out_dir, timestamp=None):
    """Write dataset.csv plus the dataset.json sidecar into `out_dir`."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, DATASET_CSV)
    dataset_frame(ts).to_csv(csv_path, index=False, float_format="%.17g", lineterminator="\n")
    sidecar = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "seed": ts.rng_seed,
        "config": ts.config.to_dict(),
        "layout": ts.layout.to_dict(),
        "layout_fingerprint": ts.layout.fingerprint,
        "network_fingerprint": ts.network_fingerprint,
        "samples": len(ts.samples),
        "converged": ts.converged_count,
        "train": list(ts.train),
        "test": list(ts.test),
    }
    if timestamp:
        sidecar["generated_at"] = timestamp
    write_json(os.path.join(out_dir, DATASET_JSON), sidecar)
    logging.info(f"Saved {len(ts.samples)} samples to {csv_path}")
    return csv_path


def load_dataset(path, expected_fingerprint=None):
    """Read a dataset directory written by save_dataset."""
    sidecar = read_json(os.path.join(path, DATASET_JSON))
    if sidecar.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise DatasetError(f"unsupported dataset schema version {sidecar.get('schema_version')}")
    if expected_fingerprint is not None and sidecar["network_fingerprint"] != expected_fingerprint:
        raise DatasetError("dataset was generated for a different network (fingerprint mismatch)")

    layout = FeatureLayout.from_dict(sidecar["layout"])
    frame = pd.read_csv(
        os.path.join(path, DATASET_CSV),
        float_precision="round_trip",
        dtype={"contingency": str},
        keep_default_na=False,
        na_values=[""],
    )
    missing = [name for name in layout.names if name not in frame.columns]
    if missing:
        raise DatasetError(f"dataset CSV lacks feature columns: {', '.join(missing[:5])}")

    X = frame[list(layout.names)].to_numpy(dtype=float)
    samples = tuple(
        Sample(
            slot=int(row.slot),
            contingency=row.contingency,
            load_factor=float(row.load_factor),
            features=X[i],
            response=float(row.pi_c),
            converged=bool(row.converged),
            attempts=int(row.attempts),
        )
        for i, row in enumerate(frame[["slot", "contingency", "load_factor", "pi_c", "converged", "attempts"]]
                                .itertuples(index=False))
    )
    logging.info(f"Loaded {len(samples)} samples from {path}")
    return TrainingSet(
        samples=samples,
        train=tuple(sidecar["train"]),
        test=tuple(sidecar["test"]),
        rng_seed=sidecar["seed"],
        network_fingerprint=sidecar["network_fingerprint"],
        layout=layout,
        config=DatasetConfig.from_dict(sidecar["config"]),
    )
