"""
In-memory network model parsed from MATPOWER-style case files.

Only the tables the IEEE test systems actually use are read: baseMVA, bus,
gen and branch. Anything else (gencost, bus_name, ...) is ignored with a
warning.
"""

import hashlib
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import cached_property

import networkx as nx

from common.helpers import dump_json

BUS_COLUMNS = ("bus_i", "type", "Pd", "Qd", "Gs", "Bs", "area", "Vm", "Va",
               "baseKV", "zone", "Vmax", "Vmin")
GEN_COLUMNS = ("bus", "Pg", "Qg", "Qmax", "Qmin", "Vg", "mBase", "status",
               "Pmax", "Pmin")
BRANCH_COLUMNS = ("fbus", "tbus", "r", "x", "b", "rateA", "rateB", "rateC",
                  "ratio", "angle", "status", "angmin", "angmax")

REQUIRED_TABLES = {"bus": BUS_COLUMNS, "gen": GEN_COLUMNS, "branch": BRANCH_COLUMNS}

# Switchable capacitor grid and default upper bound, in p.u. of base MVA
CAPACITOR_STEP_PU = 0.01
CAPACITOR_MAX_PU = 0.5

_COMMENT_RE = re.compile(r"%[^\n]*")
_BASEMVA_RE = re.compile(r"mpc\.baseMVA\s*=\s*([^;\s]+)\s*;")
_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.DOTALL)
_CELL_RE = re.compile(r"mpc\.(\w+)\s*=\s*\{", re.DOTALL)


class CaseParseError(ValueError):
    pass


class MalformedRowError(CaseParseError):
    pass


class MissingTableError(CaseParseError):
    pass


class SlackBusError(CaseParseError):
    pass


class DanglingReferenceError(CaseParseError):
    pass


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


_BUS_TYPES = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_load: float
    q_load: float
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_mag: float = 1.0
    v_ang: float = 0.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    flow_security_limit: float = math.inf
    in_service: bool = True
    transformer: bool = False

    @property
    def label(self):
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class Generator:
    bus: int
    p_out: float
    q_out: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_setpoint: float


@dataclass(frozen=True)
class ShuntCapacitor:
    bus: int
    q_switched: float
    q_min: float
    q_max: float
    step: float


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple
    branches: tuple
    generators: tuple
    shunt_capacitors: tuple = field(default_factory=tuple)

    @cached_property
    def bus_index(self):
        return {bus.id: i for i, bus in enumerate(self.buses)}

    @property
    def slack_bus(self):
        return next(bus for bus in self.buses if bus.kind is BusKind.SLACK)

    def counts(self):
        return len(self.buses), len(self.branches), len(self.generators)


def _tokens(row):
    return [t for t in re.split(r"[\s,]+", row.strip()) if t]


def _table_rows(name, body, columns):
    rows = []
    for raw in re.split(r"[;\n]", body):
        tokens = _tokens(raw)
        if not tokens:
            continue
        row_no = len(rows) + 1
        if len(tokens) < len(columns):
            missing = columns[len(tokens)]
            raise MalformedRowError(
                f"mpc.{name} row {row_no}: expected at least {len(columns)} columns, "
                f"got {len(tokens)} (missing column '{missing}')"
            )
        values = []
        for col, token in enumerate(tokens):
            try:
                values.append(float(token))
            except ValueError:
                col_name = columns[col] if col < len(columns) else f"#{col + 1}"
                raise MalformedRowError(
                    f"mpc.{name} row {row_no}, column '{col_name}': not a number ({token!r})"
                ) from None
        rows.append(values)
    return rows


def _split_tables(text):
    stripped = _COMMENT_RE.sub("", text)
    tables = {m.group(1): m.group(2) for m in _TABLE_RE.finditer(stripped)}
    for m in _CELL_RE.finditer(stripped):
        logging.warning(f"Ignoring case cell array mpc.{m.group(1)}")
    return stripped, tables


def _parse_bus(row_no, row):
    bus_type = int(row[1])
    if bus_type not in _BUS_TYPES:
        raise MalformedRowError(f"mpc.bus row {row_no}, column 'type': unsupported bus type {bus_type}")
    if row[7] <= 0:
        raise MalformedRowError(f"mpc.bus row {row_no}, column 'Vm': voltage magnitude must be positive")
    return Bus(
        id=int(row[0]),
        kind=_BUS_TYPES[bus_type],
        p_load=row[2],
        q_load=row[3],
        g_shunt=row[4],
        b_shunt=row[5],
        v_mag=row[7],
        v_ang=row[8],
        base_kv=row[9],
    )


def _parse_generator(row_no, row):
    if row[9] > row[8]:
        raise MalformedRowError(f"mpc.gen row {row_no}, column 'Pmin': Pmin exceeds Pmax")
    if row[4] > row[3]:
        raise MalformedRowError(f"mpc.gen row {row_no}, column 'Qmin': Qmin exceeds Qmax")
    return Generator(
        bus=int(row[0]),
        p_out=row[1],
        q_out=row[2],
        p_min=row[9],
        p_max=row[8],
        q_min=row[4],
        q_max=row[3],
        v_setpoint=row[5],
    )


def _parse_branch(row_no, row):
    from_bus, to_bus = int(row[0]), int(row[1])
    if from_bus == to_bus:
        raise MalformedRowError(f"mpc.branch row {row_no}, column 'tbus': branch connects bus {from_bus} to itself")
    if row[2] == 0 and row[3] == 0:
        raise MalformedRowError(f"mpc.branch row {row_no}, column 'x': zero series impedance")
    ratio = row[8]
    # tap 0 means "nominal line" in the file format
    transformer = ratio != 0 and ratio != 1
    rating = row[5]
    return Branch(
        from_bus=from_bus,
        to_bus=to_bus,
        r=row[2],
        x=row[3],
        b_charging=row[4],
        tap=ratio if ratio != 0 else 1.0,
        shift=row[9],
        flow_security_limit=rating if rating > 0 else math.inf,
        in_service=row[10] > 0,
        transformer=transformer,
    )


def _split_capacitor(bus, base_mva):
    """Move the on-grid part of a positive bus susceptance to a switchable capacitor."""
    step = CAPACITOR_STEP_PU * base_mva
    steps = math.floor(bus.b_shunt / step + 1e-9)
    if bus.b_shunt <= 0 or steps < 1:
        return bus, None
    q_switched = round(steps * step, 10)
    capacitor = ShuntCapacitor(
        bus=bus.id,
        q_switched=q_switched,
        q_min=0.0,
        q_max=max(CAPACITOR_MAX_PU * base_mva, q_switched),
        step=step,
    )
    return replace(bus, b_shunt=round(bus.b_shunt - q_switched, 10)), capacitor


def parse_case(text):
    """
    Parse case-file text into a Network.

    Raises a CaseParseError subclass naming the table, row and column of the
    first problem found.
    """
    stripped, tables = _split_tables(text)

    m = _BASEMVA_RE.search(stripped)
    if not m:
        raise MissingTableError("case has no mpc.baseMVA")
    try:
        base_mva = float(m.group(1))
    except ValueError:
        raise MalformedRowError(f"mpc.baseMVA: not a number ({m.group(1)!r})") from None

    for name in REQUIRED_TABLES:
        if name not in tables:
            raise MissingTableError(f"case has no mpc.{name} table")
    for name in sorted(set(tables) - set(REQUIRED_TABLES)):
        logging.warning(f"Ignoring case table mpc.{name}")

    buses = [_parse_bus(i + 1, row) for i, row in enumerate(_table_rows("bus", tables["bus"], BUS_COLUMNS))]
    ids = set()
    for i, bus in enumerate(buses):
        if bus.id in ids:
            raise MalformedRowError(f"mpc.bus row {i + 1}, column 'bus_i': duplicate bus id {bus.id}")
        ids.add(bus.id)

    slack = [bus.id for bus in buses if bus.kind is BusKind.SLACK]
    if not slack:
        raise SlackBusError("no slack bus")
    if len(slack) > 1:
        raise SlackBusError(f"multiple slack buses: {slack}")

    generators = []
    for i, row in enumerate(_table_rows("gen", tables["gen"], GEN_COLUMNS)):
        gen = _parse_generator(i + 1, row)
        if gen.bus not in ids:
            raise DanglingReferenceError(f"mpc.gen row {i + 1}, column 'bus': unknown bus {gen.bus}")
        if row[7] <= 0:
            logging.warning(f"Dropping out-of-service generator at bus {gen.bus} (gen row {i + 1})")
            continue
        generators.append(gen)

    branches = []
    for i, row in enumerate(_table_rows("branch", tables["branch"], BRANCH_COLUMNS)):
        branch = _parse_branch(i + 1, row)
        for col, bus_id in (("fbus", branch.from_bus), ("tbus", branch.to_bus)):
            if bus_id not in ids:
                raise DanglingReferenceError(f"mpc.branch row {i + 1}, column '{col}': unknown bus {bus_id}")
        branches.append(branch)

    capacitors = []
    for i, bus in enumerate(buses):
        buses[i], capacitor = _split_capacitor(bus, base_mva)
        if capacitor is not None:
            capacitors.append(capacitor)

    net = Network(
        base_mva=base_mva,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        shunt_capacitors=tuple(capacitors),
    )

    if not is_connected(net):
        logging.warning("Network is not connected over its in-service branches")

    n_bus, n_branch, n_gen = net.counts()
    logging.info(
        f"Parsed case: {n_bus} buses, {n_branch} branches, {n_gen} generators, "
        f"{len(transformers(net))} transformers, {len(capacitors)} capacitors"
    )
    return net


def read_case(path):
    with open(path, "r", encoding="utf-8") as file:
        return parse_case(file.read())


def scale_loads(net, factor):
    """Multiply every bus load by `factor`; everything else is unchanged."""
    if not factor > 0:
        raise ValueError(f"load factor must be positive, got {factor}")
    buses = tuple(replace(bus, p_load=bus.p_load * factor, q_load=bus.q_load * factor) for bus in net.buses)
    return replace(net, buses=buses)


def transformers(net):
    """Indices of adjustable transformer branches, in branch order."""
    return [i for i, branch in enumerate(net.branches) if branch.transformer]


def network_graph(net):
    """
    Simple graph over in-service branches. Parallel branches collapse into a
    single edge whose `branches` attribute lists every branch index.
    """
    graph = nx.Graph()
    graph.add_nodes_from(bus.id for bus in net.buses)
    for i, branch in enumerate(net.branches):
        if not branch.in_service:
            continue
        u, v = branch.from_bus, branch.to_bus
        if graph.has_edge(u, v):
            graph[u][v]["branches"].append(i)
        else:
            graph.add_edge(u, v, branches=[i])
    return graph


def is_connected(net):
    graph = network_graph(net)
    return graph.number_of_nodes() > 0 and nx.is_connected(graph)


def network_to_dict(net):
    data = asdict(net)
    for bus in data["buses"]:
        bus["kind"] = bus["kind"].value
    return data


def network_to_json(net):
    return dump_json(network_to_dict(net))


def network_fingerprint(net):
    return hashlib.sha256(network_to_json(net).encode("utf-8")).hexdigest()
