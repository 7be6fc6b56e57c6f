"""
Composite security index PI_c and contingency ranking.

Each monitored quantity contributes a violation term q that is 0 inside its
alarm limit, rises linearly, and reaches 1 at its security limit. PI_c is the
2n-norm of all terms.
"""

import math
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd


class SecurityState(str, Enum):
    SECURE = "secure"
    ALARMED = "alarmed"
    INSECURE = "insecure"


@dataclass(frozen=True)
class LimitConfig:
    voltage_alarm: float = 0.05
    voltage_security: float = 0.07
    flow_alarm_ratio: float = 0.8
    nominal_voltage: float = 1.0
    exponent_n: int = 2

    def __post_init__(self):
        if not 0 < self.voltage_alarm < self.voltage_security:
            raise ValueError("voltage alarm band must lie strictly inside the security band")
        if not 0 < self.flow_alarm_ratio < 1:
            raise ValueError(f"flow alarm ratio must be in (0, 1), got {self.flow_alarm_ratio}")
        if self.exponent_n < 1:
            raise ValueError(f"exponent n must be a positive integer, got {self.exponent_n}")


@dataclass(frozen=True)
class SecurityLimits:
    v_alarm_max: np.ndarray
    v_alarm_min: np.ndarray
    v_security_max: np.ndarray
    v_security_min: np.ndarray
    p_alarm: np.ndarray
    p_security: np.ndarray
    exponent_n: int = 2


@dataclass(frozen=True)
class PIcResult:
    value: float
    q_v_max: np.ndarray
    q_v_min: np.ndarray
    q_p: np.ndarray
    state: SecurityState


def default_limits(net, cfg=None):
    cfg = cfg or LimitConfig()
    n_bus = len(net.buses)
    nominal = np.full(n_bus, cfg.nominal_voltage)
    p_security = np.array([br.flow_security_limit for br in net.branches], dtype=float)
    return SecurityLimits(
        v_alarm_max=nominal * (1 + cfg.voltage_alarm),
        v_alarm_min=nominal * (1 - cfg.voltage_alarm),
        v_security_max=nominal * (1 + cfg.voltage_security),
        v_security_min=nominal * (1 - cfg.voltage_security),
        p_alarm=cfg.flow_alarm_ratio * p_security,
        p_security=p_security,
        exponent_n=cfg.exponent_n,
    )


def _flow_terms(p_abs, p_alarm, p_security):
    q = np.zeros_like(p_abs)
    # unrated branches (P_H = inf) never violate
    rated = np.isfinite(p_security)
    over = rated & (p_abs > p_alarm)
    q[over] = (p_abs[over] - p_alarm[over]) / (p_security[over] - p_alarm[over])
    return q


def composite_index(terms, n=2):
    """(sum q^(2n))^(1/(2n)) over every term array."""
    q = np.concatenate([np.ravel(t) for t in terms])
    total = float(np.sum(q ** (2 * n)))
    return total ** (1.0 / (2 * n)) if total > 0 else 0.0


def security_index(sol, lim):
    if not sol.converged:
        raise ValueError("security index needs a converged flow solution")
    if len(sol.v_mag) != len(lim.v_alarm_max) or len(sol.branch_p_from) != len(lim.p_security):
        raise ValueError("flow solution and security limits cover different networks")

    u = sol.v_mag
    q_v_max = np.where(u > lim.v_alarm_max, (u - lim.v_alarm_max) / (lim.v_security_max - lim.v_alarm_max), 0.0)
    q_v_min = np.where(u < lim.v_alarm_min, (lim.v_alarm_min - u) / (lim.v_alarm_min - lim.v_security_min), 0.0)
    p_abs = np.maximum(np.abs(sol.branch_p_from), np.abs(sol.branch_p_to))
    q_p = _flow_terms(p_abs, lim.p_alarm, lim.p_security)

    value = composite_index((q_v_max, q_v_min, q_p), lim.exponent_n)
    return PIcResult(value=value, q_v_max=q_v_max, q_v_min=q_v_min, q_p=q_p, state=classify(value))


def classify(pi_c, tolerance=0.0):
    """secure at 0, alarmed on (0, 1], insecure above 1. `tolerance` widens both closed ends."""
    if math.isnan(pi_c) or pi_c < 0:
        raise ValueError(f"PI_c must be non-negative, got {pi_c}")
    if pi_c <= tolerance:
        return SecurityState.SECURE
    if pi_c <= 1.0 + tolerance:
        return SecurityState.ALARMED
    return SecurityState.INSECURE


def natural_key(label):
    """Sort key putting "L2" before "L10"."""
    return [int(part) if part.isdigit() else part for part in re.split(r"(\d+)", label)]


@dataclass(frozen=True)
class RankingRow:
    contingency: str
    pi_c: float
    state: SecurityState
    from_bus: int = None
    to_bus: int = None
    oracle: float = None
    predicted: float = None

    @property
    def rel_err_pct(self):
        if self.oracle is None or self.predicted is None or self.oracle == 0:
            return None
        return (self.predicted - self.oracle) / self.oracle * 100


@dataclass(frozen=True)
class RankingReport:
    rows: tuple
    diverged: tuple = field(default_factory=tuple)

    @property
    def order(self):
        return [row.contingency for row in self.rows]

    @property
    def screened(self):
        return tuple(row for row in self.rows if row.state is not SecurityState.SECURE)

    @property
    def paired(self):
        return any(row.oracle is not None for row in self.rows)

    def _records(self):
        records = []
        for rank, row in enumerate(self.rows, start=1):
            record = {
                "rank": rank,
                "contingency": row.contingency,
                "from": row.from_bus,
                "to": row.to_bus,
                "pi_c": row.pi_c,
                "state": row.state.value,
            }
            if self.paired:
                record.update(oracle=row.oracle, predicted=row.predicted, rel_err_pct=row.rel_err_pct)
            records.append(record)
        return records

    def to_frame(self):
        columns = ["rank", "contingency", "from", "to", "pi_c", "state"]
        if self.paired:
            columns += ["oracle", "predicted", "rel_err_pct"]
        frame = pd.DataFrame.from_records(self._records(), columns=columns)
        return frame.astype({"from": "Int64", "to": "Int64"})

    def to_csv(self, path=None):
        return self.to_frame().to_csv(path, index=False, float_format="%.10g", lineterminator="\n")

    def to_dict(self):
        return {
            "rows": self._records(),
            "screened": [row.contingency for row in self.screened],
            "diverged": list(self.diverged),
        }


def rank_contingencies(rows, diverged=(), tolerance=0.0):
    """
    Order contingencies by PI_c, most severe first, ties by id.

    `rows` holds (id, pi_c) pairs or RankingRow instances; states
    are attached via classify. NaN values are rejected.
    """
    ranked = []
    for row in rows:
        if isinstance(row, RankingRow):
            item = row
        else:
            contingency, pi_c = row
            item = RankingRow(contingency=contingency, pi_c=pi_c, state=SecurityState.SECURE)
        if item.pi_c is None or math.isnan(item.pi_c) or math.isinf(item.pi_c):
            raise ValueError(f"contingency {item.contingency} has a non-finite PI_c")
        ranked.append(RankingRow(
            contingency=item.contingency,
            pi_c=float(item.pi_c),
            state=classify(float(item.pi_c), tolerance),
            from_bus=item.from_bus,
            to_bus=item.to_bus,
            oracle=item.oracle,
            predicted=item.predicted,
        ))
    ranked.sort(key=lambda r: (-r.pi_c, natural_key(r.contingency)))
    return RankingReport(rows=tuple(ranked), diverged=tuple(sorted(diverged, key=natural_key)))
