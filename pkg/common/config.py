"""
Run configuration shared by every assess_security.py subcommand.

A RunConfig is a flat JSON object (see run_config.json); command-line flags
override individual keys.
"""

from dataclasses import asdict, dataclass, field, fields

from common.assessor import GRANULARITIES, parse_buckets
from common.helpers import read_json, write_json
from common.lasso import LassoConfig
from common.powerflow import SolverOptions
from common.scenario import ControlRanges, DatasetConfig
from common.security import LimitConfig


class ConfigError(ValueError):
    pass


CONFIG_KEYS = {
    "case": "case file path or name (case14, case118, case300)",
    "seed": "master random seed, 0 <= seed < 2**64",
    "samples_per_contingency": "samples generated per contingency",
    "load_min": "lowest load factor drawn",
    "load_max": "highest load factor drawn",
    "voltage_alarm": "voltage alarm band, fraction of nominal",
    "voltage_security": "voltage security band, fraction of nominal",
    "flow_alarm_ratio": "line-flow alarm limit as a fraction of the security limit",
    "exponent_n": "PI_c exponent n (norm order 2n)",
    "v_min": "lowest sampled voltage setpoint, p.u.",
    "v_max": "highest sampled voltage setpoint, p.u.",
    "tap_min": "lowest transformer tap, p.u.",
    "tap_max": "highest transformer tap, p.u.",
    "tap_step": "transformer tap step, p.u.",
    "qc_min": "lowest capacitor output, p.u. of base MVA",
    "qc_max": "highest capacitor output, p.u. of base MVA",
    "qc_step": "capacitor switching step, p.u. of base MVA",
    "retry_budget": "fresh draws allowed per sample after a diverged solve",
    "test_fraction": "share of converged samples held out for testing",
    "tolerance": "load-flow mismatch tolerance, p.u.",
    "max_iterations": "Newton iterations per load flow",
    "flat_start": "start every load flow from 1.0 p.u. / 0 rad",
    "enforce_q_limits": "switch PV buses to PQ on reactive limit violations",
    "lambda_count": "values on the regularization path",
    "lambda_eps": "smallest path value as a fraction of lambda_max",
    "penalty_scale": "constant multiplying every penalty weight",
    "msa_steps": "adaptive reweighting steps",
    "validation_fraction": "share of training rows used to select lambda",
    "adaptive_delta": "offset in the adaptive weights 1/(|coef| + delta)",
    "zero_weight_exclusion": "give coefficients zeroed in a step an infinite weight",
    "ccd_tol": "coordinate-descent convergence tolerance",
    "ccd_max_sweeps": "coordinate-descent sweep limit",
    "buckets": "load buckets as label:lo:hi,... (lower-inclusive, last one closed)",
    "model_granularity": "bucket (one model per load bucket) or contingency (one per bucket and contingency)",
    "min_cell_samples": "training rows a (bucket, contingency) cell needs for a model of its own",
    "anchor_factors": "load factors of the fixed-point ranking study",
    "jobs": "worker processes for dataset generation (0 = all CPUs)",
    "out": "output directory",
    "timestamp": "stamp output metadata with the generation time",
}


@dataclass
class RunConfig:
    case: str = "case14"
    seed: int = 42
    samples_per_contingency: int = 50
    load_min: float = 0.5
    load_max: float = 1.5
    voltage_alarm: float = 0.05
    voltage_security: float = 0.07
    flow_alarm_ratio: float = 0.8
    exponent_n: int = 2
    v_min: float = 0.95
    v_max: float = 1.05
    tap_min: float = 0.9
    tap_max: float = 1.1
    tap_step: float = 0.0125
    qc_min: float = 0.0
    qc_max: float = 0.5
    qc_step: float = 0.01
    retry_budget: int = 10
    test_fraction: float = 0.2
    tolerance: float = 1e-8
    max_iterations: int = 20
    flat_start: bool = True
    enforce_q_limits: bool = False
    lambda_count: int = 100
    lambda_eps: float = 1e-3
    penalty_scale: float = 1.0
    msa_steps: int = 3
    validation_fraction: float = 0.2
    adaptive_delta: float = 1e-6
    zero_weight_exclusion: bool = False
    ccd_tol: float = 1e-7
    ccd_max_sweeps: int = 10000
    buckets: str = "light:0.5:0.9,normal:0.9:1.1,heavy:1.1:1.5"
    model_granularity: str = "contingency"
    min_cell_samples: int = 5
    anchor_factors: list = field(default_factory=lambda: [0.8, 1.0, 1.1])
    jobs: int = 1
    out: str = "out"
    timestamp: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.jobs < 0:
            raise ConfigError(f"jobs must be non-negative, got {self.jobs}")
        if not all(f > 0 for f in self.anchor_factors):
            raise ConfigError("anchor factors must be positive")
        if self.model_granularity not in GRANULARITIES:
            choices = ", ".join(GRANULARITIES)
            raise ConfigError(f"model_granularity must be one of {choices}, got {self.model_granularity!r}")
        if self.min_cell_samples < 3:
            raise ConfigError(f"min_cell_samples must be at least 3, got {self.min_cell_samples}")
        try:
            self.limit_config()
            self.solver_options()
            self.dataset_config()
            self.lasso_config()
            buckets = self.bucket_list()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if buckets[0].lo > self.load_min or buckets[-1].hi < self.load_max:
            raise ConfigError(f"buckets do not cover the load range [{self.load_min}, {self.load_max}]")

    def limit_config(self):
        return LimitConfig(
            voltage_alarm=self.voltage_alarm,
            voltage_security=self.voltage_security,
            flow_alarm_ratio=self.flow_alarm_ratio,
            exponent_n=self.exponent_n,
        )

    def solver_options(self):
        return SolverOptions(
            tolerance=self.tolerance,
            max_iterations=self.max_iterations,
            flat_start=self.flat_start,
            enforce_q_limits=self.enforce_q_limits,
        )

    def dataset_config(self):
        return DatasetConfig(
            samples_per_contingency=self.samples_per_contingency,
            load_min=self.load_min,
            load_max=self.load_max,
            ranges=ControlRanges(
                v_min=self.v_min,
                v_max=self.v_max,
                tap_min=self.tap_min,
                tap_max=self.tap_max,
                tap_step=self.tap_step,
                qc_min=self.qc_min,
                qc_max=self.qc_max,
                qc_step=self.qc_step,
            ),
            limits=self.limit_config(),
            solver=self.solver_options(),
            retry_budget=self.retry_budget,
            test_fraction=self.test_fraction,
        )

    def lasso_config(self):
        return LassoConfig(
            steps=self.msa_steps,
            lambda_count=self.lambda_count,
            lambda_eps=self.lambda_eps,
            penalty_scale=self.penalty_scale,
            validation_fraction=self.validation_fraction,
            adaptive_delta=self.adaptive_delta,
            zero_weight_exclusion=self.zero_weight_exclusion,
            tol=self.ccd_tol,
            max_sweeps=self.ccd_max_sweeps,
        )

    def bucket_list(self):
        return parse_buckets(self.buckets)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for name, value in data.items():
            values[name] = _coerce(name, known[name].type, value)
        return cls(**values)

    def override(self, **changes):
        """Copy with the given keys replaced; None values are ignored."""
        data = self.to_dict()
        data.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(data)


def _coerce(name, kind, value):
    if kind in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name} must be true or false")
        return value
    if kind in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name} must be an integer")
        return value
    if kind in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name} must be a number")
        return float(value)
    if kind in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"config key {name} must be a string")
        return value
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, (int, float)) for v in value):
        raise ConfigError(f"config key {name} must be a list of numbers")
    return [float(v) for v in value]


def load_config(path):
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not hold a JSON object")
    return RunConfig.from_dict(data)


def save_config(path, cfg):
    return write_json(path, cfg.to_dict())
