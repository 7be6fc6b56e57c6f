"""
Online security assessment: Lasso models per load condition, and per
contingency within it, used to predict PI_c for every contingency without
running a load flow.
"""

import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from common.helpers import read_json, write_json
from common.lasso import (
    FingerprintMismatchError,
    LassoConfig,
    SchemaVersionError,
    StandardizationError,
    ValidationFoldError,
    load_model,
    msa_lasso_fit,
    predict,
    save_model,
)
from common.netmodel import network_fingerprint, scale_loads
from common.powerflow import PowerFlowError, solve_count, solve_nr
from common.scenario import (
    Contingency,
    ControlVector,
    DatasetConfig,
    FeatureLayout,
    apply_controls,
    base_controls,
    build_features,
    fixed_controls,
    solve_contingency,
)
from common.security import (
    LimitConfig,
    RankingRow,
    SecurityState,
    classify,
    default_limits,
    natural_key,
    rank_contingencies,
    security_index,
)

ASSESSOR_SCHEMA_VERSION = 1
MANIFEST = "manifest.json"

# predictions this close to 0 or 1 classify as if exactly on the boundary
CLASSIFY_TOLERANCE = 1e-9
DEFAULT_ANCHORS = (0.8, 1.0, 1.1)
GRANULARITIES = ("bucket", "contingency")
MIN_CELL_SAMPLES = 5
SIGNIFICANT_GAP = 0.01


class AssessorError(ValueError):
    pass


class EmptyBucketError(AssessorError):
    pass


class LayoutMismatchError(AssessorError):
    pass


class UnknownContingencyError(AssessorError):
    pass


class LoadFactorError(AssessorError):
    pass


@dataclass(frozen=True)
class LoadBucket:
    label: str
    lo: float
    hi: float
    closed: bool = False

    def contains(self, factor):
        return self.lo <= factor < self.hi or (self.closed and factor == self.hi)


def default_buckets():
    return (
        LoadBucket("light", 0.5, 0.9),
        LoadBucket("normal", 0.9, 1.1),
        LoadBucket("heavy", 1.1, 1.5, closed=True),
    )


def validate_buckets(buckets):
    """Buckets must tile their range without gaps or overlap; the last one is closed."""
    if not buckets:
        raise ValueError("at least one load bucket is required")
    labels = [b.label for b in buckets]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate bucket labels: {labels}")
    for b in buckets:
        if not b.lo < b.hi:
            raise ValueError(f"bucket {b.label} has an empty range [{b.lo}, {b.hi})")
    for left, right in zip(buckets, buckets[1:]):
        if left.hi != right.lo:
            raise ValueError(f"buckets {left.label} and {right.label} do not meet ({left.hi} vs {right.lo})")
    return tuple(replace(b, closed=(i == len(buckets) - 1)) for i, b in enumerate(buckets))


def parse_buckets(text):
    """Parse "light:0.5:0.9,normal:0.9:1.1,heavy:1.1:1.5"."""
    buckets = []
    for part in text.split(","):
        try:
            label, lo, hi = part.strip().split(":")
            buckets.append(LoadBucket(label, float(lo), float(hi)))
        except ValueError:
            raise ValueError(f"invalid bucket {part!r}; expected label:lo:hi") from None
    return validate_buckets(buckets)


def format_buckets(buckets):
    return ",".join(f"{b.label}:{b.lo:g}:{b.hi:g}" for b in buckets)


def select_bucket(buckets, factor):
    for bucket in buckets:
        if bucket.contains(factor):
            return bucket
    raise LoadFactorError(f"load factor {factor} is outside the configured range")


@dataclass(frozen=True)
class OperatingPoint:
    load_factor: float
    controls: ControlVector
    q_g: tuple

    def to_dict(self):
        return {"load_factor": self.load_factor, "controls": self.controls.to_dict(), "q_g": list(self.q_g)}

    @classmethod
    def from_dict(cls, data):
        return cls(
            load_factor=float(data["load_factor"]),
            controls=ControlVector.from_dict(data["controls"]),
            q_g=tuple(float(q) for q in data["q_g"]),
        )


def operating_point_from_flow(net, controls=None, load_factor=1.0, solver=None):
    """Solve the intact network and record the slack output and Q_G it yields."""
    controls = controls or base_controls(net)
    sol = solve_nr(apply_controls(scale_loads(net, load_factor), controls), solver)
    if not sol.converged:
        raise PowerFlowError(f"intact network does not converge at load factor {load_factor}")
    return OperatingPoint(
        load_factor=load_factor,
        controls=replace(controls, p_g=tuple(sol.p_gen.tolist())),
        q_g=tuple(sol.q_gen.tolist()),
    )


@dataclass(frozen=True)
class Assessor:
    models: dict
    buckets: tuple
    network_fingerprint: str
    layout: FeatureLayout
    contingencies: tuple
    limits: LimitConfig
    base_mva: float
    # (bucket label, contingency id) -> model; cells missing here use the bucket model
    contingency_models: dict = field(default_factory=dict)

    @property
    def granularity(self):
        return "contingency" if self.contingency_models else "bucket"

    def contingency(self, contingency_id):
        for c in self.contingencies:
            if c.id == contingency_id:
                return c
        raise UnknownContingencyError(f"unknown contingency {contingency_id}")

    def cell_model(self, label, contingency_id=None):
        model = self.contingency_models.get((label, contingency_id))
        if model is not None:
            return model
        if label not in self.models:
            raise AssessorError(f"no model trained for load bucket {label}")
        return self.models[label]

    def model_for(self, load_factor, contingency_id=None):
        return self.cell_model(select_bucket(self.buckets, load_factor).label, contingency_id)


def _fit(ts, rows, cfg, what):
    X, y, _ = ts.matrix(rows)
    logging.debug(f"Training {what} model on {len(rows)} samples, {X.shape[1]} features")
    return msa_lasso_fit(
        X,
        y,
        seed=ts.rng_seed,
        layout_fingerprint=ts.layout.fingerprint,
        feature_names=ts.layout.names,
        **asdict(cfg),
    )


def train_assessor(datasets, contingencies, buckets=None, cfg=None, limits=None, base_mva=100.0,
                   granularity="contingency", min_cell_samples=MIN_CELL_SAMPLES):
    """
    Fit multi-step adaptive Lasso models on each bucket's training split.

    Every bucket gets a pooled model. With granularity "contingency" each
    (bucket, contingency) cell holding at least `min_cell_samples` training
    rows also gets its own model; smaller cells predict with the pooled one.

    `datasets` maps bucket label to TrainingSet; every bucket needs a nonempty
    training split and all datasets must share a feature layout.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {', '.join(GRANULARITIES)}, got {granularity!r}")
    buckets = validate_buckets(tuple(buckets or default_buckets()))
    cfg = cfg or LassoConfig()
    contingencies = tuple(contingencies)
    if not datasets:
        raise EmptyBucketError("no datasets given")
    layouts = {ts.layout.fingerprint for ts in datasets.values()}
    networks = {ts.network_fingerprint for ts in datasets.values()}
    if len(layouts) > 1 or len(networks) > 1:
        raise LayoutMismatchError("bucket datasets were generated with different feature layouts")
    some = next(iter(datasets.values()))

    models, cells = {}, {}
    for bucket in buckets:
        ts = datasets.get(bucket.label)
        rows = [i for i in (ts.train if ts else ()) if ts.samples[i].converged]
        if not rows:
            raise EmptyBucketError(f"load bucket {bucket.label} has no training samples")
        logging.info(f"Training {bucket.label} model on {len(rows)} samples")
        models[bucket.label] = _fit(ts, rows, cfg, bucket.label)
        if granularity == "bucket":
            continue

        fallback = []
        for c in contingencies:
            cell_rows = [i for i in rows if ts.samples[i].contingency == c.id]
            if len(cell_rows) < min_cell_samples:
                fallback.append(c.id)
                continue
            try:
                cells[(bucket.label, c.id)] = _fit(ts, cell_rows, cfg, f"{bucket.label}/{c.id}")
            except (StandardizationError, ValidationFoldError) as exc:
                logging.warning(f"Cell {bucket.label}/{c.id} uses the bucket model: {exc}")
                fallback.append(c.id)
        if fallback:
            logging.info(f"{len(fallback)} contingencies in {bucket.label} fall back to the bucket model")

    return Assessor(
        models=models,
        buckets=buckets,
        network_fingerprint=some.network_fingerprint,
        layout=some.layout,
        contingencies=contingencies,
        limits=limits or some.config.limits,
        base_mva=base_mva,
        contingency_models=cells,
    )


def _predict_clamped(model, features):
    return max(0.0, predict(model, features))


def assess(a, operating_point, contingency_id):
    """Predicted (PI_c, state) of one contingency at an operating point."""
    contingency = a.contingency(contingency_id)
    model = a.model_for(operating_point.load_factor, contingency.id)
    features = build_features(
        a.layout, operating_point.controls, operating_point.q_g, contingency.outage_branch, a.base_mva
    )
    value = _predict_clamped(model, features)
    return value, classify(value, CLASSIFY_TOLERANCE)


def screen_and_rank(a, operating_point):
    rows = []
    for c in a.contingencies:
        value, _ = assess(a, operating_point, c.id)
        rows.append(RankingRow(contingency=c.id, pi_c=value, state=SecurityState.SECURE,
                               from_bus=c.from_bus, to_bus=c.to_bus))
    report = rank_contingencies(rows, tolerance=CLASSIFY_TOLERANCE)
    logging.info(f"Screened {len(report.rows)} contingencies: {len(report.screened)} alarmed or insecure")
    return report


def rank_agreement(oracle, predicted):
    """
    Compare two RankingReports over their common contingencies: exact
    position matches, pairwise inversions, inversions among pairs whose
    oracle values differ by at least 1 %, and Spearman correlation.
    """
    common = set(oracle.order) & set(predicted.order)
    oracle_order = [c for c in oracle.order if c in common]
    predicted_order = [c for c in predicted.order if c in common]
    oracle_value = {row.contingency: row.pi_c for row in oracle.rows}
    predicted_value = {row.contingency: row.pi_c for row in predicted.rows}
    position = {c: i for i, c in enumerate(predicted_order)}

    inversions = 0
    significant = 0
    for first, second in combinations(oracle_order, 2):
        if position[first] > position[second]:
            inversions += 1
            a, b = oracle_value[first], oracle_value[second]
            if abs(a - b) >= SIGNIFICANT_GAP * max(abs(a), abs(b)):
                significant += 1

    x = np.array([oracle_value[c] for c in oracle_order])
    y = np.array([predicted_value[c] for c in oracle_order])
    spearman = None
    if len(x) > 1 and np.ptp(x) > 0 and np.ptp(y) > 0:
        rho, _ = spearmanr(x, y)
        spearman = float(rho)

    return {
        "contingencies": len(oracle_order),
        "exact_matches": sum(1 for i, c in enumerate(oracle_order) if predicted_order[i] == c),
        "inversions": inversions,
        "significant_inversions": significant,
        "spearman": spearman,
    }


@dataclass(frozen=True)
class EvaluationReport:
    samples: pd.DataFrame
    mean_abs_rel_err: float
    max_abs_rel_err: float
    train_mean_abs_rel_err: float
    confusion: dict
    anchors: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    load_monotone_fraction: float = None

    def summary(self):
        return {
            "samples": int(len(self.samples)),
            "error_rows": int(self.samples["rel_err_pct"].notna().sum()) if len(self.samples) else 0,
            "mean_abs_rel_err_pct": self.mean_abs_rel_err,
            "max_abs_rel_err_pct": self.max_abs_rel_err,
            "train_mean_abs_rel_err_pct": self.train_mean_abs_rel_err,
            "confusion": self.confusion,
            "anchors": {
                f"{factor:g}": {"agreement": entry["agreement"], "diverged": list(entry["predicted"].diverged)}
                for factor, entry in self.anchors.items()
            },
            "timing": self.timing,
            "load_monotone_fraction": self.load_monotone_fraction,
        }


def _sample_rows(a, datasets, split):
    rows = []
    for label, ts in datasets.items():
        if label not in a.models:
            continue
        for i in getattr(ts, split):
            sample = ts.samples[i]
            if not sample.converged:
                continue
            predicted = _predict_clamped(a.cell_model(label, sample.contingency), sample.features)
            oracle = sample.response
            rows.append({
                "bucket": label,
                "slot": sample.slot,
                "contingency": sample.contingency,
                "load_factor": sample.load_factor,
                "oracle": oracle,
                "predicted": predicted,
                "rel_err_pct": (predicted - oracle) / oracle * 100 if oracle > 0 else np.nan,
                "oracle_state": classify(oracle).value,
                "predicted_state": classify(predicted, CLASSIFY_TOLERANCE).value,
            })
    columns = ["bucket", "slot", "contingency", "load_factor", "oracle", "predicted", "rel_err_pct",
               "oracle_state", "predicted_state"]
    return pd.DataFrame.from_records(rows, columns=columns)


def _abs_err_stats(frame):
    errors = frame["rel_err_pct"].dropna().abs() if len(frame) else pd.Series(dtype=float)
    if errors.empty:
        return 0.0, 0.0
    return float(errors.mean()), float(errors.max())


def _confusion(frame):
    states = [s.value for s in SecurityState]
    table = {o: {p: 0 for p in states} for o in states}
    for o, p in zip(frame.get("oracle_state", []), frame.get("predicted_state", [])):
        table[o][p] += 1
    return table


def oracle_ranking(net, contingencies, controls, load_factor, cfg):
    """Load-flow PI_c of every contingency at one operating point; diverged outages are listed apart."""
    limits = default_limits(net, cfg.limits)
    rows, diverged = [], []
    for c in contingencies:
        try:
            _, sol = solve_contingency(net, controls, load_factor, c.outage_branch, cfg)
        except PowerFlowError:
            diverged.append(c.id)
            continue
        if not sol.converged:
            diverged.append(c.id)
            continue
        rows.append(RankingRow(contingency=c.id, pi_c=security_index(sol, limits).value,
                               state=SecurityState.SECURE, from_bus=c.from_bus, to_bus=c.to_bus))
    return rank_contingencies(rows, diverged)


def _anchor_sweep(a, net, controls, factor, cfg):
    """
    Oracle ranking next to the online prediction at one load factor. The
    prediction sees only the intact-network operating point, as in service.
    """
    oracle = oracle_ranking(net, a.contingencies, controls, factor, cfg)
    point = operating_point_from_flow(net, controls, factor, cfg.solver)
    online = {row.contingency: row for row in screen_and_rank(a, point).rows}
    predicted_rows = [
        replace(online[row.contingency], oracle=row.pi_c, predicted=online[row.contingency].pi_c)
        for row in oracle.rows
    ]
    predicted = rank_contingencies(predicted_rows, oracle.diverged, tolerance=CLASSIFY_TOLERANCE)
    return {
        "oracle": oracle,
        "predicted": predicted,
        "agreement": rank_agreement(oracle, predicted),
    }


def monotone_fraction(light, heavy):
    """Share of contingencies, converged in both reports, whose PI_c does not drop from `light` to `heavy`."""
    light_values = {row.contingency: row.pi_c for row in light.rows}
    heavy_values = {row.contingency: row.pi_c for row in heavy.rows}
    both = sorted(set(light_values) & set(heavy_values), key=natural_key)
    if not both:
        return None
    return sum(1 for c in both if heavy_values[c] >= light_values[c]) / len(both)


def compare_timing(a, net, controls, factor, cfg, repeats=5):
    """Wall-clock ratio of a full load-flow sweep to a warmed prediction sweep."""
    started = time.perf_counter()
    oracle_ranking(net, a.contingencies, controls, factor, cfg)
    oracle_seconds = time.perf_counter() - started

    point = operating_point_from_flow(net, controls, factor, cfg.solver)
    screen_and_rank(a, point)
    solves_before = solve_count()
    started = time.perf_counter()
    for _ in range(repeats):
        screen_and_rank(a, point)
    predict_seconds = (time.perf_counter() - started) / repeats
    return {
        "load_factor": factor,
        "contingencies": len(a.contingencies),
        "oracle_seconds": oracle_seconds,
        "predict_seconds": predict_seconds,
        "ratio": oracle_seconds / predict_seconds if predict_seconds > 0 else None,
        "prediction_solves": solve_count() - solves_before,
    }


def evaluate(a, net, datasets, anchor_factors=DEFAULT_ANCHORS, controls=None, cfg=None, seed=None):
    """
    Score the assessor against load-flow results.

    Per-sample errors come from each bucket's test split. Rankings are
    compared at each anchor load factor using the same fixed controls,
    by default one draw from the dataset's control ranges on the fixed-point
    stream of `seed` (the dataset seed unless given).
    """
    if network_fingerprint(net) != a.network_fingerprint:
        raise FingerprintMismatchError("assessor was trained for a different network")
    some = next(iter(datasets.values()), None)
    cfg = cfg or (some.config if some is not None else DatasetConfig(limits=a.limits))
    if controls is None:
        seed = seed if seed is not None else (some.rng_seed if some is not None else 0)
        controls = fixed_controls(net, cfg.ranges, seed)

    test_frame = _sample_rows(a, datasets, "test")
    mean_err, max_err = _abs_err_stats(test_frame)
    train_mean, _ = _abs_err_stats(_sample_rows(a, datasets, "train"))
    logging.info(
        f"Test split: {len(test_frame)} samples, mean |error| {mean_err:.3f} %, max |error| {max_err:.3f} % "
        f"(train mean {train_mean:.3f} %)"
    )

    anchors = {}
    for factor in anchor_factors:
        try:
            select_bucket(a.buckets, factor)
        except LoadFactorError:
            logging.warning(f"Skipping anchor load factor {factor}: no bucket covers it")
            continue
        try:
            anchors[factor] = _anchor_sweep(a, net, controls, factor, cfg)
        except PowerFlowError as exc:
            logging.warning(f"Skipping anchor load factor {factor}: {exc}")
            continue
        agreement = anchors[factor]["agreement"]
        logging.info(
            f"Anchor {factor:g}: {agreement['exact_matches']}/{agreement['contingencies']} exact ranks, "
            f"{agreement['significant_inversions']} significant inversions"
        )

    monotone = None
    if len(anchors) >= 2:
        monotone = monotone_fraction(anchors[min(anchors)]["oracle"], anchors[max(anchors)]["oracle"])

    timing_factor = 1.0 if 1.0 in anchors else next(iter(anchors), None)
    timing = compare_timing(a, net, controls, timing_factor, cfg) if timing_factor is not None else {}
    if timing:
        logging.info(f"Oracle sweep {timing['oracle_seconds']:.4f} s vs prediction sweep "
                     f"{timing['predict_seconds']:.6f} s (ratio {timing['ratio']:.1f})")

    return EvaluationReport(
        samples=test_frame,
        mean_abs_rel_err=mean_err,
        max_abs_rel_err=max_err,
        train_mean_abs_rel_err=train_mean,
        confusion=_confusion(test_frame),
        anchors=anchors,
        timing=timing,
        load_monotone_fraction=monotone,
    )


def save_evaluation(report, out_dir, timestamp=None):
    os.makedirs(out_dir, exist_ok=True)
    report.samples.to_csv(os.path.join(out_dir, "evaluation.csv"), index=False, float_format="%.10g",
                          lineterminator="\n")
    summary = report.summary()
    if timestamp:
        summary["generated_at"] = timestamp
    write_json(os.path.join(out_dir, "evaluation.json"), summary)
    for factor, entry in report.anchors.items():
        entry["predicted"].to_csv(os.path.join(out_dir, f"ranking_{factor:g}.csv"))
    logging.info(f"Wrote evaluation to {out_dir}")


def save_assessor(a, out_dir, timestamp=None):
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for label, model in a.models.items():
        files[label] = f"model_{label}.json"
        save_model(os.path.join(out_dir, files[label]), model)
    cells = {}
    for (label, contingency_id), model in a.contingency_models.items():
        filename = f"model_{label}_{contingency_id}.json"
        cells.setdefault(label, {})[contingency_id] = filename
        save_model(os.path.join(out_dir, filename), model)
    manifest = {
        "schema_version": ASSESSOR_SCHEMA_VERSION,
        "network_fingerprint": a.network_fingerprint,
        "layout": a.layout.to_dict(),
        "layout_fingerprint": a.layout.fingerprint,
        "buckets": [asdict(b) for b in a.buckets],
        "contingencies": [asdict(c) for c in a.contingencies],
        "limits": asdict(a.limits),
        "base_mva": a.base_mva,
        "models": files,
        "contingency_models": cells,
    }
    if timestamp:
        manifest["created_at"] = timestamp
    write_json(os.path.join(out_dir, MANIFEST), manifest)
    logging.info(
        f"Saved assessor with {len(files)} bucket and {len(a.contingency_models)} contingency models to {out_dir}"
    )
    return out_dir


def load_assessor(path, expected_fingerprint=None):
    manifest = read_json(os.path.join(path, MANIFEST))
    if manifest.get("schema_version") != ASSESSOR_SCHEMA_VERSION:
        raise SchemaVersionError(f"assessor schema version {manifest.get('schema_version')} is not supported")
    if expected_fingerprint is not None and manifest["network_fingerprint"] != expected_fingerprint:
        raise FingerprintMismatchError("assessor was trained for a different network")
    layout = FeatureLayout.from_dict(manifest["layout"])
    models = {
        label: load_model(os.path.join(path, filename), expected_fingerprint=layout.fingerprint)
        for label, filename in manifest["models"].items()
    }
    cells = {
        (label, contingency_id): load_model(os.path.join(path, filename), expected_fingerprint=layout.fingerprint)
        for label, by_contingency in manifest.get("contingency_models", {}).items()
        for contingency_id, filename in by_contingency.items()
    }
    return Assessor(
        models=models,
        buckets=tuple(LoadBucket(**b) for b in manifest["buckets"]),
        network_fingerprint=manifest["network_fingerprint"],
        layout=layout,
        contingencies=tuple(Contingency(**c) for c in manifest["contingencies"]),
        limits=LimitConfig(**manifest["limits"]),
        base_mva=float(manifest["base_mva"]),
        contingency_models=cells,
    )
