"""Monte Carlo experiment driver.

A scenario fixes the pre- and post-outage increment distributions (derived
from a grid or given directly). Each trial draws an outage time from the
geometric prior, simulates a stream, runs the detector for every requested
false-alarm level in a single pass and, for grid scenarios, localizes the
outage from the learned covariance.
"""
from __future__ import annotations

import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from gridoutage.detector import DetectorConfig, log_threshold, run_multi_threshold, threshold
from gridoutage.gaussian import IncrementDistribution, kl_divergence, sample, whitening_transform
from gridoutage.grid import (
    GridError,
    GridTopology,
    apply_outage,
    derive_increment_distribution,
    generate_test_grid,
    random_injections,
    sensitivity_matrix,
)
from gridoutage.learner import LearnerConfig
from gridoutage.localizer import LocalizerThresholds, candidate_pairs, localize

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA = "gridoutage.metrics/1"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a Monte Carlo run.

    ``scenario="grid"`` reads the topology from ``grid_file`` or generates it
    from ``grid`` (``kind``, ``size``, ``seed``, ``n_chords``, ``shunt``) and
    removes the branches listed in ``outage`` as bus-id pairs.
    ``scenario="gaussian"`` takes ``g`` and ``f`` as ``{mean, cov}``.
    """

    scenario: str = "grid"
    grid: dict = field(default_factory=lambda: {"kind": "loopy", "size": 8, "seed": 0})
    grid_file: str | None = None
    outage: list = field(default_factory=list)
    injection_seed: int = 0
    use_magnitude: bool = False
    allow_islanding: bool = False
    g: dict | None = None
    f: dict | None = None
    trials: int = 1000
    rho: float = 0.04
    alphas: list = field(default_factory=lambda: [0.1, 0.05, 0.01])
    noise_level: float = 0.0
    coverage_ratio: float = 1.0
    mode: str = "f_known"
    window: int = 100
    learner: dict = field(default_factory=dict)
    whiten: bool | None = None
    localize: bool = True
    delta_max: float = 0.5
    delta_min: float = 0.1
    stream_length: int | None = None
    seed: int = 0
    output: str | None = None

    def __post_init__(self):
        if self.scenario not in ("grid", "gaussian"):
            raise ConfigError(f"field 'scenario': expected 'grid' or 'gaussian', got {self.scenario!r}")
        if self.scenario == "gaussian" and (self.g is None or self.f is None):
            raise ConfigError("field 'g'/'f': the gaussian scenario needs both distributions")
        if self.scenario == "grid" and not self.outage:
            raise ConfigError("field 'outage': list at least one branch as [i, k]")
        if int(self.trials) < 1:
            raise ConfigError(f"field 'trials': must be >= 1, got {self.trials}")
        if not 0 < self.rho < 1:
            raise ConfigError(f"field 'rho': must lie in (0, 1), got {self.rho}")
        if not self.alphas or any(not 0 < a < 1 for a in self.alphas):
            raise ConfigError(f"field 'alphas': each must lie in (0, 1), got {self.alphas}")
        if self.noise_level < 0:
            raise ConfigError(f"field 'noise_level': must be >= 0, got {self.noise_level}")
        if not 0 < self.coverage_ratio <= 1:
            raise ConfigError(f"field 'coverage_ratio': must lie in (0, 1], got {self.coverage_ratio}")
        if self.mode not in ("f_known", "pgd"):
            raise ConfigError(f"field 'mode': expected 'f_known' or 'pgd', got {self.mode!r}")
        if self.stream_length is not None and self.stream_length < 1:
            raise ConfigError("field 'stream_length': must be positive")
        try:
            self.learner_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'learner': {exc}") from None
        try:
            self.detector_config()
            LocalizerThresholds(self.delta_max, self.delta_min)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def whitened(self) -> bool:
        return (self.scenario == "grid") if self.whiten is None else bool(self.whiten)

    @property
    def length(self) -> int:
        return self.stream_length or math.ceil(50 / self.rho)

    def learner_config(self) -> LearnerConfig:
        d = dict(self.learner)
        # the 1.1 p.u. interval has no meaning once coordinates are whitened
        if self.whitened:
            d.setdefault("mean_map", "euclidean")
        return LearnerConfig.from_dict(d)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(rho=self.rho, alpha=min(self.alphas), window=self.window,
                              learner=self.learner_config(), mode=self.mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown field(s) {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        text = path.read_text()
        try:
            if path.suffix == ".toml":
                data = tomllib.loads(text)
            else:
                data = json.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot parse ({exc})") from None
        return cls.from_dict(data)


# --------------------------------------------------------------------------
# scenario


@dataclass
class Scenario:
    """Ground truth shared by all trials of an experiment."""

    g: IncrementDistribution
    f: IncrementDistribution
    labels: list
    truth: set
    topology: GridTopology | None = None

    @property
    def detectable(self) -> bool:
        return kl_divergence(self.f, self.g) > 0


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    if cfg.scenario == "gaussian":
        g = IncrementDistribution.from_dict(cfg.g)
        f = IncrementDistribution.from_dict(cfg.f)
        if f.dim != g.dim:
            raise ConfigError("fields 'g'/'f': dimensions differ")
        return Scenario(g, f, list(range(1, g.dim + 1)), set())
    if cfg.grid_file:
        top = GridTopology.load(cfg.grid_file)
    else:
        try:
            top = generate_test_grid(**cfg.grid)
        except TypeError as exc:
            raise ConfigError(f"field 'grid': {exc}") from None
    try:
        ids = [top.branch_id(int(i), int(k)) for i, k in cfg.outage]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'outage': expected [[i, k], ...] ({exc})") from None
    post = apply_outage(top, ids)
    if not post.is_connected and not cfg.allow_islanding:
        raise GridError("the outage islands part of the grid; set allow_islanding to proceed")
    inj = random_injections(top.bus_count - 1, cfg.injection_seed)
    g = derive_increment_distribution(sensitivity_matrix(top, cfg.use_magnitude), inj)
    f = derive_increment_distribution(sensitivity_matrix(post, cfg.use_magnitude), inj)
    truth = {(min(int(i), int(k)), max(int(i), int(k))) for i, k in cfg.outage}
    return Scenario(g, f, top.non_slack, truth, top)


# --------------------------------------------------------------------------
# trials


def truncated_geometric(rng, rho: float, n_max: int) -> int:
    """Draw from ``Geo(rho)`` on ``1, 2, ...`` conditioned on ``<= n_max``."""
    mass = -math.expm1(n_max * math.log1p(-rho))
    u = rng.uniform(0.0, mass)
    return min(n_max, max(1, math.ceil(math.log1p(-u) / math.log1p(-rho))))


@dataclass
class Trial:
    stream: np.ndarray
    lam: int
    g: IncrementDistribution
    f: IncrementDistribution
    observed: np.ndarray


def simulate_trial(scn: Scenario, rho: float, seed, length: int,
                   noise_level: float = 0.0, coverage_ratio: float = 1.0) -> Trial:
    """Stream with ``x_n ~ g`` for ``n < lam`` and ``x_n ~ f`` from ``lam`` on.

    Meter noise is additive on increments with standard deviation
    ``sqrt(2) * noise_level`` (differencing two readings near 1 p.u.).
    ``coverage_ratio < 1`` keeps a random subset of buses.
    """
    rng = np.random.default_rng(seed)
    lam = truncated_geometric(rng, rho, length)
    x = np.concatenate([sample(scn.g, rng, lam - 1), sample(scn.f, rng, length - lam + 1)])
    if noise_level > 0:
        x = x + rng.normal(0.0, math.sqrt(2.0) * noise_level, size=x.shape)
    m = scn.g.dim
    if coverage_ratio < 1:
        keep = np.sort(rng.choice(m, size=max(1, math.ceil(coverage_ratio * m)), replace=False))
    else:
        keep = np.arange(m)
    g, f = scn.g.marginal(keep), scn.f.marginal(keep)
    if noise_level > 0:
        extra = 2.0 * noise_level**2 * np.eye(keep.size)
        g = IncrementDistribution(g.mean, g.cov + extra)
        f = IncrementDistribution(f.mean, f.cov + extra)
    return Trial(x[:, keep], lam, g, f, keep)


def trial_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(index)])


def run_trial(cfg: ExperimentConfig, scn: Scenario, index: int) -> dict:
    """One replication; returns a JSON-ready record (errors are recorded)."""
    rec = {"trial": index}
    try:
        tr = simulate_trial(scn, cfg.rho, trial_seed(cfg.seed, index), cfg.length,
                            cfg.noise_level, cfg.coverage_ratio)
        rec["lambda"] = tr.lam
        g, f, x = tr.g, tr.f, tr.stream
        if cfg.whitened:
            w = whitening_transform(g.cov).w
            x = (x - g.mean) @ w.T
            f_det = f.affine(w, g.mean)
            g_det = IncrementDistribution(np.zeros(g.dim), np.eye(g.dim))
            w_inv = np.linalg.inv(w)
        else:
            f_det, g_det, w_inv = f, g, None
        outs = run_multi_threshold(x, g_det, cfg.detector_config(), cfg.alphas,
                                   f=f_det if cfg.mode == "f_known" else None)
        labels = [scn.labels[j] for j in tr.observed]
        truth = {p for p in scn.truth if p[0] in labels and p[1] in labels}
        per = []
        for o in outs:
            item = {"tau": o.tau}
            if o.tau is not None and o.tau >= tr.lam:
                item["delay"] = o.tau - tr.lam
                if cfg.scenario == "grid" and cfg.localize and g.dim >= 3:
                    sigma = f.cov if cfg.mode == "f_known" else (
                        o.sigma if w_inv is None else w_inv @ o.sigma @ w_inv.T)
                    found = candidate_pairs(localize(
                        g.cov, sigma, LocalizerThresholds(cfg.delta_max, cfg.delta_min), labels))
                    item["localized"] = sorted([list(p) for p in found])
                    item["localized_ok"] = found == truth and bool(truth)
            per.append(item)
        rec["outcomes"] = per
    except Exception as exc:  # recorded, not fatal
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


# --------------------------------------------------------------------------
# aggregation


def _binomial_se(p: float | None, n: int) -> float | None:
    return math.sqrt(p * (1.0 - p) / n) if n else None


def summarize(cfg: ExperimentConfig, records: list, detectable: bool = True) -> dict:
    ok = [r for r in records if "error" not in r]
    rows = []
    for j, a in enumerate(cfg.alphas):
        outs = [(r["lambda"], r["outcomes"][j]) for r in ok]
        n = len(outs)
        fa = sum(1 for lam, o in outs if o["tau"] is not None and o["tau"] < lam)
        delays = [o["delay"] for _, o in outs if "delay" in o]
        loc = [o["localized_ok"] for _, o in outs if "localized_ok" in o]
        fa_rate = fa / n if n else None
        avg = float(np.mean(delays)) if delays and detectable else None
        se = float(np.std(delays, ddof=1) / math.sqrt(len(delays))) if avg is not None and len(delays) > 1 else None
        rows.append({
            "alpha": a,
            "threshold": threshold(cfg.rho, a),
            "log_threshold": log_threshold(cfg.rho, a),
            "trials": n,
            "false_alarms": fa,
            "false_alarm_rate": fa_rate,
            "false_alarm_se": _binomial_se(fa_rate, n),
            "detections": len(delays),
            "missed": sum(1 for _, o in outs if o["tau"] is None),
            "avg_delay": avg,
            "delay_se": se,
            "localization_attempts": len(loc),
            "localization_accuracy": (sum(loc) / len(loc)) if loc else None,
        })
    return {
        "schema": SCHEMA,
        "config": cfg.to_dict(),
        "failures": len(records) - len(ok),
        "per_alpha": rows,
        "trials": records,
    }


@dataclass
class MetricsReport:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    def by_alpha(self, alpha: float) -> dict:
        for row in self.data["per_alpha"]:
            if row["alpha"] == alpha:
                return row
        raise KeyError(alpha)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, allow_nan=False, default=_json_default) + "\n"

    def to_csv(self) -> str:
        cols = ["alpha", "threshold", "trials", "false_alarm_rate", "false_alarm_se",
                "avg_delay", "delay_se", "localization_accuracy", "missed"]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for row in self.data["per_alpha"]:
            wr.writerow(["" if row[c] is None else row[c] for c in cols])
        return buf.getvalue()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _run_chunk(args):
    cfg, scn, idx = args
    return [run_trial(cfg, scn, i) for i in idx]


def run_monte_carlo(cfg: ExperimentConfig, workers: int = 1) -> MetricsReport:
    """Run ``cfg.trials`` independently seeded replications.

    Trial ``i`` is seeded from ``(cfg.seed, i)``, so the report does not
    depend on ``workers``.
    """
    scn = build_scenario(cfg)
    idx = list(range(int(cfg.trials)))
    if workers > 1:
        chunks = [idx[w::workers] for w in range(workers)]
        with ProcessPoolExecutor(workers) as ex:
            records = [r for part in ex.map(_run_chunk, [(cfg, scn, c) for c in chunks]) for r in part]
        records.sort(key=lambda r: r["trial"])
    else:
        records = [run_trial(cfg, scn, i) for i in idx]
    return MetricsReport(summarize(cfg, records, scn.detectable))
