"""Experiment configuration, Monte Carlo orchestration and reports.

A run is a pure function of its configuration and master seed. Replicas are
processed in fixed chunks of ``mc.chunk`` consecutive indices; the chunk
partition never depends on the worker count, and chunk results are reduced in
replica order, so report bodies are byte-identical for any ``mc.workers``.
"""

from __future__ import annotations

import ast
import csv
import hashlib
import io
import json
import math
import multiprocessing as mp
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .chaos import ChaosParams, build_cascade, build_chaos, cell_span, reflection_witness, shift_cascade_weight
from .covariance import (
    GFFSquare,
    MollifyConvolution,
    OffsetKernel,
    PureLog,
    Regularized,
    SpectralTruncation,
)
from .errors import ConfigError, ImchaosError
from .estimator import (
    DIRECT,
    EXACT,
    FAST,
    FROZEN,
    REGULARIZED,
    UNIT,
    EstimatorConfig,
    Geometric,
    HEstimator,
    HOperator,
    PaperDoubleExp,
    compute_A_N,
    reconstruction_error,
    residual_correlation,
)
from .grid import Grid, TestFunction, build_grid
from .mollifier import Mollifier, derivative_stencil
from .oracle import (
    cross_term_discrete,
    derivative_variance,
    four_point_E,
    girsanov_three_point,
    girsanov_two_point,
    second_moment_H_quadrature,
)
from .sampler import (
    GridWindowSampler,
    ball_mask,
    grad_pairing,
    read_field,
    replica_streams,
    sample_gff_spectral,
    write_field,
)

OUTPUT_ENV = "IMCHAOS_OUTPUT_DIR"
CSV_VERSION = 1
CSV_COLUMNS = ("eta", "N", "mean_H_re", "mean_H_im", "rel_L2", "stderr", "replicas", "seed")
Z_GATE = 4.0


# --------------------------------------------------------------------------
# configuration


# dotted key -> (attribute, type); every documented key, nothing else
KEYS = {
    "kernel.kind": ("kernel", str),  # gff | gff_series | purelog
    "kernel.J": ("kernel_J", int),  # series length for gff_series
    "grid.d": ("d", int),
    "grid.n": ("n", int),
    "reg.kind": ("reg", str),  # spectral | mollify
    "reg.J": ("J", int),
    "reg.delta": ("delta", float),
    "chaos.beta": ("beta", float),
    "chaos.allow_out_of_range": ("allow_out_of_range", bool),
    "tf.center": ("tf_center", tuple),
    "tf.radius": ("tf_radius", float),
    "tf.amplitude": ("tf_amplitude", float),
    "estimator.scales": ("scales", tuple),
    "estimator.rule": ("rule", str),  # explicit | geometric | doubleexp
    "estimator.rule_param": ("rule_param", float),
    "estimator.eta0": ("eta0", float),
    "estimator.count": ("count", int),
    "estimator.weight": ("weight", str),
    "estimator.path": ("path", str),
    "estimator.k": ("k", int),
    "estimator.stencil": ("stencil", str),
    "estimator.min_eta_cells": ("min_eta_cells", float),
    "estimator.halo_factor": ("halo_factor", float),
    "sampler.window_radius": ("window_radius", float),
    "sampler.max_points": ("max_points", int),
    "mc.replicas": ("replicas", int),
    "mc.seed": ("seed", int),
    "mc.workers": ("workers", int),
    "mc.chunk": ("chunk", int),
    "mc.batches": ("batches", int),
    "verify.eta": ("verify_eta", float),
    "verify.kernel_offset": ("verify_kernel_offset", float),
    "output.dir": ("outdir", str),
    "output.field_cache": ("field_cache", int),
}
_ATTR_KEY = {a: k for k, (a, _) in KEYS.items()}
# keys that do not change the numbers of a run
_NON_SEMANTIC = ("workers", "outdir", "field_cache")


@dataclass
class ExperimentConfig:
    kernel: str = "gff"
    kernel_J: int = 0
    d: int = 2
    n: int = 128
    reg: str = "spectral"
    J: int = 64
    delta: float = 0.0
    beta: float = 1.0
    allow_out_of_range: bool = False
    tf_center: tuple = (0.5, 0.5)
    tf_radius: float = 0.09
    tf_amplitude: float = 1.0
    scales: tuple = (0.2, 0.1)
    rule: str = "explicit"
    rule_param: float = 0.5
    eta0: float = 0.2
    count: int = 3
    weight: str = REGULARIZED
    path: str = DIRECT
    k: int = 1
    stencil: str = "cell"
    min_eta_cells: float = 8.0
    halo_factor: float = 2.0
    window_radius: float = 0.0  # 0: sample the whole grid
    max_points: int = 4096
    replicas: int = 10000
    seed: int = 0
    workers: int = 1
    chunk: int = 100
    batches: int = 10
    verify_eta: float = 0.1
    verify_kernel_offset: float = 0.0
    outdir: str = ""
    field_cache: int = 0  # replicas dumped to the binary field cache

    # -- loading -----------------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_mapping(parse_config_text(text))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        kw = {}
        for key, value in mapping.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            attr, typ = KEYS[key]
            kw[attr] = _coerce(key, value, typ)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def replace(self, **kw) -> "ExperimentConfig":
        data = asdict(self)
        data.update(kw)
        cfg = ExperimentConfig(**data)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{_ATTR_KEY[f.name]} = {v!r}")
        return "\n".join(lines) + "\n"

    def semantic_hash(self) -> str:
        data = {k: v for k, v in asdict(self).items() if k not in _NON_SEMANTIC}
        blob = json.dumps(data, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- derived objects ---------------------------------------------------

    def grid(self) -> Grid:
        return build_grid(self.d, self.n)

    def kernel_obj(self):
        if self.kernel == "gff":
            return GFFSquare()
        if self.kernel == "gff_series":
            return GFFSquare(self.kernel_J or self.J)
        if self.kernel == "purelog":
            return PureLog(self.d)
        raise ConfigError(f"unknown kernel.kind {self.kernel!r}")

    def reg_obj(self):
        if self.reg == "spectral":
            return SpectralTruncation(self.J)
        if self.reg == "mollify":
            return MollifyConvolution(self.delta)
        raise ConfigError(f"unknown reg.kind {self.reg!r}")

    def tf(self) -> TestFunction:
        return TestFunction(tuple(float(c) for c in self.tf_center), self.tf_radius, self.tf_amplitude)

    def scale_list(self) -> tuple:
        if self.rule == "explicit":
            return tuple(float(s) for s in self.scales)
        if self.rule == "geometric":
            return Geometric(self.rule_param, self.eta0).scales(self.count)
        if self.rule == "doubleexp":
            return PaperDoubleExp(int(self.rule_param)).scales(self.count)
        raise ConfigError(f"unknown estimator.rule {self.rule!r}")

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            beta=self.beta,
            tf=self.tf(),
            scales=self.scale_list(),
            k=self.k,
            weight=self.weight,
            path=self.path,
            min_eta_cells=self.min_eta_cells,
            halo_factor=self.halo_factor,
            stencil=self.stencil,
        )

    def mask(self):
        if self.window_radius <= 0:
            return None
        return ball_mask(self.grid(), self.tf_center, self.window_radius)

    def output_dir(self) -> Path:
        return Path(self.outdir or os.environ.get(OUTPUT_ENV) or "imchaos-out")

    # -- validation --------------------------------------------------------

    def validate(self):
        """Re-check every cross-module invariant; raises ConfigError."""
        try:
            self._validate()
        except ConfigError:
            raise
        except (ImchaosError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def _validate(self):
        if self.d not in (2, 3):
            raise ConfigError("grid.d must be 2 or 3")
        if self.n < 8:
            raise ConfigError("grid.n too small")
        if len(self.tf_center) != self.d:
            raise ConfigError("tf.center must have grid.d coordinates")
        if self.replicas < 1 or self.chunk < 1 or self.workers < 1 or self.batches < 2:
            raise ConfigError("mc.replicas, mc.chunk, mc.workers must be positive and mc.batches >= 2")
        h = 1.0 / self.n
        reg = self.reg_obj()
        K = self.kernel_obj()
        # spectral truncation is resolved once J <= n/2 (delta = 1/J >= 2h)
        if isinstance(reg, MollifyConvolution) and reg.delta < 4 * h * (1 - 1e-12):
            raise ConfigError(f"regularisation scale {reg.delta} below 4h = {4 * h}")
        if isinstance(reg, SpectralTruncation):
            if self.d != 2 or not isinstance(K, GFFSquare):
                raise ConfigError("spectral truncation is only defined for the square GFF in d = 2")
            if self.J > self.n // 2:
                raise ConfigError(f"reg.J={self.J} exceeds n/2")
        elif isinstance(K, PureLog) and self.window_radius > 0.5:
            raise ConfigError("the pure log kernel needs a window of diameter at most 1")
        if self.reg == "mollify" and self.window_radius <= 0:
            raise ConfigError("Cholesky sampling needs sampler.window_radius > 0")
        if self.beta != 0:
            ChaosParams(self.beta, self.allow_out_of_range).check(self.d)
        cfg = self.estimator_config()
        grid = self.grid()
        cfg.validate(grid, reg)
        if not 0 < self.verify_eta:
            raise ConfigError("verify.eta must be positive")


def _coerce(key, value, typ):
    try:
        if typ is bool:
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if typ is tuple:
            if isinstance(value, (int, float)):
                return (float(value),)
            return tuple(float(v) for v in value)
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; values are Python literals or bare words."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        try:
            out[key] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            out[key] = val
    return out


# --------------------------------------------------------------------------
# replica engine


@dataclass
class _Context:
    cfg: ExperimentConfig
    grid: Grid
    K: object
    reg: object
    est: HEstimator | None
    window: GridWindowSampler | None
    mask: np.ndarray | None
    points: np.ndarray  # flat indices of probe points for moment rows
    extra_ops: list = field(default_factory=list)


_CTX: _Context | None = None  # inherited by forked workers


def build_context(cfg: ExperimentConfig, *, probe_points=(), extra_etas=(), with_estimator=True) -> _Context:
    grid = cfg.grid()
    K, reg = cfg.kernel_obj(), cfg.reg_obj()
    mask = cfg.mask()
    window = None
    if cfg.reg == "mollify":
        window = GridWindowSampler(grid, mask, K, reg, max_points=cfg.max_points)
    est = None
    extra = []
    if with_estimator:
        ecfg = cfg.estimator_config()
        est = HEstimator(grid, K, reg, ecfg, mask=mask)
        for eta in extra_etas:
            extra.append(HOperator(grid, K, reg, ecfg, eta, path=cfg.path, mask=mask))
    pts = np.array([grid.index_of(p) for p in probe_points], dtype=int).reshape(-1, cfg.d)
    flat = np.ravel_multi_index(tuple(pts.T), grid.shape) if len(pts) else np.zeros(0, dtype=int)
    return _Context(cfg, grid, K, reg, est, window, mask, flat, extra)


def _sample(ctx: _Context, start: int, stop: int):
    streams = replica_streams(ctx.cfg.seed, start, stop)
    if ctx.window is not None:
        return ctx.window.sample(streams)
    return sample_gff_spectral(ctx.grid, ctx.cfg.J, streams)


def _run_chunk(ctx: _Context, start: int, stop: int) -> dict:
    cfg = ctx.cfg
    fieldb = _sample(ctx, start, stop)
    tf = cfg.tf()
    T = grad_pairing(fieldb, tf, cfg.k)
    out = {"T": T}
    if len(ctx.points):
        out["gamma"] = fieldb.values.reshape(stop - start, -1)[:, ctx.points]
    if ctx.est is not None or len(ctx.points):
        mu = build_chaos(fieldb, cfg.beta).values
        if len(ctx.points):
            out["mu"] = mu.reshape(stop - start, -1)[:, ctx.points]
        if ctx.est is not None:
            out["H"] = ctx.est(mu)
            if ctx.extra_ops:
                out["H_extra"] = np.stack([op.apply(mu) for op in ctx.extra_ops], axis=-1)
    if cfg.field_cache and start < cfg.field_cache:
        cache = cfg.output_dir() / "fields"
        cache.mkdir(parents=True, exist_ok=True)
        for r in range(start, min(stop, cfg.field_cache)):
            write_field(cache / f"replica_{r:06d}.imcf", fieldb.replica(r - start))
    return out


def _worker_chunk(bounds):
    start, stop = bounds
    try:
        return start, _run_chunk(_CTX, start, stop)
    except Exception as exc:  # add replica context; the parent re-raises
        return start, RuntimeError(f"replicas {start}..{stop - 1}: {type(exc).__name__}: {exc}")


def run_replicas(ctx: _Context, *, workers: int | None = None, on_chunk=None) -> dict:
    """Run every replica chunk and concatenate the results in replica order."""
    global _CTX
    cfg = ctx.cfg
    workers = workers or cfg.workers
    bounds = [(a, min(a + cfg.chunk, cfg.replicas)) for a in range(0, cfg.replicas, cfg.chunk)]
    results = {}
    if workers <= 1:
        for b in bounds:
            try:
                results[b[0]] = _run_chunk(ctx, *b)
            except ImchaosError as exc:
                raise type(exc)(f"replicas {b[0]}..{b[1] - 1}: {exc}") from exc
            if on_chunk:
                on_chunk(b, results[b[0]])
    else:
        _CTX = ctx
        try:
            with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("fork")) as pool:
                for start, res in pool.map(_worker_chunk, bounds):
                    if isinstance(res, Exception):
                        raise res
                    results[start] = res
                    if on_chunk:
                        on_chunk(next(b for b in bounds if b[0] == start), res)
        finally:
            _CTX = None
    keys = results[0].keys()
    return {k: np.concatenate([results[a][k] for a, _ in bounds]) for k in keys}


# --------------------------------------------------------------------------
# reports


def _num(x):
    """JSON-safe float (NaN and None become the string 'n/a')."""
    if x is None:
        return "n/a"
    x = float(x)
    return "n/a" if math.isnan(x) else x


@dataclass
class OracleRow:
    quantity: str
    oracle: str
    mc: float
    oracle_value: float
    stderr: float
    z: float
    passed: bool

    def as_dict(self):
        return {
            "quantity": self.quantity,
            "oracle": self.oracle,
            "mc": _num(self.mc),
            "oracle_value": _num(self.oracle_value),
            "stderr": _num(self.stderr),
            "z": _num(self.z),
            "pass": bool(self.passed),
        }


@dataclass
class ExactRow:
    check: str
    value: float
    tolerance: float
    passed: bool

    def as_dict(self):
        return {"check": self.check, "value": _num(self.value), "tolerance": self.tolerance, "pass": bool(self.passed)}


@dataclass
class ExperimentReport:
    kind: str
    config: ExperimentConfig
    scales: list = field(default_factory=list)  # per-scale dicts
    averaged: list = field(default_factory=list)  # per-N dicts
    correlation: list = field(default_factory=list)
    oracle_rows: list = field(default_factory=list)
    exact_rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    runtime: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.oracle_rows) and all(r.passed for r in self.exact_rows)

    def body(self) -> dict:
        """Everything that is a function of (config, seed); no timings."""
        return {
            "kind": self.kind,
            "provenance": {
                "config_hash": self.config.semantic_hash(),
                "seed": self.config.seed,
                "replicas": self.config.replicas,
                "code_version": __version__,
            },
            "scales": self.scales,
            "averaged": self.averaged,
            "correlation": self.correlation,
            "oracle_rows": [r.as_dict() for r in self.oracle_rows],
            "exact_rows": [r.as_dict() for r in self.exact_rows],
            "notes": self.notes,
            "pass": self.passed,
        }

    def body_json(self) -> str:
        return json.dumps(self.body(), indent=1, sort_keys=True, allow_nan=False) + "\n"

    def csv_text(self) -> str:
        """Convergence table; ``N = 0`` rows are single scales, ``N >= 1`` rows are ``A_N`` (eta = finest scale used)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        seed, R = self.config.seed, self.config.replicas
        for row in self.scales:
            w.writerow([row["eta"], 0, row["mean_re"], row["mean_im"], row["rel_L2"], row["stderr"], R, seed])
        for row in self.averaged:
            w.writerow([row["eta"], row["N"], row["mean_re"], row["mean_im"], row["rel_L2"], row["stderr"], R, seed])
        return buf.getvalue()

    def write(self, outdir=None, stem=None) -> Path:
        out = Path(outdir) if outdir else self.config.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.kind}-{self.config.semantic_hash()}"
        (out / f"{stem}.json").write_text(self.body_json())
        if self.scales:
            (out / f"{stem}.csv").write_text(f"# imchaos convergence table v{CSV_VERSION}\n" + self.csv_text())
        meta = {"runtime_s": round(self.runtime, 3), "finished": time.strftime("%Y-%m-%dT%H:%M:%S"), "workers": self.config.workers}
        (out / f"{stem}.run.json").write_text(json.dumps(meta, indent=1) + "\n")
        return out / f"{stem}.json"


def _scale_rows(H, T, beta, scales, batches):
    rows = []
    for i, eta in enumerate(scales):
        s = reconstruction_error(H[:, i], T, beta, batches)
        m = H[:, i].mean()
        rows.append({"eta": eta, "mean_re": float(m.real), "mean_im": float(m.imag), "rel_L2": _num(s.rel_L2), "stderr": _num(s.stderr)})
    return rows


def _averaged_rows(H, T, beta, scales, batches):
    rows = []
    for N in range(1, len(scales) + 1):
        A = compute_A_N(H, N)
        s = reconstruction_error(A, T, beta, batches)
        m = A.mean()
        rows.append(
            {"N": N, "eta": scales[N - 1], "mean_re": float(m.real), "mean_im": float(m.imag), "rel_L2": _num(s.rel_L2), "stderr": _num(s.stderr)}
        )
    return rows


def run_convergence_experiment(cfg: ExperimentConfig, *, workers=None, write=False) -> ExperimentReport:
    """Sample, build the chaos, evaluate ``H_eta`` on every scale and reduce to errors.

    On failure the chunks finished so far are flushed to ``partial.npz`` in the
    output directory before the error propagates.
    """
    t0 = time.perf_counter()
    ctx = build_context(cfg)
    done = {}
    try:
        data = run_replicas(ctx, workers=workers, on_chunk=lambda b, r: done.__setitem__(b, r))
    except Exception:
        _flush_partial(cfg, done)
        raise
    scales = ctx.est.scales
    H, T = data["H"], data["T"]
    rep = ExperimentReport("convergence", cfg)
    rep.scales = _scale_rows(H, T, cfg.beta, scales, cfg.batches)
    rep.averaged = _averaged_rows(H, T, cfg.beta, scales, cfg.batches)
    if len(H) > 1:
        C = residual_correlation(H, T, cfg.beta)
        rep.correlation = [[_num(c) for c in row] for row in C]
    rep.runtime = time.perf_counter() - t0
    if write:
        rep.write()
    return rep


def _flush_partial(cfg, done):
    if not done:
        return
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for (a, b), res in sorted(done.items()):
        for k, v in res.items():
            arrays[f"{k}_{a}_{b}"] = v
    np.savez(out / "partial.npz", **arrays)


def load_cached_fields(directory) -> list:
    """Fields written by a run with ``output.field_cache > 0``, in replica order."""
    return [read_field(p) for p in sorted(Path(directory).glob("replica_*.imcf"))]


# --------------------------------------------------------------------------
# verification suite


def default_probe_triples(cfg: ExperimentConfig):
    """Three (x, u, y) configurations near the test function centre, snapped to grid points."""
    c = np.asarray(cfg.tf_center, dtype=float)
    e = np.eye(cfg.d)
    h = 1.0 / cfg.n
    step = max(4, round(0.04 / h)) * h
    triples = [
        (c, c + step * e[0], c + 0.5 * step * (e[0] + e[1])),
        (c + step * e[1], c + 3 * step * e[1], c - step * e[0]),
        (c - step * e[0], c + step * e[0], c + 3 * step * e[1]),
    ]
    grid = cfg.grid()
    snap = lambda p: grid.points[grid.index_of(p)]
    return [tuple(snap(p) for p in t) for t in triples]


def _z(mc, oracle, se):
    if se <= 1e-14:
        # degenerate samples (beta = 0): exact agreement up to rounding
        return 0.0 if abs(mc - oracle) <= 1e-12 * max(1.0, abs(mc), abs(oracle)) else math.inf
    return (mc - oracle) / se


def _mean_row(name, oracle_name, samples, oracle_value, gate=Z_GATE):
    samples = np.asarray(samples, dtype=float)
    m = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(len(samples))) if len(samples) > 1 else math.nan
    z = _z(m, oracle_value, se) if not math.isnan(se) else math.nan
    return OracleRow(name, oracle_name, m, float(oracle_value), se, z, bool(abs(z) <= gate))


def _var_row(name, oracle_name, samples, oracle_value, batches, gate=Z_GATE):
    """Second moment of a centred quantity; stderr from batch means."""
    s = np.asarray(samples, dtype=float) ** 2
    m = float(s.mean())
    parts = np.array_split(s, batches)
    se = float(np.std([p.mean() for p in parts], ddof=1) / np.sqrt(batches))
    z = _z(m, oracle_value, se)
    return OracleRow(name, oracle_name, m, float(oracle_value), se, z, bool(abs(z) <= gate))


def moment_rows(cfg: ExperimentConfig, data: dict, triples, Kd_oracle) -> list:
    """Chaos mean and two/three point Girsanov rows from probe-point samples."""
    rows = []
    beta = cfg.beta
    mu, gam = data["mu"], data["gamma"]
    for t, (x, u, y) in enumerate(triples):
        ix, iu, iy = 3 * t, 3 * t + 1, 3 * t + 2
        rows.append(_mean_row(f"E Re mu(x{t})", "exact: 1", mu[:, ix].real, 1.0))
        rows.append(_mean_row(f"E Im mu(x{t})", "exact: 0", mu[:, ix].imag, 0.0))
        two = girsanov_two_point(Kd_oracle, x, u, beta)
        prod = mu[:, ix] * np.conj(mu[:, iu])
        rows.append(_mean_row(f"Re E mu(x{t}) conj mu(u{t})", "exp(b^2 C_delta)", prod.real, two))
        rows.append(_mean_row(f"Im E mu(x{t}) conj mu(u{t})", "exact: 0", prod.imag, 0.0))
        three = girsanov_three_point(Kd_oracle, x, u, y, beta)
        trip = prod * gam[:, iy]
        rows.append(_mean_row(f"Re E mu(x{t}) conj mu(u{t}) Gamma(y{t})", "exact: 0", trip.real, three.real))
        rows.append(
            _mean_row(f"Im E mu(x{t}) conj mu(u{t}) Gamma(y{t})", "i b e^(b^2 C)(C(x,y) - C(u,y))", trip.imag, three.imag)
        )
    return rows


def exact_rows(cfg: ExperimentConfig | None = None) -> list:
    """Deterministic checks that must hold to rounding error."""
    cfg = cfg or ExperimentConfig()
    rows = []
    # mollifier mass and vanishing derivative integral
    for d in (2, 3):
        m = Mollifier(d)
        rows.append(ExactRow(f"mollifier mass - 1 (d={d})", abs(_radial_mass(m) - 1), 1e-8, abs(_radial_mass(m) - 1) <= 1e-8))
        offs, kv = derivative_stencil(d, 0.2, 1 / 64)
        total = abs(np.sum(kv)) * (1 / 64) ** d
        rows.append(ExactRow(f"grid sum of d phi_eta (d={d})", total, 1e-10, total <= 1e-10))
    # four point function with u = v = 0
    K = PureLog(2)
    E0 = four_point_E(K, (0.3, 0.4), (0.6, 0.45), (0.0, 0.0), (0.0, 0.0), 1.3)
    rows.append(ExactRow("four_point_E(u=v=0) - 1", abs(E0 - 1.0), 0.0, E0 == 1.0))
    # cascade shift by 2 pi / beta
    for beta in (0.7, 1.0):
        c = build_cascade(12, 1.0, beta, seed=cfg.seed + 1)
        lvl, idx = 5, 11
        c2 = shift_cascade_weight(c, (lvl, idx), 2 * np.pi / beta)
        dev = float(np.max(np.abs(c2.M - c.M)))
        rows.append(ExactRow(f"cascade 2pi/beta shift, max |dM| (beta={beta})", dev, 1e-12, dev <= 1e-12))
        dA = c2.A - c.A
        sp = cell_span(lvl, idx, c.levels)
        inside = np.zeros(len(dA), bool)
        inside[sp] = True
        err = max(float(np.max(np.abs(dA[inside] - 2 * np.pi / beta))), float(np.max(np.abs(dA[~inside]))))
        rows.append(ExactRow(f"cascade shift changes A by exactly 2pi/beta (beta={beta})", err, 1e-12, err <= 1e-12))
    # reflection witness and path equivalence on a small GFF grid
    g = build_grid(2, 64)
    f = sample_gff_spectral(g, 32, replica_streams(cfg.seed, 0, 4))
    tf = TestFunction((0.5, 0.5), 0.12)
    rep = reflection_witness(f, ChaosParams(1.0), tf)
    rows.append(ExactRow("Re mu invariance under Gamma -> -Gamma", rep.max_real_diff, 1e-12, rep.max_real_diff <= 1e-12))
    gap = rep.antisymmetry_gap
    scale = float(np.max(np.abs(rep.pairing)))
    rows.append(ExactRow("gradient pairing flips sign under reflection", gap, 1e-12 * max(scale, 1), gap <= 1e-12 * max(scale, 1)))
    mu = build_chaos(f, 1.0).values
    K = GFFSquare()
    for weight in (UNIT, FROZEN):
        ecfg = EstimatorConfig(1.0, tf, (0.2,), weight=weight)
        hd = HOperator(g, K, None, ecfg, 0.2, path=DIRECT).apply(mu)
        hf = HOperator(g, K, None, ecfg, 0.2, path=FAST).apply(mu)
        rel = float(np.max(np.abs(hd - hf)) / np.max(np.abs(hd)))
        rows.append(ExactRow(f"direct vs fast H_eta ({weight})", rel, 1e-10, rel <= 1e-10))
    ecfg = EstimatorConfig(1.0, tf, (0.2,), weight=EXACT)
    hd = HOperator(g, PureLog(2), None, ecfg, 0.2, path=DIRECT).apply(mu)
    hf = HOperator(g, PureLog(2), None, ecfg, 0.2, path=FAST).apply(mu)
    rel = float(np.max(np.abs(hd - hf)) / np.max(np.abs(hd)))
    rows.append(ExactRow("direct vs fast H_eta (ExactC, pure log)", rel, 1e-10, rel <= 1e-10))
    rows.append(_locality_row(g, K, tf, mu))
    return rows


def _radial_mass(m: Mollifier) -> float:
    """Midpoint sum of ``phi`` over a fine grid on the unit ball (independent of the normaliser)."""
    n = 400 if m.d == 2 else 160
    h = 2.0 / n
    ax = -1 + h * (np.arange(n) + 0.5)
    if m.d == 2:
        pts = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1)
        return float(m.phi(pts).sum() * h**2)
    total = 0.0
    for x in ax:
        pts = np.stack(np.meshgrid([x], ax, ax, indexing="ij"), -1)
        total += float(m.phi(pts).sum())
    return total * h**3


def _locality_row(g, K, tf, mu):
    """H_eta ignores mu outside supp f and its annulus halo, and pairs closer than eta/2."""
    eta = 0.2
    ecfg = EstimatorConfig(1.0, tf, (eta,), weight=FROZEN)
    op = HOperator(g, K, None, ecfg, eta, path=DIRECT)
    used = np.zeros(g.size, bool)
    used[op.u_flat] = True
    used[op.s_flat] = True
    rng = np.random.default_rng(0)
    mu2 = mu.reshape(len(mu), -1).copy()
    noise = rng.standard_normal((len(mu), int((~used).sum()))) * 100
    mu2[:, ~used] += noise
    base = op.apply(mu)
    pert = op.apply(mu2.reshape(mu.shape))
    rel = float(np.max(np.abs(pert - base)) / np.max(np.abs(base)))
    # stencil radii inside the cell-resolved annulus
    r = np.sqrt(np.sum((op.offsets * g.h) ** 2, axis=-1))
    slack = 0.5 * np.sqrt(g.d) * g.h
    inside = bool(np.all((r > eta / 2 - slack) & (r < eta + slack)))
    return ExactRow("annulus locality of H_eta", rel if inside else math.inf, 1e-12, inside and rel <= 1e-12)


def run_verification_suite(cfg: ExperimentConfig, *, workers=None, write=False, exact=True) -> ExperimentReport:
    """Every oracle vs Monte Carlo comparison plus the exact suites.

    Fails if any ``|z| > 4`` or any exact check exceeds its tolerance.
    ``verify.kernel_offset`` corrupts the kernel handed to the Girsanov
    oracles (not the sampler), which must make those rows fail.
    """
    t0 = time.perf_counter()
    if cfg.d != 2 or cfg.reg != "spectral":
        raise ConfigError("the verification suite runs on the spectral GFF in d = 2")
    triples = default_probe_triples(cfg)
    probes = [p for t in triples for p in t]
    beta = cfg.beta
    ecfg = cfg.estimator_config()
    extra = () if cfg.verify_eta in ecfg.scales else (cfg.verify_eta,)
    ctx = build_context(cfg, probe_points=probes, extra_etas=extra)
    data = run_replicas(ctx, workers=workers)
    rep = ExperimentReport("verification", cfg)
    K, reg = ctx.K, ctx.reg
    Kd = Regularized(K, reg)
    Kd_oracle = Kd if cfg.verify_kernel_offset == 0 else OffsetKernel(Kd, cfg.verify_kernel_offset)
    rep.oracle_rows += moment_rows(cfg, data, triples, Kd_oracle)

    # variance of the ground truth pairing
    T = data["T"]
    tf = ecfg.tf
    dv = derivative_variance(K, tf, cfg.k, reg=reg)
    rep.oracle_rows.append(_var_row("Var <d Gamma, f>", "quadrature of d f d f C_delta", T - 0.0, dv.value, cfg.batches))

    H = data["H"]
    scales = list(ecfg.scales)
    if extra:
        H = np.concatenate([H, data["H_extra"]], axis=1)
        scales += list(extra)
    # E H_eta = 0 and the cross term -i b E[H_eta T]
    for i, eta in enumerate(scales):
        rep.oracle_rows.append(_mean_row(f"Re E H_eta (eta={eta})", "exact: 0", H[:, i].real, 0.0))
        rep.oracle_rows.append(_mean_row(f"Im E H_eta (eta={eta})", "exact: 0", H[:, i].imag, 0.0))
        if ecfg.weight == REGULARIZED:
            ct = cross_term_discrete(ctx.grid, K, reg, ecfg, eta)
            z = np.real(-1j * beta * H[:, i] * T)
            rep.oracle_rows.append(_mean_row(f"-i b E[H_eta T] (eta={eta})", "discrete cross term", z, ct))
    # second moment at verify.eta
    j = scales.index(cfg.verify_eta)
    sm = second_moment_H_quadrature(K, tf, cfg.verify_eta, beta, reg=reg, n=cfg.n, k=cfg.k, weight=ecfg.weight)
    rep.oracle_rows.append(_var_row(f"E|H_eta|^2 (eta={cfg.verify_eta})", "four-point sum over the annuli", np.abs(H[:, j]), sm.value, cfg.batches))

    if exact:
        rep.exact_rows = exact_rows(cfg)
    rep.scales = _scale_rows(data["H"], T, beta, ecfg.scales, cfg.batches)
    rep.runtime = time.perf_counter() - t0
    if write:
        rep.write()
    return rep

