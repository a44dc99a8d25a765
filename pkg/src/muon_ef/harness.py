"""Deterministic synchronous-round simulated cluster.

One round = server LMO step + compressed broadcast, then every worker's
model-shift update + compressed uplink, then the fixed-order aggregation.
Randomness is fully determined by the master seed through counter-style
streams: stream (purpose, worker, round) maps to an independent generator via
``numpy.random.SeedSequence(entropy=master_seed, spawn_key=...)``, so no state
survives between rounds, worker execution order cannot matter, and a run can
be resumed from any snapshot bit-exactly.

Stream key layout: (0, j) worker init, (1, k) server round k, (2, j, k) worker
j at round k, (3,) objective construction, (4, i) derived sweep seeds,
(5,) alpha estimation, (6,) initial-point draw.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .compressors import (
    analytic_alpha,
    compressor_from_string,
    estimate_alpha,
)
from .errors import (
    ConfigError,
    InsufficientDataError,
    MuonEfError,
    NoAnalyticAlphaError,
    RoundExecutionError,
    UnknownAxisError,
)
from .optimizer import (
    HyperParams,
    ServerState,
    WorkerState,
    aggregate,
    check_compressor_families,
    init_states,
    lyapunov,
    server_round,
    theory_momentum,
    theory_stepsize,
    worker_round,
)
from .problems import (
    ModelSpec,
    Objective,
    make_divergence_instance,
    make_quadratic_ensemble,
    make_tiny_mlp,
)
from .tensorcore import (
    FROBENIUS,
    LayeredTensor,
    dual_of,
    norm,
    norm_kind_from_string,
)

__all__ = [
    "stream",
    "RunConfig",
    "RunSetup",
    "CommLedger",
    "RoundRecord",
    "RoundContext",
    "RunResult",
    "run",
    "sweep",
    "rate_fit",
    "grad_dual_norms",
]


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (purpose, ...) key under one master seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(key)))


def grad_dual_norms(obj: Objective, norms, x: LayeredTensor) -> tuple[tuple[float, ...], float]:
    """Per-layer dual gradient norms at x and their l2 aggregate."""
    grad = obj.gradient(x)
    per_layer = tuple(norm(grad[i], dual_of(norms[i])) for i in range(len(norms)))
    return per_layer, math.sqrt(sum(v * v for v in per_layer))


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; equal configs give bit-identical results.

    Norms and compressors are carried as strings so the config stays hashable
    and trivially serializable; they are parsed once in ``prepare``.
    """

    # model
    shapes: tuple[tuple[int, int], ...]
    norms: tuple[str, ...]
    init: str = "zeros"  # zeros | random
    init_scale: float = 1.0
    # objective
    objective: str = "quadratic"  # quadratic | divergence | mlp
    workers: int = 1
    heterogeneity: float = 0.0
    conditioning: float = 10.0
    noise_sigma: tuple[float, ...] = ()
    objective_seed: int = 1
    dataset_size: int = 64
    dataset_noise: float = 0.0
    batch_size: int = 0  # 0 = full batch
    # optimizer
    variant: str = "deterministic"
    schedule: str = "radius"
    source: str = "manual"  # manual | T1 | T2 | T3 | T4
    radius: tuple[float, ...] = (0.1,)
    stepsize: tuple[float, ...] = (0.01,)
    beta: tuple[float, ...] = (1.0,)
    eta: float = 1.0
    uniform_stepsize: bool = True  # layer-wise theorem values are opt-in
    momentum_source: str = "manual"  # manual | corollary
    g0_policy: str = "auto"  # auto | gradient | stochastic | compressed-stochastic | zero
    spectral_backend: str = "exact"
    ns_iterations: int = 5
    ns_coefficients: tuple[float, float, float] = (3.4445, -4.7750, 2.0315)
    smoothness: str = "analytic"  # analytic | estimated
    # compressors
    server_compressor: str = "identity"
    worker_compressor: str = "identity"
    value_bits: int = 32
    alpha_d: str = "analytic"  # analytic | estimate | float literal
    alpha_p: str = "analytic"
    alpha_trials: int = 200
    alpha_samples: int = 40
    # harness
    rounds: int = 100
    master_seed: int = 0
    metric_cadence: int = 1
    record_lyapunov: str = "off"  # off | auto | T1 | T2
    grad_thresholds: tuple[float, ...] = ()
    track_alpha: bool = False
    message_log: bool = False
    sweep_seed_policy: str = "shared"  # shared | derived

    def prepare(self) -> "RunSetup":
        return RunSetup(self)


class RunSetup:
    """Parsed/constructed run ingredients: objective, hyperparameters, alphas."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        norms = tuple(norm_kind_from_string(s) for s in cfg.norms)
        if len(norms) != len(cfg.shapes):
            raise ConfigError("model.norms must list one norm per layer shape")
        self.spec = ModelSpec(shapes=tuple(tuple(s) for s in cfg.shapes), norms=norms)
        self.objective = self._build_objective()
        self.server_comp = compressor_from_string(cfg.server_compressor)
        self.worker_comp = compressor_from_string(cfg.worker_compressor)
        # Contraction parameters are needed only by theory stepsizes, Lyapunov
        # recording, and monitors; manual runs without them tolerate absence.
        needed = cfg.source in ("T1", "T2", "T3", "T4") or cfg.record_lyapunov != "off"
        try:
            self.alpha_p = self._resolve_alpha(cfg.alpha_p, self.server_comp, primal=True)
            self.alpha_d = self._resolve_alpha(cfg.alpha_d, self.worker_comp, primal=False)
        except ConfigError:
            if needed:
                raise
            self.alpha_p = self.alpha_d = None
        self.profile = self._build_profile()
        self.hp, self.g0_policy = self._build_hp()
        self.lyapunov_theorem = self._lyapunov_theorem()
        if cfg.source in ("T1", "T2", "T3", "T4"):
            check_compressor_families(cfg.source, self.hp)

    # -- construction pieces -------------------------------------------------

    def _build_objective(self) -> Objective:
        cfg = self.cfg
        rng = stream(cfg.objective_seed, 3)
        sigmas = cfg.noise_sigma if cfg.noise_sigma else tuple(0.0 for _ in cfg.shapes)
        if len(sigmas) == 1 and len(cfg.shapes) > 1:
            sigmas = tuple(sigmas[0] for _ in cfg.shapes)
        if cfg.objective == "quadratic":
            return make_quadratic_ensemble(
                self.spec, cfg.workers, cfg.heterogeneity, cfg.conditioning, rng, sigmas
            )
        if cfg.objective == "divergence":
            obj = make_divergence_instance(sigmas)
            if self.spec.shapes != obj.spec.shapes:
                raise ConfigError("divergence objective requires shapes = [[3, 1]]")
            return obj
        if cfg.objective == "mlp":
            return make_tiny_mlp(
                self.spec,
                cfg.dataset_size,
                cfg.dataset_noise,
                rng,
                n_workers=cfg.workers,
                sigmas=sigmas,
                batch_size=cfg.batch_size or None,
            )
        raise ConfigError(f"unknown objective {cfg.objective!r}")

    def _resolve_alpha(self, mode: str, comp, primal: bool) -> float:
        """Single contraction parameter for the theorem family of this run.

        Primal compressors contract in the layer norm; dual-side compressors in
        the dual norm (T1/T2) or the Euclidean norm (T3/T4 and manual
        stochastic runs). Per-layer values collapse to their minimum, which is
        always a valid (conservative) joint parameter.
        """
        cfg = self.cfg
        try:
            return float(mode)
        except ValueError:
            pass
        euclidean_side = cfg.variant == "stochastic"
        per_layer = []
        for i, kind in enumerate(self.spec.norms):
            if primal:
                target = kind
            else:
                target = FROBENIUS if euclidean_side else dual_of(kind)
            shape = self.spec.shapes[i]
            if mode == "analytic":
                try:
                    per_layer.append(analytic_alpha(comp, shape, target).alpha)
                except NoAnalyticAlphaError as exc:
                    raise ConfigError(
                        f"alpha mode 'analytic' unavailable for {comp} under {target}: {exc}; "
                        "use 'estimate' or a numeric value"
                    ) from exc
            elif mode == "estimate":
                rng = stream(cfg.master_seed, 5, 0 if primal else 1, i)
                sampler = lambda r, s=shape: r.standard_normal(s)
                per_layer.append(
                    estimate_alpha(
                        comp, target, sampler, cfg.alpha_trials, rng, cfg.alpha_samples
                    ).alpha
                )
            else:
                raise ConfigError(f"bad alpha mode {mode!r}")
        return min(per_layer)

    def _build_profile(self):
        cfg = self.cfg
        if cfg.smoothness == "analytic":
            try:
                return self.objective.analytic_profile()
            except Exception:
                if cfg.source in ("T1", "T2", "T3", "T4") or cfg.record_lyapunov != "off":
                    raise
                return None
        if cfg.smoothness == "estimated":
            from .problems import estimate_smoothness

            rng = stream(cfg.master_seed, 5, 1)
            x0 = self._initial_point()
            points = [x0] + [
                LayeredTensor([l + 0.5 * rng.standard_normal(l.shape) for l in x0])
                for _ in range(5)
            ]
            est = estimate_smoothness(self.objective, self.spec.norms, points, 20, rng)
            return est.conservative
        raise ConfigError(f"bad smoothness mode {cfg.smoothness!r}")

    def _build_hp(self) -> tuple[HyperParams, str]:
        cfg = self.cfg
        p = len(self.spec.shapes)

        def widen(values, name):
            vals = tuple(float(v) for v in values)
            if len(vals) == 1:
                vals = tuple(vals[0] for _ in range(p))
            if len(vals) != p:
                raise ConfigError(f"{name} must have 1 or {p} entries")
            return vals

        betas = widen(cfg.beta, "optimizer.beta")
        if cfg.source == "manual":
            schedule = cfg.schedule
            values = widen(cfg.radius if schedule == "radius" else cfg.stepsize, "optimizer schedule")
            g0 = cfg.g0_policy if cfg.g0_policy != "auto" else (
                "stochastic" if cfg.variant == "stochastic" else "gradient"
            )
        else:
            if cfg.source == "T3" and cfg.momentum_source == "corollary":
                delta0 = self._delta0()
                betas = theory_momentum(
                    self.profile, self.alpha_d, cfg.workers, cfg.rounds,
                    self.objective.sigmas, delta0, self.spec.norms, self.spec.shapes,
                )
            params = theory_stepsize(
                cfg.source, self.profile, self.alpha_p, self.alpha_d,
                betas if cfg.source == "T3" else None,
                cfg.workers, cfg.rounds, self.spec.norms, self.spec.shapes,
                eta=cfg.eta, uniform=cfg.uniform_stepsize,
            )
            schedule, values = params.schedule, params.values
            if cfg.source in ("T3", "T4"):
                betas = params.betas if cfg.source == "T4" else betas
            g0 = cfg.g0_policy if cfg.g0_policy != "auto" else params.g0_policy
        variant = cfg.variant
        hp = HyperParams(
            norms=self.spec.norms,
            schedule=schedule,
            values=values,
            betas=betas,
            server_compressor=self.server_comp,
            worker_compressor=self.worker_comp,
            variant=variant,
            spectral_backend=cfg.spectral_backend,
            ns_iterations=cfg.ns_iterations,
            ns_coefficients=tuple(cfg.ns_coefficients),
            value_bits=cfg.value_bits,
        )
        return hp, g0

    def _delta0(self) -> float:
        x0 = self._initial_point()
        if self.objective.f_star is None:
            raise ConfigError("momentum corollary needs an objective with known f*")
        return self.objective.value(x0) - self.objective.f_star

    def _initial_point(self) -> LayeredTensor:
        cfg = self.cfg
        if cfg.init == "zeros":
            return LayeredTensor.zeros(self.spec.shapes)
        if cfg.init == "random":
            return self.objective.initial_point(stream(cfg.master_seed, 6), cfg.init_scale)
        raise ConfigError(f"bad init {cfg.init!r}")

    def _lyapunov_theorem(self) -> str | None:
        mode = self.cfg.record_lyapunov
        if mode == "off":
            return None
        if mode == "auto":
            mode = "T1" if self.hp.schedule == "stepsize" else "T2"
        if mode not in ("T1", "T2"):
            raise ConfigError(f"bad record_lyapunov {mode!r}")
        return mode


# ---------------------------------------------------------------------------
# Ledger / results
# ---------------------------------------------------------------------------

@dataclass
class CommLedger:
    """Exact per-round bit accounting. Downlink counts the broadcast once per
    round; uplink counts every worker. ``min_alpha`` holds the smallest per-call
    analytic contraction parameter observed, per direction, when tracked."""

    uplink_per_round: list = field(default_factory=list)  # list of per-worker lists
    downlink_per_round: list = field(default_factory=list)
    cumulative_uplink: int = 0
    cumulative_downlink: int = 0
    min_alpha: dict = field(default_factory=dict)

    def record_round(self, broadcast, uplinks) -> None:
        down = sum(m.bit_cost for m in broadcast)
        ups = [sum(m.bit_cost for m in msgs) for msgs in uplinks]
        self.downlink_per_round.append(down)
        self.uplink_per_round.append(ups)
        self.cumulative_downlink += down
        self.cumulative_uplink += sum(ups)

    def observe_alpha(self, direction: str, value: float) -> None:
        prev = self.min_alpha.get(direction)
        if prev is None or value < prev:
            self.min_alpha[direction] = value


@dataclass(frozen=True)
class RoundRecord:
    k: int
    f: float
    grad_layers: tuple[float, ...]
    grad_agg: float
    lyapunov: float  # nan when not recorded
    uplink_cum: int
    downlink_cum: int


@dataclass(frozen=True)
class RoundContext:
    """Read-only view of one completed round, handed to monitor hooks."""

    k: int
    obj: Objective
    hp: HyperParams
    x_prev: LayeredTensor
    x_next: LayeredTensor
    g_used: LayeredTensor  # the G^k the LMO step consumed
    gammas: tuple[float, ...]
    duals: tuple[float, ...]


@dataclass
class RunResult:
    records: list[RoundRecord]
    ledger: CommLedger
    min_grad: float
    min_grad_round: int
    crossings: dict[float, int | None]
    master_seed: int
    objective_seed: int
    final_server: ServerState
    final_workers: list[WorkerState]
    messages: list | None = None

    def record_at(self, k: int) -> RoundRecord:
        for rec in self.records:
            if rec.k == k:
                return rec
        raise KeyError(f"round {k} was not recorded")

    def to_summary_dict(self) -> dict:
        return {
            "rounds": self.records[-1].k,
            "f_final": self.records[-1].f,
            "grad_final": self.records[-1].grad_agg,
            "min_grad": self.min_grad,
            "min_grad_round": self.min_grad_round,
            "uplink_bits_total": self.ledger.cumulative_uplink,
            "downlink_bits_total": self.ledger.cumulative_downlink,
            "grad_threshold_crossings": {f"{t:g}": r for t, r in self.crossings.items()},
            "master_seed": self.master_seed,
            "objective_seed": self.objective_seed,
        }


# ---------------------------------------------------------------------------
# The round loop
# ---------------------------------------------------------------------------

def run(
    config: RunConfig,
    hooks: tuple[Callable[[RoundContext], None], ...] = (),
    initial_state: tuple[ServerState, list[WorkerState], int] | None = None,
    setup: RunSetup | None = None,
) -> RunResult:
    """Execute K synchronous rounds; fully determined by the config.

    ``initial_state`` resumes from a snapshot at a given round; the stateless
    per-round rng streams make the continuation identical to an uninterrupted
    run. Hooks observe each round read-only and must not consume randomness.
    """
    setup = setup or config.prepare()
    cfg = config
    obj, hp = setup.objective, setup.hp

    if initial_state is None:
        x0 = setup._initial_point()
        init_rngs = [stream(cfg.master_seed, 0, j) for j in range(obj.n_workers)]
        server, workers = init_states(obj, x0, hp, setup.g0_policy, init_rngs)
        start_round = 0
    else:
        server, workers, start_round = initial_state

    ledger = CommLedger()
    records: list[RoundRecord] = []
    messages = [] if cfg.message_log else None
    crossings: dict[float, int | None] = {float(t): None for t in cfg.grad_thresholds}
    min_grad, min_grad_round = math.inf, -1

    def record_metrics(k: int) -> None:
        nonlocal min_grad, min_grad_round
        per_layer, agg = grad_dual_norms(obj, setup.spec.norms, server.x)
        psi = math.nan
        if setup.lyapunov_theorem is not None:
            psi = lyapunov(
                setup.lyapunov_theorem, obj, server, workers, hp,
                setup.profile, setup.alpha_p, setup.alpha_d,
            )
        records.append(
            RoundRecord(
                k=k, f=obj.value(server.x), grad_layers=per_layer, grad_agg=agg,
                lyapunov=psi, uplink_cum=ledger.cumulative_uplink,
                downlink_cum=ledger.cumulative_downlink,
            )
        )
        if agg < min_grad:
            min_grad, min_grad_round = agg, k
        for t in crossings:
            if crossings[t] is None and agg <= t:
                crossings[t] = k

    cadence = max(1, cfg.metric_cadence)
    record_metrics(start_round)

    for k in range(start_round, cfg.rounds):
        x_prev, w_prev, g_used = server.x, server.w, server.g
        try:
            server, broadcast = server_round(server, hp, stream(cfg.master_seed, 1, k))
            if cfg.track_alpha:
                _track_alpha(setup, ledger, "downlink", [server.x[i] - w_prev[i] for i in range(len(hp.norms))])
            uplinks = []
            for j in range(obj.n_workers):
                wrng = stream(cfg.master_seed, 2, j, k)
                if cfg.track_alpha:
                    _track_worker_alpha(setup, ledger, workers[j], server.w, k, j)
                workers[j], up = worker_round(workers[j], broadcast, obj, hp, wrng)
                uplinks.append(up)
            server = aggregate(server, uplinks, obj.n_workers)
        except MuonEfError as exc:
            raise RoundExecutionError(f"round {k}: {exc}") from exc
        ledger.record_round(broadcast, uplinks)
        if messages is not None:
            messages.append(
                (k, [m.to_bytes() for m in broadcast], [[m.to_bytes() for m in up] for up in uplinks])
            )
        for hook in hooks:
            hook(
                RoundContext(
                    k=k, obj=obj, hp=hp, x_prev=x_prev, x_next=server.x,
                    g_used=g_used, gammas=server.last_gammas, duals=server.last_duals,
                )
            )
        if (k + 1) % cadence == 0 or k + 1 == cfg.rounds:
            record_metrics(k + 1)

    return RunResult(
        records=records,
        ledger=ledger,
        min_grad=min_grad,
        min_grad_round=min_grad_round,
        crossings=crossings,
        master_seed=cfg.master_seed,
        objective_seed=cfg.objective_seed,
        final_server=server,
        final_workers=workers,
        messages=messages,
    )


def _track_alpha(setup: RunSetup, ledger: CommLedger, direction: str, deltas) -> None:
    comp = setup.server_comp if direction == "downlink" else setup.worker_comp
    for i, delta in enumerate(deltas):
        if not np.any(delta):
            continue
        target = setup.spec.norms[i] if direction == "downlink" else dual_of(setup.spec.norms[i])
        try:
            rep = analytic_alpha(comp, delta, target)
        except NoAnalyticAlphaError:
            continue
        ledger.observe_alpha(direction, rep.alpha)


def _track_worker_alpha(setup, ledger, wstate, w_next, k, j) -> None:
    """Recompute the uplink input exactly (streams are stateless, and the
    gradient draw precedes compressor draws inside worker_round)."""
    cfg = setup.cfg
    obj, hp = setup.objective, setup.hp
    if hp.variant == "stochastic":
        rng = stream(cfg.master_seed, 2, j, k)
        draw = obj.worker_stochastic_gradient(j, w_next, rng)
        m_next = LayeredTensor(
            [(1 - hp.betas[i]) * wstate.m[i] + hp.betas[i] * draw[i] for i in range(len(hp.norms))]
        )
        deltas = m_next - wstate.g
    else:
        deltas = obj.worker_gradient(j, w_next) - wstate.g
    _track_alpha(setup, ledger, "uplink", list(deltas))


# ---------------------------------------------------------------------------
# Sweeps and rate fits
# ---------------------------------------------------------------------------

def sweep(base: RunConfig, axis: str, values, **run_kwargs) -> list[RunResult]:
    """One run per value of a single config field; seed policy per the config.

    'shared' reuses the master seed for every point; 'derived' spawns a child
    seed per point from (master_seed, 4, index). MUON_EF_THREADS > 1 runs the
    points in a thread pool (results keep the input order).
    """
    if axis not in {f.name for f in base.__dataclass_fields__.values()}:
        raise UnknownAxisError(f"unknown sweep axis {axis!r}")
    configs = []
    for idx, value in enumerate(values):
        cfg = replace(base, **{axis: value})
        if base.sweep_seed_policy == "derived":
            child = int(stream(base.master_seed, 4, idx).integers(0, 2**63 - 1))
            cfg = replace(cfg, master_seed=child)
        configs.append(cfg)
    threads = int(os.environ.get("MUON_EF_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda c: run(c, **run_kwargs), configs))
    return [run(c, **run_kwargs) for c in configs]


def rate_fit(result: RunResult, metric: str, window: tuple[int, int]) -> tuple[float, float]:
    """Least-squares slope of log(metric) vs log(round) over the window.

    metric 'min_grad' is the running minimum of the aggregate dual gradient
    norm; 'avg_sq_grad' the running average of its square over recorded rounds
    (exact when the metric cadence is 1). Returns (slope, r^2).
    """
    if metric not in ("min_grad", "avg_sq_grad"):
        raise ValueError(f"unknown metric {metric!r}")
    ks, ys = [], []
    running_min = math.inf
    running_sum, count = 0.0, 0
    for rec in result.records:
        running_min = min(running_min, rec.grad_agg)
        running_sum += rec.grad_agg**2
        count += 1
        if rec.k < 1:
            continue
        y = running_min if metric == "min_grad" else running_sum / count
        if window[0] <= rec.k <= window[1] and y > 0:
            ks.append(math.log(rec.k))
            ys.append(math.log(y))
    if len(ks) < 10:
        raise InsufficientDataError(
            f"need >= 10 positive recorded points in window {window}, got {len(ks)}"
        )
    ks_arr, ys_arr = np.array(ks), np.array(ys)
    design = np.stack([np.ones_like(ks_arr), ks_arr], axis=1)
    (intercept, slope), *_ = np.linalg.lstsq(design, ys_arr, rcond=None)
    pred = intercept + slope * ks_arr
    ss_res = float(np.sum((ys_arr - pred) ** 2))
    ss_tot = float(np.sum((ys_arr - ys_arr.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), r2
