"""Independent brute-force oracles and runtime inequality monitors.

Everything here checks the other modules from the outside: finite differences
validate gradients, exhaustive corner enumeration and random feasible points
validate LMO optimality, and the two descent lemmas are evaluated per round on
live runs. Each check returns a ``CheckReport``; negative controls (fault
injection) exist for every monitor so a broken check cannot pass silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import UnsupportedNormError
from .lmo import lmo_direction, max_row_sum_sharp_column_form, sharp
from .problems import Objective, SmoothnessProfile
from .tensorcore import (
    MAX_ROW_SUM,
    LayeredTensor,
    NormKind,
    dual_of,
    inner,
    norm,
    svd,
)

__all__ = [
    "CheckReport",
    "fd_gradient_check",
    "CorruptedGradientObjective",
    "lmo_optimality_check",
    "lmo_exhaustive_corner_check",
    "DescentLemmaMonitor",
    "max_row_sum_sharp_discrepancy",
    "run_ef_free_compressed_gd",
    "random_unit_ball_point",
]


@dataclass(frozen=True)
class CheckReport:
    """pass flag is derived: passed iff worst <= tolerance."""

    name: str
    passed: bool
    worst: float
    samples: int
    tolerance: float

    @classmethod
    def from_residual(cls, name: str, worst: float, samples: int, tolerance: float):
        worst = float(worst)
        return cls(name, worst <= tolerance, worst, int(samples), float(tolerance))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "worst_residual": float(self.worst),
            "samples": int(self.samples),
            "tolerance": float(self.tolerance),
        }


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def fd_gradient_check(
    obj: Objective,
    x: LayeredTensor,
    eps: float,
    rng: np.random.Generator,
    directions: int = 50,
    tolerance: float = 1e-5,
) -> CheckReport:
    """Central differences along random unit directions, layer by layer.

    Residual per direction: |fd - <grad_i, E>| / max(1, |<grad_i, E>|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps out of the supported range: {eps}")
    grad = obj.gradient(x)
    worst = 0.0
    count = 0
    for i, layer in enumerate(x):
        for _ in range(directions):
            direction = rng.standard_normal(layer.shape)
            direction /= np.linalg.norm(direction)
            bumped_up = x.replace_layer(i, layer + eps * direction)
            bumped_dn = x.replace_layer(i, layer - eps * direction)
            fd = (obj.value(bumped_up) - obj.value(bumped_dn)) / (2.0 * eps)
            analytic = inner(grad[i], direction)
            worst = max(worst, abs(fd - analytic) / max(1.0, abs(analytic)))
            count += 1
    return CheckReport.from_residual("fd_gradient", worst, count, tolerance)


class CorruptedGradientObjective(Objective):
    """Fault-injection wrapper: adds a constant to one gradient entry."""

    def __init__(self, base: Objective, bump: float = 1.0):
        self.base = base
        self.bump = bump
        self.spec = base.spec
        self.n_workers = base.n_workers
        self.sigmas = base.sigmas
        self.f_star = base.f_star
        self.worker_stars = base.worker_stars

    def worker_value(self, j, x):
        return self.base.worker_value(j, x)

    def worker_gradient(self, j, x):
        grad = self.base.worker_gradient(j, x)
        first = grad[0].copy()
        first[0, 0] += self.bump
        return grad.replace_layer(0, first)


# ---------------------------------------------------------------------------
# LMO optimality
# ---------------------------------------------------------------------------

def random_unit_ball_point(kind: NormKind, shape, rng: np.random.Generator) -> np.ndarray:
    """A random feasible point of the unit ball of ``kind``.

    Spectral uses SVD clipping of a raw Gaussian; every other kind scales a
    Gaussian onto the unit sphere (scaled by a random radius in (0, 1]).
    """
    z = rng.standard_normal(shape)
    if kind.name == "spectral":
        u, s, v = svd(z)
        return (u * np.minimum(s, 1.0)) @ v.T
    value = norm(z, kind)
    if value == 0.0:
        return z
    return z * (rng.uniform(0.0, 1.0) / value)


def lmo_optimality_check(
    kind: NormKind,
    trials: int,
    samples_per_trial: int,
    rng: np.random.Generator,
    shape=(3, 4),
    tolerance: float = 1e-10,
) -> CheckReport:
    """The LMO identity <G, lmo(G)> = -||G||_* plus 'never beaten' sampling."""
    worst = 0.0
    count = 0
    for _ in range(trials):
        g = rng.standard_normal(shape)
        res = lmo_direction(g, kind)
        scale = max(1.0, res.dual_norm_value)
        worst = max(worst, abs(inner(g, res.direction) + res.dual_norm_value) / scale)
        best = inner(g, res.direction)
        for _ in range(samples_per_trial):
            z = random_unit_ball_point(kind, shape, rng)
            worst = max(worst, (best - inner(g, z)) / scale)
            count += 1
    return CheckReport.from_residual(f"lmo_optimality[{kind}]", worst, count, tolerance)


def _ball_corners(kind: NormKind, shape):
    """Extreme points of small unit balls where the linear program is attained."""
    rows, cols = shape
    if kind.name == "linf":
        for signs in product((-1.0, 0.0, 1.0), repeat=rows * cols):
            yield np.array(signs).reshape(rows, cols)
    elif kind.name == "l1":
        for flat in range(rows * cols):
            for sign in (-1.0, 1.0):
                z = np.zeros(rows * cols)
                z[flat] = sign
                yield z.reshape(rows, cols)
        yield np.zeros((rows, cols))
    elif kind.name == "max_row_sum":
        # One +-1 entry per row (a vertex of each row's cross-polytope).
        per_row = [(c, s) for c in range(cols) for s in (-1.0, 1.0)]
        for combo in product(per_row, repeat=rows):
            z = np.zeros((rows, cols))
            for r, (c, s) in enumerate(combo):
                z[r, c] = s
            yield z
    else:
        raise UnsupportedNormError(f"no corner enumeration for {kind}")


def lmo_exhaustive_corner_check(kind: NormKind, shape=(2, 2), tolerance: float = 1e-12) -> CheckReport:
    """Exact optimality over every sign-pattern gradient and every ball corner."""
    rows, cols = shape
    corners = list(_ball_corners(kind, shape))
    worst = 0.0
    count = 0
    for pattern in product((-1.0, 0.0, 1.0), repeat=rows * cols):
        g = np.array(pattern).reshape(shape)
        if not np.any(g):
            continue
        res = lmo_direction(g, kind)
        best_corner = min(inner(g, z) for z in corners)
        worst = max(worst, abs(inner(g, res.direction) - best_corner))
        count += 1
    return CheckReport.from_residual(f"lmo_corners[{kind}]", worst, count, tolerance)


# ---------------------------------------------------------------------------
# Descent lemma monitors
# ---------------------------------------------------------------------------

class DescentLemmaMonitor:
    """Per-round evaluation of the descent lemmas on a live run.

    Radius-scheduled runs check the first-power lemma
        f(X+) <= f(X) + sum_i 2 t_i ||grad_i - G_i||_* - sum_i t_i ||grad_i||_*
                 + sum_i (L0_i + L1_i ||grad_i||_*) / 2 * t_i^2
    and stepsize-scheduled runs the squared-norm lemma
        f(X+) <= f(X) + sum_i (3 g_i / 2) ||grad_i - G_i||_*^2
                 - sum_i (g_i / 4) ||grad_i||_*^2
                 - sum_i (1/(4 g_i) - L0_i / 2) g_i^2 ||G_i||_*^2.

    ``profile_scale`` rescales the smoothness constants; values below 1 are the
    fault-injection negative control. Attach ``observe`` as a run hook.
    """

    def __init__(
        self,
        profile: SmoothnessProfile,
        schedule: str,
        tolerance: float = 1e-8,
        profile_scale: float = 1.0,
    ):
        self.profile = profile.scaled(profile_scale)
        self.schedule = schedule
        self.tolerance = tolerance
        self.worst = -math.inf
        self.violations = 0
        self.rounds = 0

    def observe(self, ctx) -> None:
        duals = [dual_of(k) for k in ctx.hp.norms]
        grad = ctx.obj.gradient(ctx.x_prev)
        f_prev = ctx.obj.value(ctx.x_prev)
        f_next = ctx.obj.value(ctx.x_next)
        rhs = f_prev
        for i in range(len(ctx.hp.norms)):
            grad_norm = norm(grad[i], duals[i])
            mismatch = norm(grad[i] - ctx.g_used[i], duals[i])
            if self.schedule == "radius":
                step = ctx.gammas[i] * ctx.duals[i]  # actual step length this round
                rhs += 2.0 * step * mismatch - step * grad_norm
                rhs += 0.5 * (self.profile.l0[i] + self.profile.l1[i] * grad_norm) * step**2
            else:
                gamma = ctx.gammas[i]  # the configured stepsize for this round
                if gamma == 0.0:
                    continue
                g_norm = norm(ctx.g_used[i], duals[i])
                rhs += 1.5 * gamma * mismatch**2 - 0.25 * gamma * grad_norm**2
                rhs -= (0.25 / gamma - 0.5 * self.profile.l0[i]) * gamma**2 * g_norm**2
        margin = self.tolerance * max(1.0, abs(f_prev))
        violation = f_next - rhs
        self.worst = max(self.worst, violation)
        if violation > margin:
            self.violations += 1
        self.rounds += 1

    def report(self) -> CheckReport:
        return CheckReport(
            name=f"descent_lemma[{self.schedule}]",
            passed=self.violations == 0,
            worst=self.worst,
            samples=self.rounds,
            tolerance=self.tolerance,
        )


# ---------------------------------------------------------------------------
# Max-row-sum sharp discrepancy (surfaced, not patched)
# ---------------------------------------------------------------------------

def _sharp_objective(g: np.ndarray, x: np.ndarray, kind: NormKind) -> float:
    return inner(g, x) - 0.5 * norm(x, kind) ** 2


def max_row_sum_sharp_discrepancy(shapes=((2, 2), (3, 2))) -> dict:
    """Cross-check the row-separable sharp operator against the verbatim
    column-wise transcription and an exhaustive corner oracle.

    The corner oracle maximizes <G, X> - ||X||^2/2 exactly: the maximizer is
    s* Z* with Z* the corner maximizing <G, Z> over the unit ball and
    s* = <G, Z*>. Returns per-shape worst gaps; ``column_form_matches`` stays
    False whenever the transcription is suboptimal on some sign pattern.
    """
    out = {"column_form_matches": True, "row_form_matches": True, "examples": []}
    for shape in shapes:
        corners = list(_ball_corners(MAX_ROW_SUM, shape))
        worst_gap_column = 0.0
        worst_gap_row = 0.0
        witness = None
        for pattern in product((-1.0, 0.0, 1.0, 2.0), repeat=shape[0] * shape[1]):
            g = np.array(pattern).reshape(shape)
            if not np.any(g):
                continue
            dual_oracle = max(inner(g, z) for z in corners)
            oracle_value = 0.5 * dual_oracle**2
            row_value = _sharp_objective(g, sharp(g, MAX_ROW_SUM), MAX_ROW_SUM)
            col_value = _sharp_objective(g, max_row_sum_sharp_column_form(g), MAX_ROW_SUM)
            worst_gap_row = max(worst_gap_row, abs(oracle_value - row_value))
            gap_col = oracle_value - col_value
            if gap_col > worst_gap_column:
                worst_gap_column = gap_col
                witness = g.copy()
        out["examples"].append(
            {
                "shape": list(shape),
                "row_form_worst_gap": float(worst_gap_row),
                "column_form_worst_gap": float(worst_gap_column),
                "column_form_witness": None if witness is None else witness.tolist(),
            }
        )
        if worst_gap_row > 1e-10:
            out["row_form_matches"] = False
        if worst_gap_column > 1e-10:
            out["column_form_matches"] = False
    return out


# ---------------------------------------------------------------------------
# Reference loops
# ---------------------------------------------------------------------------

def run_ef_free_compressed_gd(
    obj: Objective,
    x0: LayeredTensor,
    compressor_kind,
    step: float,
    rounds: int,
    rng: np.random.Generator,
) -> list[float]:
    """Naive compressed distributed GD without any error feedback:
    x <- x - step * mean_j C(grad_j(x)). Returns the Euclidean gradient-norm
    trajectory (the divergence counterexample's oracle)."""
    from .compressors import compress, decompress

    x = x0.copy()
    history = []
    for _ in range(rounds):
        agg = None
        for j in range(obj.n_workers):
            grad = obj.worker_gradient(j, x)
            layers = [decompress(compress(compressor_kind, g, rng)) for g in grad]
            update = LayeredTensor(layers)
            agg = update if agg is None else agg + update
        agg = agg * (1.0 / obj.n_workers)
        x = x - step * agg
        history.append(obj.gradient(x).norm2())
        if not math.isfinite(history[-1]) or history[-1] > 1e300:
            break
    return history


# ---------------------------------------------------------------------------
# Aggregated suites (consumed by the CLI verify subcommand)
# ---------------------------------------------------------------------------

def suite_identities(rng: np.random.Generator, inject: str | None = None) -> tuple[list[CheckReport], dict]:
    """LMO/sharp identities, corner optimality, homogeneity, step equivalence."""
    from .lmo import LMO_SUPPORTED, lmo_step

    reports = []
    shapes = [(2, 2), (4, 6), (5, 3)]
    for kind in LMO_SUPPORTED:
        reports.append(lmo_optimality_check(kind, 50, 20, rng, shape=(4, 5)))
        worst = 0.0
        samples = 0
        for shape in shapes:
            for _ in range(60):
                g = rng.standard_normal(shape)
                res = lmo_direction(g, kind)
                gs = sharp(g, kind)
                scale = max(1.0, res.dual_norm_value**2)
                worst = max(worst, abs(inner(g, gs) - norm(gs, kind) ** 2) / scale)
                worst = max(worst, abs(res.dual_norm_value - norm(gs, kind)) / max(1.0, res.dual_norm_value))
                # positive homogeneity of the direction
                res_scaled = lmo_direction(3.0 * g, kind)
                worst = max(worst, float(np.max(np.abs(res.direction - res_scaled.direction))))
                # step equivalence across the two schedule forms
                x = rng.standard_normal(shape)
                t = float(rng.uniform(0.1, 2.0))
                step_a = lmo_step(x, g, t, kind)
                step_b = x - (t / res.dual_norm_value) * gs
                worst = max(worst, float(np.max(np.abs(step_a - step_b))))
                samples += 1
        reports.append(CheckReport.from_residual(f"sharp_identities[{kind}]", worst, samples, 1e-10))
    from .tensorcore import ENTRYWISE_L1, ENTRYWISE_LINF

    reports.append(lmo_exhaustive_corner_check(ENTRYWISE_LINF, (2, 2)))
    reports.append(lmo_exhaustive_corner_check(ENTRYWISE_L1, (2, 2)))

    discrepancy = max_row_sum_sharp_discrepancy()
    reports.append(
        CheckReport(
            name="max_row_sum_sharp_row_form_vs_oracle",
            passed=discrepancy["row_form_matches"],
            worst=max(e["row_form_worst_gap"] for e in discrepancy["examples"]),
            samples=len(discrepancy["examples"]),
            tolerance=1e-10,
        )
    )
    if inject == "corrupt-gradient":
        from .problems import ModelSpec, make_quadratic_ensemble
        from .tensorcore import FROBENIUS

        spec = ModelSpec(shapes=((3, 2),), norms=(FROBENIUS,))
        obj = CorruptedGradientObjective(
            make_quadratic_ensemble(spec, 2, 0.5, 5.0, np.random.default_rng(0))
        )
        x = LayeredTensor([rng.standard_normal(s) for s in spec.shapes])
        reports.append(fd_gradient_check(obj, x, 1e-5, rng))
    return reports, {"max_row_sum_column_form": discrepancy}


def suite_compressors(rng: np.random.Generator, inject: str | None = None) -> tuple[list[CheckReport], dict]:
    """Empirical contractivity against every analytic alpha, plus determinism
    and the relative-cost table."""
    from .compressors import (
        ColumnTopK,
        Damping,
        Natural,
        RandomDropout,
        TopK,
        TopKSvd,
        analytic_alpha,
        compress,
        compressor_from_string,
        decompress,
        relative_cost,
    )
    from .tensorcore import FROBENIUS, NUCLEAR, SPECTRAL, column_lpq, schatten

    overclaim = 0.2 if inject == "alpha-overclaim" else 0.0
    reports = []
    cases = [
        (Damping(0.5), FROBENIUS),
        (Damping(0.5), SPECTRAL),
        (RandomDropout(0.3), FROBENIUS),
        (RandomDropout(0.3), NUCLEAR),
        (TopK(0.25), FROBENIUS),
        (TopKSvd(1), SPECTRAL),
        (TopKSvd(1), NUCLEAR),
        (TopKSvd(1), FROBENIUS),
        (TopKSvd(1), schatten(3)),
        (ColumnTopK(2.0, 2), column_lpq(2, 1)),
    ]
    for kind, norm_kind in cases:
        worst = -math.inf
        samples = 0
        draws = 200
        for _ in range(8):
            x = rng.standard_normal((4, 6))
            denom = norm(x, norm_kind) ** 2
            alpha = analytic_alpha(kind, x, norm_kind).alpha + overclaim
            ratios = []
            n_draws = draws if isinstance(kind, (RandomDropout, Natural)) else 1
            for _ in range(n_draws):
                err = decompress(compress(kind, x, rng)) - x
                ratios.append(norm(err, norm_kind) ** 2 / denom)
            mean = float(np.mean(ratios))
            se = float(np.std(ratios) / math.sqrt(len(ratios))) if len(ratios) > 1 else 0.0
            worst = max(worst, mean - ((1.0 - alpha) + 3.0 * se))
            samples += len(ratios)
        reports.append(
            CheckReport.from_residual(f"contractivity[{kind}@{norm_kind}]", worst, samples, 1e-12)
        )

    # determinism: identical (kind, input, seed) -> identical bytes
    x = rng.standard_normal((5, 4))
    worst_det = 0.0
    for spec in ("topk(0.3)", "natural", "dropout(0.5)", "rankk(0.5)", "topk(0.3)+natural"):
        kind = compressor_from_string(spec)
        a = compress(kind, x, np.random.default_rng(7)).to_bytes()
        b = compress(kind, x, np.random.default_rng(7)).to_bytes()
        worst_det = max(worst_det, 0.0 if a == b else 1.0)
    reports.append(CheckReport.from_residual("determinism", worst_det, 5, 0.0))

    table = {
        "identity": 1.0000, "natural": 0.5000,
        "topk(0.2)": 0.3625, "topk(0.15)": 0.2718, "topk(0.15)+natural": 0.1969,
        "topk(0.1)": 0.1812, "topk(0.1)+natural": 0.1312, "topk(0.05)": 0.0906,
    }
    worst_tab = 0.0
    for spec, expected in table.items():
        got = relative_cost(compressor_from_string(spec), [(50304, 768)])
        worst_tab = max(worst_tab, abs(got - expected))
    reports.append(CheckReport.from_residual("relative_cost_table", worst_tab, len(table), 1e-4))
    return reports, {}


def suite_convergence(rng: np.random.Generator, inject: str | None = None) -> tuple[list[CheckReport], dict]:
    """Theory-stepsize bound, Lyapunov monotonicity, descent monitor, and the
    error-feedback necessity demo, on desk-scale instances."""
    from .compressors import TopK
    from .harness import RunConfig, run

    cfg = RunConfig(
        shapes=((4, 4), (3, 5)),
        norms=("frobenius", "frobenius"),
        init="random",
        init_scale=1.0,
        objective="quadratic",
        workers=4,
        heterogeneity=1.0,
        conditioning=8.0,
        objective_seed=11,
        variant="deterministic",
        source="T1",
        uniform_stepsize=True,
        server_compressor="damping(0.8)",
        worker_compressor="topk(0.5)",
        alpha_d="analytic",
        alpha_p="analytic",
        rounds=400,
        master_seed=3,
        record_lyapunov="T1",
    )
    setup = cfg.prepare()
    monitor = DescentLemmaMonitor(setup.profile, setup.hp.schedule)
    result = run(cfg, hooks=(monitor.observe,), setup=setup)
    reports = [monitor.report()]

    # radius-scheduled counterpart: the first-power lemma carries the smoothness
    # constants directly, so the fault injection cuts them there. The negative
    # control runs on a scalar quadratic where the lemma is tight: halving L0
    # must flag every round.
    from dataclasses import replace as _replace

    radius_cfg = _replace(cfg, source="T2", eta=0.5, record_lyapunov="T2", rounds=150)
    if inject == "halved-smoothness":
        radius_cfg = _replace(
            radius_cfg, shapes=((1, 1),), norms=("frobenius",), workers=1,
            heterogeneity=0.0, worker_compressor="identity", server_compressor="identity",
            record_lyapunov="off",
        )
    radius_setup = radius_cfg.prepare()
    scale = 0.5 if inject == "halved-smoothness" else 1.0
    radius_monitor = DescentLemmaMonitor(
        radius_setup.profile, radius_setup.hp.schedule, profile_scale=scale
    )
    run(radius_cfg, hooks=(radius_monitor.observe,), setup=radius_setup)
    reports.append(radius_monitor.report())

    psi = [r.lyapunov for r in result.records]
    worst_increase = max(
        (psi[i + 1] - psi[i]) / max(1.0, abs(psi[i])) for i in range(len(psi) - 1)
    )
    reports.append(CheckReport.from_residual("lyapunov_monotone[T1]", worst_increase, len(psi), 1e-10))

    gamma_bar = sum(setup.hp.values) / len(setup.hp.values)
    avg_sq = sum(r.grad_agg**2 for r in result.records[:-1]) / (len(result.records) - 1)
    bound = 4.0 * psi[0] / (cfg.rounds * gamma_bar)
    reports.append(
        CheckReport.from_residual("telescoped_bound[T1]", avg_sq - bound, cfg.rounds, 0.0)
    )

    # finite-difference gradient validation of the objectives the runs consume
    from .problems import make_tiny_mlp
    from .tensorcore import FROBENIUS as _FRO
    from .problems import ModelSpec as _MS

    # eps = 1e-4: quadratics carry no truncation error, so the larger step just
    # shrinks the cancellation roundoff (~|f| eps_mach / eps) below tolerance
    x_fd = LayeredTensor([rng.standard_normal(s) for s in setup.spec.shapes])
    reports.append(fd_gradient_check(setup.objective, x_fd, 1e-4, rng, tolerance=1e-9))
    mlp_spec = _MS(shapes=((4, 3), (2, 4)), norms=(_FRO, _FRO))
    mlp = make_tiny_mlp(mlp_spec, 12, 0.05, np.random.default_rng(1), n_workers=2)
    x_mlp = LayeredTensor([0.5 * rng.standard_normal(s) for s in mlp_spec.shapes])
    reports.append(fd_gradient_check(mlp, x_mlp, 1e-5, rng))

    # error-feedback necessity
    from .problems import make_divergence_instance

    obj = make_divergence_instance()
    x0 = LayeredTensor([np.ones((3, 1))])
    naive = run_ef_free_compressed_gd(obj, x0, TopK(1.0 / 3.0), 0.1, 200, rng)
    grad0 = obj.gradient(x0).norm2()
    growth = naive[-1] / grad0
    reports.append(
        CheckReport(
            name="ef_free_divergence",
            passed=growth >= 1e3,
            worst=growth,
            samples=len(naive),
            tolerance=1e3,
        )
    )
    ef_cfg = RunConfig(
        shapes=((3, 1),),
        norms=("frobenius",),
        init="random",
        init_scale=1.0,
        objective="divergence",
        workers=3,
        objective_seed=0,
        variant="deterministic",
        source="manual",
        schedule="stepsize",
        stepsize=(0.02,),
        worker_compressor="topk(0.34)",
        alpha_d="analytic",
        rounds=3000,
        master_seed=5,
        metric_cadence=10,
    )
    ef_result = run(ef_cfg)
    reports.append(
        CheckReport(
            name="ef21_converges_on_divergence_instance",
            passed=ef_result.min_grad < 1e-6,
            worst=ef_result.min_grad,
            samples=ef_cfg.rounds,
            tolerance=1e-6,
        )
    )
    return reports, {}


VERIFY_SUITES = {
    "identities": suite_identities,
    "compressors": suite_compressors,
    "convergence": suite_convergence,
}
