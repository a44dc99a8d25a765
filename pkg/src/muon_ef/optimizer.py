"""Server and worker state machines for the bidirectionally compressed LMO
optimizer, plus stepsize/momentum calculators and Lyapunov evaluators derived
from the convergence theory.

Round structure (one synchronous round k):

    server:  X^{k+1}_i = X^k_i + s_i * lmo_dir(G^k_i)      s_i = gamma_i * ||G^k_i||_*
             S^k_i     = C_srv(X^{k+1}_i - W^k_i)
             W^{k+1}_i = W^k_i + S^k_i
    worker:  W^{k+1}_i = W^k_i + S^k_i                       (replica update)
             M^{k+1}   = (1-beta) M^k + beta grad_j(W^{k+1}; xi)   [stochastic]
             R^{k+1}_i = C_j(M^{k+1}_i - G^k_{j,i})          (or exact-grad form)
             G^{k+1}_j = G^k_j + R^{k+1}
    server:  G^{k+1}   = G^k + (1/n) sum_j R^{k+1}_j         (fixed worker order)

A radius schedule t_i is realized through the recorded effective stepsize
gamma_i = t_i / ||G^k_i||_*, so replaying the recorded gammas as a stepsize
schedule reproduces the run bit-for-bit. Zero-gradient layers skip their step.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .compressors import (
    CompressedMessage,
    CompressorKind,
    Composed,
    Damping,
    Identity,
    Natural,
    RandomDropout,
    RankK,
    TopK,
    TopKSvd,
    ColumnTopK,
    compress,
    decompress,
)
from .errors import (
    MissingConstantError,
    MissingWorkerError,
    UnknownObjectiveError,
)
from .lmo import NS_COEFFS_MUON, lmo_direction, newton_schulz
from .problems import Objective, SmoothnessProfile
from .tensorcore import (
    LayeredTensor,
    NormKind,
    dual_of,
    inner,
    norm,
    norm_equivalence,
)

__all__ = [
    "ServerState",
    "WorkerState",
    "HyperParams",
    "server_round",
    "worker_round",
    "aggregate",
    "init_states",
    "TheoryParams",
    "theory_stepsize",
    "theory_momentum",
    "lyapunov",
    "check_compressor_families",
    "save_snapshot",
    "load_snapshot",
]


@dataclass
class ServerState:
    x: LayeredTensor
    w: LayeredTensor
    g: LayeredTensor
    k: int = 0
    last_gammas: tuple[float, ...] = ()
    last_duals: tuple[float, ...] = ()


@dataclass
class WorkerState:
    worker_id: int
    w: LayeredTensor
    g: LayeredTensor
    m: LayeredTensor | None = None  # momentum, stochastic variant only


@dataclass(frozen=True)
class HyperParams:
    """Per-run hyperparameters.

    Exactly one of the radius/stepsize interpretations is active: ``schedule``
    selects it and ``values`` carries the per-layer t_i^k or gamma_i^k. Each
    per-layer entry is either a constant or a round-indexed sequence.
    """

    norms: tuple[NormKind, ...]
    schedule: str  # "radius" | "stepsize"
    values: tuple  # per layer: float or sequence indexed by round
    betas: tuple[float, ...]
    server_compressor: CompressorKind
    worker_compressor: CompressorKind
    variant: str = "deterministic"  # "deterministic" | "stochastic"
    spectral_backend: str = "exact"  # "exact" | "newton_schulz"
    ns_iterations: int = 5
    ns_coefficients: tuple[float, float, float] = NS_COEFFS_MUON
    value_bits: int = 32

    def __post_init__(self):
        if self.schedule not in ("radius", "stepsize"):
            raise ValueError(f"bad schedule {self.schedule!r}")
        if self.variant not in ("deterministic", "stochastic"):
            raise ValueError(f"bad variant {self.variant!r}")
        if len(self.values) != len(self.norms) or len(self.betas) != len(self.norms):
            raise ValueError("per-layer schedule/momentum lengths must match the norm list")
        for b in self.betas:
            if not 0 < b <= 1:
                raise ValueError(f"momentum must be in (0, 1], got {b}")

    def value_at(self, layer: int, k: int) -> float:
        v = self.values[layer]
        if isinstance(v, (int, float)):
            return float(v)
        return float(v[k])


def _direction_and_dual(g_mat: np.ndarray, kind: NormKind, hp: HyperParams):
    if (
        kind.name == "spectral"
        and hp.spectral_backend == "newton_schulz"
        and np.any(g_mat)
    ):
        approx = newton_schulz(g_mat, hp.ns_iterations, hp.ns_coefficients)
        # <G, NS(G)> approximates the nuclear norm; used for gamma bookkeeping.
        return -approx, max(inner(g_mat, approx), 0.0)
    res = lmo_direction(g_mat, kind)
    return res.direction, res.dual_norm_value


def server_round(
    state: ServerState, hp: HyperParams, rng: np.random.Generator
) -> tuple[ServerState, list[CompressedMessage]]:
    """LMO step on X, then compressed model-shift broadcast."""
    new_x, gammas, duals = [], [], []
    for i, kind in enumerate(hp.norms):
        direction, dual = _direction_and_dual(state.g[i], kind, hp)
        value = hp.value_at(i, state.k)
        if hp.schedule == "radius":
            gamma = value / dual if dual > 0.0 else 0.0
        else:
            gamma = value
        step_scale = gamma * dual
        new_x.append(state.x[i] + step_scale * direction if step_scale != 0.0 else state.x[i].copy())
        gammas.append(gamma)
        duals.append(dual)
    x_next = LayeredTensor(new_x)
    broadcast = [
        compress(hp.server_compressor, x_next[i] - state.w[i], rng, hp.value_bits)
        for i in range(len(hp.norms))
    ]
    w_next = LayeredTensor(
        [state.w[i] + decompress(broadcast[i]) for i in range(len(hp.norms))]
    )
    next_state = ServerState(
        x=x_next, w=w_next, g=state.g, k=state.k + 1,
        last_gammas=tuple(gammas), last_duals=tuple(duals),
    )
    return next_state, broadcast


def worker_round(
    wstate: WorkerState,
    broadcast: list[CompressedMessage],
    obj: Objective,
    hp: HyperParams,
    rng: np.random.Generator,
) -> tuple[WorkerState, list[CompressedMessage]]:
    """Model-shift replica update, local gradient/momentum, compressed uplink."""
    w_next = LayeredTensor(
        [wstate.w[i] + decompress(broadcast[i]) for i in range(len(hp.norms))]
    )
    if hp.variant == "stochastic":
        grad = obj.worker_stochastic_gradient(wstate.worker_id, w_next, rng)
        m_next = LayeredTensor(
            [
                (1.0 - hp.betas[i]) * wstate.m[i] + hp.betas[i] * grad[i]
                for i in range(len(hp.norms))
            ]
        )
        delta = m_next - wstate.g
    else:
        m_next = None
        delta = obj.worker_gradient(wstate.worker_id, w_next) - wstate.g
    uplink = [
        compress(hp.worker_compressor, delta[i], rng, hp.value_bits)
        for i in range(len(hp.norms))
    ]
    g_next = LayeredTensor(
        [wstate.g[i] + decompress(uplink[i]) for i in range(len(hp.norms))]
    )
    return WorkerState(wstate.worker_id, w_next, g_next, m_next), uplink


def aggregate(state: ServerState, uplinks: list[list[CompressedMessage]], n_workers: int) -> ServerState:
    """G <- G + (1/n) sum_j decompress(R_j), summed in fixed worker-id order."""
    if len(uplinks) != n_workers:
        raise MissingWorkerError(f"expected {n_workers} uplinks, got {len(uplinks)}")
    layers = [g.copy() for g in state.g]
    for msgs in uplinks:
        for i, msg in enumerate(msgs):
            layers[i] += decompress(msg) / n_workers
    return replace(state, g=LayeredTensor(layers))


def init_states(
    obj: Objective,
    x0: LayeredTensor,
    hp: HyperParams,
    policy: str,
    worker_rngs,
) -> tuple[ServerState, list[WorkerState]]:
    """Initial server/worker states under a G0 policy.

    Policies: 'gradient' (G_j = exact gradient at X0), 'stochastic'
    (G_j = M_j = one stochastic draw), 'compressed-stochastic' (M_j = draw,
    G_j = C_j(M_j)), 'zero'. W0 = X0 everywhere.
    """
    workers = []
    track_momentum = hp.variant == "stochastic"
    for j in range(obj.n_workers):
        rng = worker_rngs[j]
        if policy == "gradient":
            g0 = obj.worker_gradient(j, x0)
            m0 = g0.copy() if track_momentum else None
        elif policy == "stochastic":
            g0 = obj.worker_stochastic_gradient(j, x0, rng)
            m0 = g0.copy() if track_momentum else None
        elif policy == "compressed-stochastic":
            draw = obj.worker_stochastic_gradient(j, x0, rng)
            g0 = LayeredTensor(
                [
                    decompress(compress(hp.worker_compressor, draw[i], rng, hp.value_bits))
                    for i in range(len(hp.norms))
                ]
            )
            m0 = draw if track_momentum else None
        elif policy == "zero":
            g0 = LayeredTensor.zeros(obj.spec.shapes)
            m0 = g0.copy() if track_momentum else None
        else:
            raise ValueError(f"unknown g0 policy {policy!r}")
        workers.append(WorkerState(j, x0.copy(), g0, m0))
    g_server = workers[0].g
    for w in workers[1:]:
        g_server = g_server + w.g
    g_server = g_server * (1.0 / obj.n_workers)
    server = ServerState(x=x0.copy(), w=x0.copy(), g=g_server, k=0)
    return server, workers


# ---------------------------------------------------------------------------
# Theory-driven hyperparameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TheoryParams:
    schedule: str
    values: tuple[float, ...]
    betas: tuple[float, ...]
    g0_policy: str


def theory_stepsize(
    theorem: str,
    profile: SmoothnessProfile,
    alpha_p: float,
    alpha_d: float,
    beta: float | None,
    n: int,
    rounds: int,
    norms,
    shapes,
    eta: float = 1.0,
    uniform: bool = False,
) -> TheoryParams:
    """Largest stepsize/radius permitted by the chosen theorem, per layer.

    T1: deterministic, smooth       -> stepsize 1/(2 L0_i + (4/a_D) sqrt(12 + 66/a_P^2) Lt_i)
    T2: deterministic, (L0, L1)     -> radius eta / sqrt(K+1), identity server compressor
    T3: stochastic, smooth, momentum-> stepsize 1/(2 L0_i + 2 sqrt(zeta_i))
    T4: stochastic, (L0, L1)        -> radius eta_i / (K+1)^(3/4) with the eta^2 cap,
                                       beta = (K+1)^(-1/2)

    ``uniform=True`` collapses per-layer values to their minimum (a legal,
    more conservative choice since every formula is an upper bound).
    """
    if profile is None:
        raise MissingConstantError(["smoothness profile"])
    if not (0 < alpha_p <= 1 and 0 < alpha_d <= 1):
        raise MissingConstantError(["alpha_p in (0,1]", "alpha_d in (0,1]"])
    p = profile.num_layers
    kp1 = rounds + 1

    if theorem == "T1":
        factor = (4.0 / alpha_d) * math.sqrt(12.0 + 66.0 / alpha_p**2)
        gammas = [1.0 / (2.0 * profile.l0[i] + factor * profile.l0_tilde[i]) for i in range(p)]
        out = TheoryParams("stepsize", tuple(gammas), tuple(1.0 for _ in range(p)), "gradient")
    elif theorem == "T2":
        radii = [eta / math.sqrt(kp1) for _ in range(p)]
        out = TheoryParams("radius", tuple(radii), tuple(1.0 for _ in range(p)), "gradient")
    elif theorem == "T3":
        if beta is None:
            raise MissingConstantError(["beta (momentum)"])
        betas = tuple(beta for _ in range(p)) if isinstance(beta, (int, float)) else tuple(beta)
        if len(betas) != p:
            raise MissingConstantError(["beta per layer"])
        gammas = []
        for i in range(p):
            eq = norm_equivalence(norms[i], shapes[i])
            rho = eq.rho_upper**2 / eq.rho_lower**2
            b = betas[i]
            l0, lt = profile.l0[i], profile.l0_tilde[i]
            zeta = rho * (
                12.0 / b**2 * l0**2
                + 24.0 * (b + 2.0) / alpha_p**2 * l0**2
                + 36.0 * (b**2 + 4.0) / alpha_d**2 * lt**2
                + 144.0 * b**2 * (2.0 * b + 5.0) / (alpha_p**2 * alpha_d**2) * lt**2
            )
            gammas.append(1.0 / (2.0 * l0 + 2.0 * math.sqrt(zeta)))
        out = TheoryParams("stepsize", tuple(gammas), betas, "stochastic")
    elif theorem == "T4":
        beta_t4 = 1.0 / math.sqrt(kp1)
        sqrt_res = math.sqrt(1.0 - alpha_d)
        radii = []
        for i in range(p):
            eq = norm_equivalence(norms[i], shapes[i])
            l1 = profile.l1[i]
            l1_max = profile.l1_max_per_layer[i]
            caps = [1.0]
            if l1 > 0:
                caps.append(math.sqrt(kp1) / (6.0 * l1**2))
            if l1_max > 0:
                if sqrt_res > 0:
                    caps.append(
                        (1.0 - sqrt_res) * eq.rho_lower
                        / (24.0 * math.sqrt(kp1) * sqrt_res * eq.rho_upper * l1_max**2)
                    )
                caps.append(eq.rho_lower / (24.0 * eq.rho_upper * l1_max**2))
            eta_i = min(eta, math.sqrt(min(caps)))
            radii.append(eta_i / kp1**0.75)
        out = TheoryParams(
            "radius", tuple(radii), tuple(beta_t4 for _ in range(p)), "compressed-stochastic"
        )
    else:
        raise ValueError(f"unknown theorem {theorem!r} (expected T1..T4)")

    if uniform:
        v = min(out.values)
        out = replace(out, values=tuple(v for _ in range(p)))
    return out


def theory_momentum(
    profile: SmoothnessProfile,
    alpha_d: float,
    n: int,
    rounds: int,
    sigmas,
    delta0: float,
    norms,
    shapes,
) -> tuple[float, ...]:
    """Momentum choice of the stochastic smooth-case corollary, per layer:
    beta = min{1, (d0 L n / (rho^2 s^2 K))^(1/2), (d0 L a_D / ...)^(1/3),
    (d0 L a_D^2 / ...)^(1/4)}. Noise-free layers get beta = 1."""
    if delta0 is None:
        raise MissingConstantError(["delta0 (initial suboptimality)"])
    betas = []
    for i in range(profile.num_layers):
        sigma = float(sigmas[i])
        if sigma == 0.0:
            betas.append(1.0)
            continue
        rho_low = norm_equivalence(norms[i], shapes[i]).rho_lower
        base = delta0 * profile.l0[i] / (rho_low**2 * sigma**2 * rounds)
        betas.append(
            min(1.0, (base * n) ** 0.5, (base * alpha_d) ** (1.0 / 3.0), (base * alpha_d**2) ** 0.25)
        )
    return tuple(betas)


# ---------------------------------------------------------------------------
# Lyapunov functions
# ---------------------------------------------------------------------------

def lyapunov(
    theorem: str,
    obj: Objective,
    server: ServerState,
    workers: list[WorkerState],
    hp: HyperParams,
    profile: SmoothnessProfile,
    alpha_p: float,
    alpha_d: float,
) -> float:
    """Exact value of the convergence potential at the current states.

    T1 (stepsize runs):  f - f* + sum_i (6 g_i / a_D) mean_j ||grad_ij - G_ij||_*^2
                         + sum_i (66 g_i / a_D^2)(2/a_P - 1) Lt_i^2 ||X_i - W_i||^2
    T2 (radius runs):    f - f* + sum_i (2 t_i / (1 - sqrt(1 - a_D))) mean_j
                         ||grad_ij - G_ij||_*
    """
    if obj.f_star is None:
        raise UnknownObjectiveError("Lyapunov value needs a known f*")
    values = []
    for v in hp.values:
        if not isinstance(v, (int, float)):
            raise ValueError("Lyapunov functions are defined for constant schedules only")
        values.append(float(v))
    duals = [dual_of(k) for k in hp.norms]
    x = server.x
    grads = [obj.worker_gradient(w.worker_id, x) for w in workers]
    n = len(workers)
    psi = obj.value(x) - obj.f_star
    if theorem == "T1":
        for i in range(len(hp.norms)):
            mism = sum(norm(grads[j][i] - workers[j].g[i], duals[i]) ** 2 for j in range(n)) / n
            psi += (6.0 * values[i] / alpha_d) * mism
            shift = norm(x[i] - server.w[i], hp.norms[i]) ** 2
            psi += (
                (66.0 * values[i] / alpha_d**2)
                * (2.0 / alpha_p - 1.0)
                * profile.l0_tilde[i] ** 2
                * shift
            )
        return psi
    if theorem == "T2":
        denom = 1.0 - math.sqrt(1.0 - alpha_d)
        for i in range(len(hp.norms)):
            mism = sum(norm(grads[j][i] - workers[j].g[i], duals[i]) for j in range(n)) / n
            psi += (2.0 * values[i] / denom) * mism
        return psi
    raise ValueError(f"no Lyapunov defined for theorem {theorem!r}")


# ---------------------------------------------------------------------------
# Compressor-family sanity check
# ---------------------------------------------------------------------------

# Norm families in which each compressor's contraction inequality is known:
# "any" (all norms), "euclidean" (Frobenius only), or a named family.
def _known_families(kind: CompressorKind) -> str:
    if isinstance(kind, (Identity, Damping, RandomDropout)):
        return "any"
    if isinstance(kind, (TopK, Natural, Composed)):
        return "euclidean"
    if isinstance(kind, (TopKSvd, RankK)):
        return "spectral-family"
    if isinstance(kind, ColumnTopK):
        return "column-family"
    return "unknown"


def check_compressor_families(theorem: str, hp: HyperParams) -> list[str]:
    """Warn when a compressor's known contraction norm mismatches the theorem.

    T1/T2 need worker compressors contractive in the dual norm; T3/T4 in the
    Euclidean norm. Returns the warning strings (also emitted via warnings).
    """
    notes = []
    fam = _known_families(hp.worker_compressor)
    duals = [dual_of(k) for k in hp.norms]
    for i, dual in enumerate(duals):
        if theorem in ("T1", "T2"):
            ok = fam == "any" or (
                fam == "euclidean" and dual.name == "frobenius"
            ) or (
                fam == "spectral-family"
                and dual.name in ("spectral", "nuclear", "frobenius", "schatten")
            ) or (
                fam == "column-family" and dual.name == "column_lpq"
            )
            if not ok:
                notes.append(
                    f"layer {i}: worker compressor {hp.worker_compressor} has no known "
                    f"contraction bound in the dual norm {dual} required by {theorem}"
                )
        else:  # T3 / T4 need Euclidean contraction
            if fam not in ("any", "euclidean") and not (
                fam == "spectral-family"
            ):
                notes.append(
                    f"layer {i}: worker compressor {hp.worker_compressor} has no known "
                    f"Euclidean contraction bound required by {theorem}"
                )
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return notes


# ---------------------------------------------------------------------------
# State snapshots
# ---------------------------------------------------------------------------

_SNAP_MAGIC = b"MUEF"
_SNAP_VERSION = 1


def save_snapshot(server: ServerState, workers: list[WorkerState]) -> bytes:
    """Binary snapshot: magic 'MUEF', version u16, round u32, p u16, n u16,
    momentum flag u8, shapes (u32 pairs), then little-endian f64 arrays in the
    order X, W, G, then per worker G_j [and M_j]. Worker W replicas equal the
    server W by the synchronization invariant, so they are stored once."""
    shapes = server.x.shapes
    has_m = workers[0].m is not None
    out = bytearray()
    out += _SNAP_MAGIC
    out += struct.pack("<HIHHB", _SNAP_VERSION, server.k, len(shapes), len(workers), int(has_m))
    for r, c in shapes:
        out += struct.pack("<II", r, c)
    for tensor in (server.x, server.w, server.g):
        for layer in tensor:
            out += layer.astype("<f8").tobytes()
    for w in workers:
        for layer in w.g:
            out += layer.astype("<f8").tobytes()
        if has_m:
            for layer in w.m:
                out += layer.astype("<f8").tobytes()
    return bytes(out)


def load_snapshot(raw: bytes) -> tuple[ServerState, list[WorkerState]]:
    if raw[:4] != _SNAP_MAGIC:
        raise ValueError("not a state snapshot")
    version, k, p, n, has_m = struct.unpack("<HIHHB", raw[4:15])
    if version != _SNAP_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    off = 15
    shapes = []
    for _ in range(p):
        r, c = struct.unpack("<II", raw[off : off + 8])
        shapes.append((r, c))
        off += 8

    def read_tensor():
        nonlocal off
        layers = []
        for r, c in shapes:
            count = r * c
            layers.append(
                np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(r, c).copy()
            )
            off += 8 * count
        return LayeredTensor(layers)

    x, w, g = read_tensor(), read_tensor(), read_tensor()
    server = ServerState(x=x, w=w, g=g, k=k)
    workers = []
    for j in range(n):
        gj = read_tensor()
        mj = read_tensor() if has_m else None
        workers.append(WorkerState(j, w.copy(), gj, mj))
    return server, workers
