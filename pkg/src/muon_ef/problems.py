"""Synthetic layered objectives: quadratic ensembles, a compression-divergence
instance, and a tiny tanh MLP, all with exact gradients, per-worker views, and
controlled stochastic oracles.

The stochastic oracle model is additive i.i.d. Gaussian noise on the exact
gradient with per-layer scale sigma_i, drawn with entry standard deviation
sigma_i / sqrt(layer size) so that E||noise_i||_2^2 = sigma_i^2 holds exactly.
The MLP additionally supports mini-batch subsampling of its dataset.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTrajectoryError, InvalidMatrixError, UnknownObjectiveError
from .tensorcore import (
    FROBENIUS,
    LayeredTensor,
    NormKind,
    dual_of,
    norm,
    norm_equivalence,
)

__all__ = [
    "ModelSpec",
    "Objective",
    "QuadraticEnsemble",
    "TinyMlp",
    "make_quadratic_ensemble",
    "make_divergence_instance",
    "make_tiny_mlp",
    "SmoothnessProfile",
    "EstimatedSmoothness",
    "estimate_smoothness",
]


@dataclass(frozen=True)
class ModelSpec:
    """Layer shapes plus the per-layer norm each LMO step uses."""

    shapes: tuple[tuple[int, int], ...]
    norms: tuple[NormKind, ...]

    def __post_init__(self):
        if len(self.shapes) < 1:
            raise InvalidMatrixError("model needs at least one layer")
        if len(self.norms) != len(self.shapes):
            raise InvalidMatrixError("one norm per layer required")
        for r, c in self.shapes:
            if r < 1 or c < 1:
                raise InvalidMatrixError(f"bad layer shape ({r}, {c})")

    @property
    def num_layers(self) -> int:
        return len(self.shapes)

    @property
    def total_params(self) -> int:
        return sum(r * c for r, c in self.shapes)


class Objective:
    """Abstract contract shared by all synthetic objectives.

    Subclasses implement ``worker_value`` / ``worker_gradient``; the global
    objective is always the flat average over workers. ``f_star`` and
    ``worker_stars`` are None when no analytic lower bound is known.
    """

    spec: ModelSpec
    n_workers: int
    sigmas: np.ndarray  # per-layer stochastic noise scale (Euclidean)
    f_star: float | None = None
    worker_stars: tuple[float, ...] | None = None

    def worker_value(self, j: int, x: LayeredTensor) -> float:
        raise NotImplementedError

    def worker_gradient(self, j: int, x: LayeredTensor) -> LayeredTensor:
        raise NotImplementedError

    def value(self, x: LayeredTensor) -> float:
        return sum(self.worker_value(j, x) for j in range(self.n_workers)) / self.n_workers

    def gradient(self, x: LayeredTensor) -> LayeredTensor:
        total = self.worker_gradient(0, x)
        for j in range(1, self.n_workers):
            total = total + self.worker_gradient(j, x)
        return total * (1.0 / self.n_workers)

    def worker_stochastic_gradient(
        self, j: int, x: LayeredTensor, rng: np.random.Generator
    ) -> LayeredTensor:
        """Unbiased oracle: exact worker gradient plus per-layer Gaussian noise."""
        grad = self.worker_gradient(j, x)
        if not np.any(self.sigmas):
            return grad
        noisy = []
        for i, layer in enumerate(grad):
            scale = self.sigmas[i] / math.sqrt(layer.size)
            noisy.append(layer + scale * rng.standard_normal(layer.shape))
        return LayeredTensor(noisy)

    def initial_point(self, rng: np.random.Generator | None = None, scale: float = 0.0) -> LayeredTensor:
        if scale == 0.0 or rng is None:
            return LayeredTensor.zeros(self.spec.shapes)
        return LayeredTensor([scale * rng.standard_normal(s) for s in self.spec.shapes])

    def analytic_profile(self) -> "SmoothnessProfile":
        raise UnknownObjectiveError(f"{type(self).__name__} has no analytic smoothness profile")


# ---------------------------------------------------------------------------
# Smoothness profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothnessProfile:
    """Per-layer (L0, L1) constants for f and for every worker, in the dual norm
    pairing of the model spec. Aggregates recompute from the per-worker arrays."""

    l0: np.ndarray  # (p,)
    l1: np.ndarray  # (p,)
    worker_l0: np.ndarray  # (p, n)
    worker_l1: np.ndarray  # (p, n)

    def __post_init__(self):
        for arr in (self.l0, self.l1, self.worker_l0, self.worker_l1):
            if np.any(np.asarray(arr) < 0):
                raise InvalidMatrixError("smoothness constants must be nonnegative")

    @property
    def num_layers(self) -> int:
        return len(self.l0)

    @property
    def l0_tilde(self) -> np.ndarray:
        """Quadratic-mean worker constants per layer: sqrt(mean_j L0_ij^2)."""
        return np.sqrt(np.mean(self.worker_l0**2, axis=1))

    @property
    def l0_bar(self) -> np.ndarray:
        """Arithmetic-mean worker constants per layer."""
        return np.mean(self.worker_l0, axis=1)

    @property
    def l1_max_per_layer(self) -> np.ndarray:
        """max_j L1_ij per layer."""
        return np.max(self.worker_l1, axis=1)

    def scaled(self, factor: float) -> "SmoothnessProfile":
        return SmoothnessProfile(
            self.l0 * factor, self.l1 * factor, self.worker_l0 * factor, self.worker_l1 * factor
        )


@dataclass(frozen=True)
class EstimatedSmoothness:
    """Least-squares fit plus the inflated fit that satisfies every sampled pair."""

    least_squares: SmoothnessProfile
    conservative: SmoothnessProfile


# ---------------------------------------------------------------------------
# Quadratic ensembles
# ---------------------------------------------------------------------------

def _random_psd(dim: int, conditioning: float, rng: np.random.Generator) -> np.ndarray:
    """Symmetric PD matrix with spectrum uniform in [1, conditioning]."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigs = np.concatenate(([1.0, conditioning], rng.uniform(1.0, conditioning, max(dim - 2, 0))))
    return (q * eigs[:dim]) @ q.T


class QuadraticEnsemble(Objective):
    """f_j(X) = sum_i 0.5 (vec X_i - b_ij)^T A_ij (vec X_i - b_ij).

    Every worker minimum is exactly 0; the global minimizer and f* come from
    the per-layer normal equations, and per-layer Euclidean smoothness
    constants are the largest eigenvalues of the A blocks.
    """

    def __init__(self, spec: ModelSpec, a_blocks, b_vecs, sigmas=None):
        self.spec = spec
        self.n_workers = len(a_blocks[0])
        self.a = a_blocks  # a[i][j]: (d_i, d_i) symmetric PSD
        self.b = b_vecs  # b[i][j]: (d_i,)
        self.sigmas = np.zeros(spec.num_layers) if sigmas is None else np.asarray(sigmas, dtype=float)
        self.worker_stars = tuple(0.0 for _ in range(self.n_workers))
        self._euclid_l0_workers = np.array(
            [[float(np.linalg.eigvalsh(self.a[i][j])[-1]) for j in range(self.n_workers)]
             for i in range(spec.num_layers)]
        )
        self._minimizer, self.f_star = self._solve_star()

    def _solve_star(self):
        mats = []
        for i, shape in enumerate(self.spec.shapes):
            abar = sum(self.a[i]) / self.n_workers
            rhs = sum(self.a[i][j] @ self.b[i][j] for j in range(self.n_workers)) / self.n_workers
            v = np.linalg.solve(abar, rhs)
            mats.append(v.reshape(shape))
        xbar = LayeredTensor(mats)
        return xbar, self.value(xbar)

    @property
    def minimizer(self) -> LayeredTensor:
        return self._minimizer

    def worker_value(self, j: int, x: LayeredTensor) -> float:
        total = 0.0
        for i, layer in enumerate(x):
            d = layer.ravel() - self.b[i][j]
            total += 0.5 * float(d @ (self.a[i][j] @ d))
        return total

    def worker_gradient(self, j: int, x: LayeredTensor) -> LayeredTensor:
        grads = []
        for i, layer in enumerate(x):
            d = layer.ravel() - self.b[i][j]
            grads.append((self.a[i][j] @ d).reshape(layer.shape))
        return LayeredTensor(grads)

    def analytic_profile(self) -> SmoothnessProfile:
        """Dual-norm Lipschitz constants: rho_upper^2 * lambda_max per block.

        Exact when the layer norm is Euclidean (Frobenius); a valid upper bound
        otherwise via the norm-equivalence sandwich. L1 constants are zero.
        """
        p, n = self.spec.num_layers, self.n_workers
        worker_l0 = np.zeros((p, n))
        l0 = np.zeros(p)
        for i, shape in enumerate(self.spec.shapes):
            rho_up = norm_equivalence(self.spec.norms[i], shape).rho_upper
            worker_l0[i] = rho_up**2 * self._euclid_l0_workers[i]
            abar = sum(self.a[i]) / n
            l0[i] = rho_up**2 * float(np.linalg.eigvalsh(abar)[-1])
        return SmoothnessProfile(l0, np.zeros(p), worker_l0, np.zeros((p, n)))

    def dump_params(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        for i in range(self.spec.num_layers):
            for j in range(self.n_workers):
                np.savetxt(os.path.join(directory, f"a_{i}_{j}.csv"), self.a[i][j], delimiter=",")
                np.savetxt(os.path.join(directory, f"b_{i}_{j}.csv"), self.b[i][j][None, :], delimiter=",")

    @classmethod
    def load_params(cls, directory: str, spec: ModelSpec, n_workers: int, sigmas=None):
        a_blocks, b_vecs = [], []
        for i in range(spec.num_layers):
            a_blocks.append([
                np.loadtxt(os.path.join(directory, f"a_{i}_{j}.csv"), delimiter=",", ndmin=2)
                for j in range(n_workers)
            ])
            b_vecs.append([
                np.loadtxt(os.path.join(directory, f"b_{i}_{j}.csv"), delimiter=",").reshape(-1)
                for j in range(n_workers)
            ])
        return cls(spec, a_blocks, b_vecs, sigmas)


def make_quadratic_ensemble(
    spec: ModelSpec,
    n: int,
    heterogeneity: float,
    conditioning: float,
    rng: np.random.Generator,
    sigmas=None,
) -> QuadraticEnsemble:
    """Random PD quadratic per (layer, worker); heterogeneity scales the spread
    of the per-worker minimizers around a shared center (centered so that
    heterogeneity 0 collapses every worker onto the same quadratic bowl center).
    """
    if n < 1:
        raise InvalidMatrixError("need at least one worker")
    if conditioning < 1:
        raise InvalidMatrixError("conditioning must be >= 1")
    a_blocks, b_vecs = [], []
    for shape in spec.shapes:
        dim = shape[0] * shape[1]
        a_blocks.append([_random_psd(dim, conditioning, rng) for _ in range(n)])
        center = rng.standard_normal(dim)
        offsets = rng.standard_normal((n, dim))
        offsets -= offsets.mean(axis=0, keepdims=True)
        b_vecs.append([center + heterogeneity * offsets[j] for j in range(n)])
    return QuadraticEnsemble(spec, a_blocks, b_vecs, sigmas)


# Frozen 3-worker counterexample family: f_j(x) = <a_j, x>^2 on R^3. Under
# Top1-compressed distributed GD without error feedback, any iterate on the
# all-ones ray is pushed outward by the factor (1 + 2*step) every round, while
# the average objective is strongly convex. Constants verified by the harness
# runs in the acceptance suite.
_DIVERGENCE_ROWS = (
    (-3.0, 2.0, 2.0),
    (2.0, -3.0, 2.0),
    (2.0, 2.0, -3.0),
)


def make_divergence_instance(sigmas=None) -> QuadraticEnsemble:
    """3-worker quadratic instance on which EF-free Top1 compressed GD diverges."""
    spec = ModelSpec(shapes=((3, 1),), norms=(FROBENIUS,))
    a_blocks = [[2.0 * np.outer(row, row) for row in np.array(_DIVERGENCE_ROWS)]]
    b_vecs = [[np.zeros(3) for _ in range(3)]]
    return QuadraticEnsemble(spec, a_blocks, b_vecs, sigmas)


# ---------------------------------------------------------------------------
# Tiny MLP
# ---------------------------------------------------------------------------

class TinyMlp(Objective):
    """Squared loss of a tanh chain network on synthetic teacher data.

    Layer i applies W_i then tanh, except the final layer which is linear:
    pred = W_p tanh(W_{p-1} ... tanh(W_1 x)). The dataset is sharded evenly
    across workers; worker j owns columns [j*m : (j+1)*m] of (inputs, targets).
    """

    def __init__(self, spec: ModelSpec, inputs: np.ndarray, targets: np.ndarray,
                 n_workers: int, sigmas=None, batch_size: int | None = None):
        for a, b in zip(spec.shapes[:-1], spec.shapes[1:]):
            if b[1] != a[0]:
                raise InvalidMatrixError(f"layer chain mismatch: {a} -> {b}")
        if spec.num_layers < 2:
            raise InvalidMatrixError("tiny MLP needs at least 2 layers")
        if inputs.shape[0] != spec.shapes[0][1] or targets.shape[0] != spec.shapes[-1][0]:
            raise InvalidMatrixError("dataset dimensions do not match the layer chain")
        if inputs.shape[1] % n_workers != 0:
            raise InvalidMatrixError("dataset size must be divisible by the worker count")
        self.spec = spec
        self.n_workers = n_workers
        self.inputs = np.asarray(inputs, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        self.sigmas = np.zeros(spec.num_layers) if sigmas is None else np.asarray(sigmas, dtype=float)
        self.batch_size = batch_size
        self.f_star = None
        self.worker_stars = None
        self._shard = inputs.shape[1] // n_workers

    def _slice(self, j: int):
        lo = j * self._shard
        return self.inputs[:, lo : lo + self._shard], self.targets[:, lo : lo + self._shard]

    @staticmethod
    def _forward(x: LayeredTensor, data: np.ndarray):
        acts = [data]
        h = data
        for w in x.layers[:-1]:
            h = np.tanh(w @ h)
            acts.append(h)
        pred = x.layers[-1] @ h
        return pred, acts

    def _loss_and_grad(self, x: LayeredTensor, data, targets, want_grad: bool):
        count = data.shape[1]
        pred, acts = self._forward(x, data)
        resid = pred - targets
        loss = 0.5 * float(np.sum(resid * resid)) / count
        if not want_grad:
            return loss, None
        grads = [None] * x.num_layers
        delta = resid / count
        for idx in range(x.num_layers - 1, -1, -1):
            grads[idx] = delta @ acts[idx].T
            if idx > 0:
                delta = (x.layers[idx].T @ delta) * (1.0 - acts[idx] ** 2)
        return loss, LayeredTensor(grads)

    def worker_value(self, j: int, x: LayeredTensor) -> float:
        data, targets = self._slice(j)
        return self._loss_and_grad(x, data, targets, want_grad=False)[0]

    def worker_gradient(self, j: int, x: LayeredTensor) -> LayeredTensor:
        data, targets = self._slice(j)
        return self._loss_and_grad(x, data, targets, want_grad=True)[1]

    def worker_stochastic_gradient(self, j, x, rng):
        if self.batch_size is None or self.batch_size >= self._shard:
            return super().worker_stochastic_gradient(j, x, rng)
        data, targets = self._slice(j)
        pick = rng.choice(self._shard, size=self.batch_size, replace=False)
        _, grad = self._loss_and_grad(x, data[:, pick], targets[:, pick], want_grad=True)
        base = LayeredTensor(grad.layers)
        if not np.any(self.sigmas):
            return base
        noisy = [
            layer + (self.sigmas[i] / math.sqrt(layer.size)) * rng.standard_normal(layer.shape)
            for i, layer in enumerate(base)
        ]
        return LayeredTensor(noisy)

    def dump_dataset(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        np.savetxt(os.path.join(directory, "inputs.csv"), self.inputs, delimiter=",")
        np.savetxt(os.path.join(directory, "targets.csv"), self.targets, delimiter=",")

    @classmethod
    def load_dataset(cls, directory: str):
        inputs = np.loadtxt(os.path.join(directory, "inputs.csv"), delimiter=",", ndmin=2)
        targets = np.loadtxt(os.path.join(directory, "targets.csv"), delimiter=",", ndmin=2)
        return inputs, targets


def make_tiny_mlp(
    spec: ModelSpec,
    dataset_size: int,
    noise: float,
    rng: np.random.Generator,
    n_workers: int = 1,
    sigmas=None,
    batch_size: int | None = None,
) -> TinyMlp:
    """Teacher-generated regression data for the layer chain in ``spec``."""
    d_in = spec.shapes[0][1]
    inputs = rng.standard_normal((d_in, dataset_size))
    teacher = LayeredTensor(
        [rng.standard_normal(s) / math.sqrt(s[1]) for s in spec.shapes]
    )
    targets, _ = TinyMlp._forward(teacher, inputs)
    targets = targets + noise * rng.standard_normal(targets.shape)
    return TinyMlp(spec, inputs, targets, n_workers, sigmas, batch_size)


# ---------------------------------------------------------------------------
# Smoothness estimation
# ---------------------------------------------------------------------------

def _fit_l0_l1(ratios: np.ndarray, grad_norms: np.ndarray) -> tuple[float, float, float, float]:
    """Nonnegative least squares of ratio ~ L0 + L1 * g, plus the smallest
    uniform inflation making the fit dominate every sample."""
    g, r = grad_norms, ratios
    design = np.stack([np.ones_like(g), g], axis=1)
    sol, *_ = np.linalg.lstsq(design, r, rcond=None)
    l0, l1 = float(sol[0]), float(sol[1])
    if l1 < 0 or np.allclose(g, g[0]):
        l1 = 0.0
        l0 = max(float(np.mean(r)), 0.0)
    elif l0 < 0:
        l0 = 0.0
        denom = float(np.sum(g * g))
        l1 = max(float(np.sum(g * r) / denom), 0.0) if denom > 0 else 0.0
    pred = l0 + l1 * g
    if np.all(pred <= 0):
        # Flat-zero fit: fall back to a pure L0 bound.
        return l0, l1, float(np.max(r)), 0.0
    inflate = float(np.max(r / np.maximum(pred, 1e-300)))
    return l0, l1, l0 * inflate, l1 * inflate


def estimate_smoothness(
    obj: Objective,
    norms,
    trajectory,
    pairs: int,
    rng: np.random.Generator,
) -> EstimatedSmoothness:
    """Fit per-layer (L0, L1) in the dual norm from sampled trajectory pairs.

    The conservative fit satisfies the generalized-smoothness inequality on
    every sampled pair by construction; theory stepsizes should consume it.
    """
    points = list(trajectory)
    if len(points) < 2:
        raise DegenerateTrajectoryError("need at least two trajectory points")
    p, n = obj.spec.num_layers, obj.n_workers
    duals = [dual_of(k) for k in norms]

    idx_pairs = []
    for _ in range(pairs):
        a, b = rng.choice(len(points), size=2, replace=False)
        idx_pairs.append((int(a), int(b)))

    grads = [[obj.worker_gradient(j, x) for j in range(n)] for x in points]
    full_grads = [obj.gradient(x) for x in points]

    def collect(grad_of):
        """ratios r_ab and predictors g_a per layer for one gradient map."""
        per_layer = [([], []) for _ in range(p)]
        for a, b in idx_pairs:
            for i in range(p):
                step = norm(points[a][i] - points[b][i], norms[i])
                if step == 0.0:
                    continue
                diff = norm(grad_of(a)[i] - grad_of(b)[i], duals[i])
                per_layer[i][0].append(diff / step)
                per_layer[i][1].append(norm(grad_of(a)[i], duals[i]))
        return per_layer

    worker_ls_l0 = np.zeros((p, n))
    worker_ls_l1 = np.zeros((p, n))
    worker_co_l0 = np.zeros((p, n))
    worker_co_l1 = np.zeros((p, n))
    any_data = False
    for j in range(n):
        data = collect(lambda a, j=j: grads[a][j])
        for i in range(p):
            ratios, gnorms = np.array(data[i][0]), np.array(data[i][1])
            if len(ratios) == 0:
                continue
            any_data = True
            ls0, ls1, co0, co1 = _fit_l0_l1(ratios, gnorms)
            worker_ls_l0[i, j], worker_ls_l1[i, j] = ls0, ls1
            worker_co_l0[i, j], worker_co_l1[i, j] = co0, co1

    f_data = collect(lambda a: full_grads[a])
    ls_l0, ls_l1 = np.zeros(p), np.zeros(p)
    co_l0, co_l1 = np.zeros(p), np.zeros(p)
    for i in range(p):
        ratios, gnorms = np.array(f_data[i][0]), np.array(f_data[i][1])
        if len(ratios) == 0:
            continue
        any_data = True
        ls_l0[i], ls_l1[i], co_l0[i], co_l1[i] = _fit_l0_l1(ratios, gnorms)

    if not any_data:
        raise DegenerateTrajectoryError("all sampled trajectory pairs coincide")
    return EstimatedSmoothness(
        least_squares=SmoothnessProfile(ls_l0, ls_l1, worker_ls_l0, worker_ls_l1),
        conservative=SmoothnessProfile(co_l0, co_l1, worker_co_l0, worker_co_l1),
    )
