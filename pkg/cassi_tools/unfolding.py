"""
Deep-unfolded solvers for y = Phi x + n.

Each stage runs a closed-form data-fidelity projection followed by a denoiser:

    HQS     x = L(y, z, a)        z = D(x, b)
    GAP     x = L0(y, z)          z = D(x, b)          (denominator delta only)
    ADMM    x = L(y, z + u, a)    z = D(x - u, b)      u = u - (x - z)
    R2ADMM  as ADMM with u = u - g (x - z), g learnable and initialized at 0
    plain   z = D(z, b)                                 (no projection)

with L(y, r, a) = r + Phi^T[(y - Phi r) / (a + delta)] computed elementwise,
delta being the diagonal of Phi Phi^T.

All stage math runs on batched Tensors (N x H x W' x bands, measurements as
N x H x W' x 1) so the same code serves classical solves and training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .cassi_model import Measurement, SensingOperator, ShearedCube, apply_phi_t
from .config import CMFormerConfig, FrameworkKind, SolverConfig
from .denoisers import CMFormer, Denoiser, SoftThreshold, TVDenoiser
from .errors import CassiError, ConfigError, DomainError, SingularityError, StageError
from .nn_core import (
    DEFAULT_DTYPE,
    Conv2d,
    Linear,
    Module,
    Parameter,
    Tensor,
    add,
    concat,
    div,
    gelu,
    global_avg_pool,
    mul,
    pad,
    reshape,
    softplus,
    sub,
    sum_,
    take,
)

log = logging.getLogger(__name__)

__all__ = [
    "FrameworkKind",
    "StageParams",
    "UnfoldState",
    "InitialNetwork",
    "EstimatorNet",
    "UnfoldingNetwork",
    "initial_network",
    "estimate_params",
    "linear_projection",
    "residual_update",
    "run_unfold",
    "classical_solve",
    "build_network",
    "count_parameters",
]

ADMM_FAMILY = (FrameworkKind.ADMM, FrameworkKind.R2ADMM)

def _scalar(value: float, dtype) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def default_gamma(kind: FrameworkKind) -> float:
    return 1.0 if kind == FrameworkKind.ADMM else 0.0


@dataclass
class StageParams:
    """Per-stage alpha, beta, gamma; each entry broadcasts against N x 1 x 1 x 1."""

    alpha: list
    beta: list
    gamma: list

    def __post_init__(self):
        for name in ("alpha", "beta"):
            for i, value in enumerate(getattr(self, name)):
                if np.any(value.data <= 0):
                    raise DomainError(f"{name}[{i}] must be > 0")

    @classmethod
    def constant(cls, stages: int, alpha: Union[float, Sequence[float]],
                 beta: Union[float, Sequence[float]], gamma: Union[float, Sequence[float]] = 0.0,
                 dtype=np.float64) -> "StageParams":
        def expand(value):
            values = list(value) if isinstance(value, (list, tuple, np.ndarray)) else [value] * stages
            if len(values) != stages:
                raise ConfigError(f"expected {stages} per-stage values, got {len(values)}")
            return [_scalar(v, dtype) for v in values]

        return cls(expand(alpha), expand(beta), expand(gamma))

    @property
    def stages(self) -> int:
        return min(len(self.alpha), len(self.beta), len(self.gamma))

    def values(self, stage: int) -> tuple[float, float, float]:
        """Sample-0 values of one stage, for traces."""
        return tuple(float(t.data.reshape(-1)[0]) for t in
                     (self.alpha[stage], self.beta[stage], self.gamma[stage]))


@dataclass
class UnfoldState:
    x: Tensor
    z: Tensor
    u: Tensor


@dataclass
class StageRecord:
    stage: int
    alpha: float
    beta: float
    gamma: float
    primal_residual: float
    x: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)


# ----------------------------------------------------------------------------
# Tensor-level building blocks
# ----------------------------------------------------------------------------

def measurement_inputs(y: Measurement, op: SensingOperator, dtype=None) -> tuple[Tensor, Tensor]:
    """Batch-of-one tensors: y as 1 x H x W' x 1 and the shifted mask as 1 x H x W' x bands."""
    dtype = dtype or y.data.dtype
    if y.data.shape != op.measurement_shape:
        raise ConfigError(f"measurement {y.data.shape} does not match operator {op.measurement_shape}")
    return (Tensor(y.data[None, :, :, None].astype(dtype)),
            Tensor(op.shifted_mask[None].astype(dtype)))


def _phi(x: Tensor, mask: Tensor) -> Tensor:
    return sum_(mul(x, mask), axis=3, keepdims=True)


def _project(y: Tensor, r: Tensor, alpha: Optional[Tensor], mask: Tensor, delta: np.ndarray,
             gap: bool) -> Tensor:
    residual = sub(y, _phi(r, mask))
    if gap:
        empty = delta == 0
        if np.any(residual.data[np.broadcast_to(empty, residual.shape)] != 0):
            raise SingularityError("GAP projection: nonzero residual at a pixel with delta = 0")
        denom = Tensor(np.where(empty, 1.0, delta).astype(delta.dtype))
    else:
        denom = add(alpha, Tensor(delta))
    return add(r, mul(mask, div(residual, denom)))


def _warn_empty_pixels(delta: np.ndarray) -> None:
    empty = int(np.count_nonzero(delta == 0))
    if empty:
        log.warning("GAP projection: %d pixels with delta = 0 receive no correction", empty)


def _relax(u: Tensor, x: Tensor, z: Tensor, gamma: Tensor) -> Tensor:
    return sub(u, mul(gamma, sub(x, z)))


def _denoise(denoiser: Denoiser, v: Tensor, beta: Tensor, rng) -> Tensor:
    m = denoiser.size_multiple
    h, w = v.shape[1], v.shape[2]
    ph, pw = (-h) % m, (-w) % m
    if not ph and not pw:
        return denoiser(v, beta, rng)
    out = denoiser(pad(v, ph, pw), beta, rng)
    return take(out, (slice(None), slice(0, h), slice(0, w), slice(None)))


def unshift_batch(x: Tensor, shift_step: int) -> Tensor:
    """N x H x W' x bands sheared batch -> N x H x W x bands, differentiable."""
    bands = x.shape[3]
    width = x.shape[2] - shift_step * (bands - 1)
    return concat([
        take(x, (slice(None), slice(None), slice(shift_step * n, shift_step * n + width), slice(n, n + 1)))
        for n in range(bands)
    ])


def _unfold(kind: FrameworkKind, denoisers: Sequence[Denoiser], y: Tensor, mask: Tensor,
            z0: Tensor, params: StageParams, rng=None,
            trace: Optional[list] = None) -> Tensor:
    stages = len(denoisers)
    if stages == 0:
        return z0
    if params.stages < stages:
        raise ConfigError(f"{stages} stages but parameters for only {params.stages}")
    delta = np.sum(mask.data * mask.data, axis=3, keepdims=True)
    gap = kind == FrameworkKind.GAP
    if gap:
        _warn_empty_pixels(delta)
    state = UnfoldState(x=z0, z=z0, u=Tensor(np.zeros_like(z0.data)))
    for i, denoiser in enumerate(denoisers):
        alpha, beta, gamma = params.alpha[i], params.beta[i], params.gamma[i]
        try:
            if kind == FrameworkKind.PLAIN:
                state.z = _denoise(denoiser, state.z, beta, rng)
                state.x = state.z
            elif kind in ADMM_FAMILY:
                state.x = _project(y, add(state.z, state.u), alpha, mask, delta, gap)
                state.z = _denoise(denoiser, sub(state.x, state.u), beta, rng)
                state.u = _relax(state.u, state.x, state.z, gamma)
            else:
                state.x = _project(y, state.z, alpha, mask, delta, gap)
                state.z = _denoise(denoiser, state.x, beta, rng)
        except (CassiError, ArithmeticError, ValueError) as e:
            raise StageError(i, e) from e
        if trace is not None:
            a, b, g = params.values(i)
            trace.append(StageRecord(
                stage=i, alpha=a, beta=b, gamma=g,
                primal_residual=float(np.linalg.norm(state.x.data[0] - state.z.data[0])),
                x=state.x.data[0].copy(), z=state.z.data[0].copy(),
            ))
    return state.z


# ----------------------------------------------------------------------------
# Learnable components
# ----------------------------------------------------------------------------

class InitialNetwork(Module):
    """z0 = conv1x1([Phi^T y, shifted mask]) with 2*bands -> bands channels."""

    def __init__(self, bands: int, *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(2 * bands, bands, 1, rng=rng, dtype=dtype)

    def forward(self, phi_t_y: Tensor, mask: Tensor) -> Tensor:
        return self.conv(concat([phi_t_y, mask]))


class EstimatorNet(Module):
    """conv1x1 -> conv3x3/2 -> global pool -> three FC layers -> softplus.

    Emits stages + 1 (alpha, beta) pairs: alphas first, then betas. The stage
    loop consumes the first ``stages`` pairs.
    """

    def __init__(self, bands: int, stages: int, hidden: int = 32, *,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.stages = stages
        self.conv1 = Conv2d(bands, hidden, 1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, hidden, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.fc1 = Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.fc3 = Linear(hidden, 2 * (stages + 1), rng=rng, dtype=dtype)

    def forward(self, z0: Tensor) -> Tensor:
        h = gelu(self.conv2(gelu(self.conv1(z0))))
        h = reshape(global_avg_pool(h), (z0.shape[0], -1))
        h = gelu(self.fc2(gelu(self.fc1(h))))
        return softplus(self.fc3(h))


def initial_network(y: Measurement, op: SensingOperator, net: InitialNetwork) -> ShearedCube:
    y_t, mask_t = measurement_inputs(y, op, net.conv.weight.dtype)
    z0 = net(mul(mask_t, y_t), mask_t)
    return ShearedCube(z0.data[0], op.shift_step)


def estimate_params(z0: Union[ShearedCube, Tensor], net: EstimatorNet, stages: int,
                    gammas: Optional[Sequence[Tensor]] = None) -> StageParams:
    """alpha, beta = E(z0); gamma taken from the framework's own learnables (0 if absent)."""
    if stages != net.stages:
        raise ConfigError(f"estimator built for {net.stages} stages, asked for {stages}")
    if isinstance(z0, ShearedCube):
        z0 = Tensor(z0.data[None])
    out = net(z0)
    n = out.shape[0]
    pairs = stages + 1

    def column(j: int) -> Tensor:
        return reshape(take(out, (slice(None), slice(j, j + 1))), (n, 1, 1, 1))

    alpha = [column(j) for j in range(pairs)]
    beta = [column(pairs + j) for j in range(pairs)]
    gamma = list(gammas) if gammas is not None else [_scalar(0.0, out.dtype) for _ in range(stages)]
    return StageParams(alpha, beta, gamma)


# ----------------------------------------------------------------------------
# Public solver operations
# ----------------------------------------------------------------------------

def linear_projection(y: Measurement, r: ShearedCube, alpha: float, op: SensingOperator,
                      kind: Union[FrameworkKind, str] = FrameworkKind.ADMM) -> ShearedCube:
    """x = r + Phi^T[(y - Phi r) / (alpha + delta)]; GAP drops alpha."""
    kind = FrameworkKind.parse(kind)
    gap = kind == FrameworkKind.GAP
    if not gap and alpha <= 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    y_t, mask_t = measurement_inputs(y, op, r.data.dtype)
    delta = op.delta[None, :, :, None].astype(r.data.dtype)
    if gap:
        _warn_empty_pixels(delta)
    x = _project(y_t, Tensor(r.data[None]), None if gap else _scalar(alpha, r.data.dtype),
                 mask_t, delta, gap)
    return ShearedCube(x.data[0], r.shift_step)


def residual_update(u: ShearedCube, x: ShearedCube, z: ShearedCube, gamma: float) -> ShearedCube:
    """u' = u - gamma (x - z)."""
    if not u.data.shape == x.data.shape == z.data.shape:
        raise ConfigError(f"extent mismatch: u {u.data.shape}, x {x.data.shape}, z {z.data.shape}")
    return ShearedCube(u.data - gamma * (x.data - z.data), u.shift_step)


def run_unfold(kind: Union[FrameworkKind, str], stages: int,
               denoiser: Union[Denoiser, Sequence[Denoiser]], y: Measurement, op: SensingOperator,
               params: Union[StageParams, EstimatorNet], *, z0: Optional[ShearedCube] = None,
               initial: Optional[InitialNetwork] = None, gammas: Optional[Sequence[Tensor]] = None,
               trace: Optional[list] = None) -> ShearedCube:
    """Run ``stages`` unfolded iterations and return the final z.

    z0 comes from ``initial`` when given, else ``z0``, else Phi^T y. With an
    EstimatorNet, alpha and beta are estimated from z0.
    """
    kind = FrameworkKind.parse(kind)
    if stages < 0:
        raise ConfigError(f"stages must be >= 0, got {stages}")
    dtype = y.data.dtype
    if initial is not None:
        z0 = initial_network(y, op, initial)
    elif z0 is None:
        z0 = apply_phi_t(y, op)
    if stages == 0:
        return z0
    denoisers = list(denoiser) if isinstance(denoiser, (list, tuple)) else [denoiser] * stages
    if len(denoisers) != stages:
        raise ConfigError(f"{len(denoisers)} denoisers for {stages} stages")
    z0_t = Tensor(z0.data[None].astype(dtype))
    if isinstance(params, EstimatorNet):
        params = estimate_params(z0_t, params, stages, gammas)
    y_t, mask_t = measurement_inputs(y, op, dtype)
    z = _unfold(kind, denoisers, y_t, mask_t, z0_t, params, trace=trace)
    return ShearedCube(z.data[0], op.shift_step)


def classical_solve(kind: Union[FrameworkKind, str], y: Measurement, op: SensingOperator,
                    prox: Denoiser, tau: float, lam: float, iters: int, *,
                    z0: Optional[ShearedCube] = None, trace: Optional[list] = None) -> ShearedCube:
    """Fixed-parameter solve of min ||y - Phi x||^2 + lam R(x) with penalty tau.

    alpha = tau, beta = tau / lam (infinite for lam = 0), gamma = 1.
    """
    if tau <= 0 or lam < 0:
        raise DomainError(f"need tau > 0 and lam >= 0, got tau={tau}, lam={lam}")
    beta = tau / lam if lam > 0 else np.inf
    params = StageParams.constant(iters, tau, beta, 1.0, dtype=y.data.dtype)
    return run_unfold(kind, iters, prox, y, op, params, z0=z0, trace=trace)


class UnfoldingNetwork(Module):
    """Initial network, parameter estimator, one denoiser per stage and the gamma scalars."""

    def __init__(self, kind: Union[FrameworkKind, str], stages: int, bands: int,
                 make_denoiser: Callable[[], Denoiser], *, rng: np.random.Generator,
                 learn_alpha: bool = True, learn_beta: bool = True, learn_gamma: bool = True,
                 alpha: Optional[float] = None, beta: Optional[float] = None,
                 gamma: Optional[float] = None, estimator_hidden: int = 32,
                 dtype=DEFAULT_DTYPE):
        self.kind = FrameworkKind.parse(kind)
        self.stages = stages
        self.bands = bands
        self.dtype = np.dtype(dtype)
        self.learn_alpha = learn_alpha and alpha is None
        self.learn_beta = learn_beta and beta is None
        self.fixed = {"alpha": 1.0 if alpha is None else alpha,
                      "beta": 1.0 if beta is None else beta,
                      "gamma": default_gamma(self.kind) if gamma is None else gamma}
        if self.kind == FrameworkKind.ADMM:
            self.fixed["gamma"] = 1.0
        self.initial = InitialNetwork(bands, rng=rng, dtype=dtype)
        self.estimator = (EstimatorNet(bands, stages, estimator_hidden, rng=rng, dtype=dtype)
                          if self.learn_alpha or self.learn_beta else None)
        self.denoisers = [make_denoiser() for _ in range(stages)]
        learn_g = self.kind == FrameworkKind.R2ADMM and learn_gamma and gamma is None
        self.gammas = [Parameter(np.zeros((1, 1, 1, 1), dtype=dtype)) for _ in range(stages)] if learn_g else []

    def stage_params(self, z0: Tensor) -> StageParams:
        n = self.stages
        estimated = estimate_params(z0, self.estimator, n) if self.estimator is not None else None

        def pick(name: str, learned: bool) -> list:
            if learned:
                return getattr(estimated, name)[:n]
            return [_scalar(self.fixed[name], self.dtype) for _ in range(n)]

        gamma = list(self.gammas) or [_scalar(self.fixed["gamma"], self.dtype) for _ in range(n)]
        return StageParams(pick("alpha", self.learn_alpha), pick("beta", self.learn_beta), gamma)

    def forward(self, y: Tensor, mask: Tensor, rng: Optional[np.random.Generator] = None,
                trace: Optional[list] = None) -> Tensor:
        """y: N x H x W' x 1, mask: N x H x W' x bands -> sheared estimate N x H x W' x bands."""
        z0 = self.initial(mul(mask, y), mask)
        if self.stages == 0:
            return z0
        return _unfold(self.kind, self.denoisers, y, mask, z0, self.stage_params(z0), rng, trace)

    def reconstruct(self, y: Measurement, op: SensingOperator,
                    trace: Optional[list] = None) -> ShearedCube:
        self.eval()
        y_t, mask_t = measurement_inputs(y, op, self.dtype)
        return ShearedCube(self.forward(y_t, mask_t, trace=trace).data[0], op.shift_step)


def make_denoiser_factory(solver: SolverConfig, model: CMFormerConfig, bands: int,
                          rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Callable[[], Denoiser]:
    if solver.denoiser == "soft":
        return SoftThreshold
    if solver.denoiser == "tv":
        return lambda: TVDenoiser(solver.tv_iters)
    return lambda: CMFormer(bands, model, rng=rng, dtype=dtype)


def build_network(solver: SolverConfig, model: CMFormerConfig, bands: int,
                  rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> UnfoldingNetwork:
    """Construct the network a SolverConfig/CMFormerConfig pair describes, seeded by ``rng``."""
    solver.validate()
    return UnfoldingNetwork(
        solver.framework, solver.stages, bands,
        make_denoiser_factory(solver, model, bands, rng, dtype), rng=rng,
        learn_alpha=solver.learn_alpha, learn_beta=solver.learn_beta,
        learn_gamma=solver.learn_gamma, alpha=solver.alpha, beta=solver.beta,
        gamma=solver.gamma, dtype=dtype,
    )


def count_parameters(model: Module) -> dict[str, int]:
    """Parameter counts per top-level component plus ``total``."""
    counts: dict[str, int] = {}
    for name, param in model.named_parameters():
        parts = name.split(".")
        key = f"{parts[0]}.{parts[1]}" if parts[0] == "denoisers" else parts[0]
        if parts[0] == "gammas":
            key = "gammas"
        counts[key] = counts.get(key, 0) + param.size
    counts["total"] = sum(counts.values())
    return counts
