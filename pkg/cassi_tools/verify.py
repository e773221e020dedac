"""
Property suites run by ``cassi verify``.

Each suite returns CheckResults measured at 64-bit on small random instances:

    adjoint      Phi/Phi^T and conv adjointness, delta vs dense diagonal,
                 projection vs dense regularized least squares
    gradcheck    finite-difference checks of every layer and the unfolded network
    oracle       ADMM + soft threshold vs a proximal-gradient lasso solver
    equivalence  R2ADMM(gamma=0) == HQS and R2ADMM(gamma=1) == ADMM trajectories
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn_core as nn
from .cassi_model import (
    CodedMask,
    Measurement,
    SensingOperator,
    ShearedCube,
    apply_phi,
    apply_phi_t,
    phi_diag,
)
from .config import CMFormerConfig, FrameworkKind
from .denoisers import CAB, CMB, FFN, CMFormer, SoftThreshold
from .errors import UsageError
from .unfolding import (
    EstimatorNet,
    InitialNetwork,
    StageParams,
    UnfoldingNetwork,
    classical_solve,
    linear_projection,
    run_unfold,
)

log = logging.getLogger(__name__)

F64 = np.float64


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float


def _timed(name: str, tolerance: float, fn: Callable[[], float]) -> CheckResult:
    start = time.perf_counter()
    error = float(fn())
    result = CheckResult(name, error <= tolerance, error, tolerance, time.perf_counter() - start)
    log.debug("%s: error %.3e (tol %.1e) %s", name, error, tolerance, "ok" if result.passed else "FAIL")
    return result


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def random_operator(rng: np.random.Generator, height: int, width: int, bands: int,
                    shift_step: int) -> SensingOperator:
    return SensingOperator.from_mask(CodedMask(rng.random((height, width)), shift_step), bands)


def _random_shape(rng: np.random.Generator) -> tuple[int, int, int, int]:
    return (int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 5)),
            int(rng.integers(0, 3)))


def lasso_instance(seed: int = 42, lam: float = 0.1) -> tuple[Measurement, SensingOperator, float]:
    """1 x 8 x 2 scene, d = 1, continuous mask, sparse ground truth."""
    rng = np.random.default_rng(seed)
    op = random_operator(rng, 1, 8, 2, 1)
    shape = op.shifted_mask.shape
    truth = rng.standard_normal(shape) * (rng.random(shape) < 0.4)
    y = apply_phi(ShearedCube(truth, 1), op)
    return y, op, lam


def lasso_objective(x: np.ndarray, y: np.ndarray, dense: np.ndarray, lam: float) -> float:
    r = y - dense @ x
    return float(r @ r + lam * np.abs(x).sum())


def ista_lasso(y: np.ndarray, dense: np.ndarray, lam: float, tol: float = 1e-10,
               max_iter: int = 500_000) -> np.ndarray:
    """Proximal gradient on ||y - A x||^2 + lam ||x||_1 until the step falls below ``tol``."""
    lipschitz = 2.0 * np.linalg.norm(dense, 2) ** 2
    x = np.zeros(dense.shape[1])
    for _ in range(max_iter):
        g = x - (2.0 * dense.T @ (dense @ x - y)) / lipschitz
        x_next = np.sign(g) * np.maximum(np.abs(g) - lam / lipschitz, 0.0)
        if np.max(np.abs(x_next - x)) < tol:
            return x_next
        x = x_next
    return x


# ----------------------------------------------------------------------------
# Suites
# ----------------------------------------------------------------------------

def adjoint_suite(seed: int = 42) -> list[CheckResult]:
    rng = np.random.default_rng(seed)

    def phi_adjoint() -> float:
        worst = 0.0
        for _ in range(100):
            h, w, n, d = _random_shape(rng)
            op = random_operator(rng, h, w, n, d)
            x = ShearedCube(rng.standard_normal(op.shifted_mask.shape), d)
            y = Measurement(rng.standard_normal(op.measurement_shape))
            lhs = float(np.sum(apply_phi(x, op).data * y.data))
            rhs = float(np.sum(x.data * apply_phi_t(y, op).data))
            worst = max(worst, _rel(lhs, rhs))
        return worst

    def conv_adjoint() -> float:
        worst = 0.0
        for mode, shape, stride, padding in (("standard", (3, 3, 3, 4), 1, 1),
                                             ("standard", (4, 4, 3, 4), 2, 1),
                                             ("depthwise", (5, 5, 3), 1, 2),
                                             ("transposed", (2, 2, 3, 4), 2, 0)):
            x = rng.standard_normal((2, 8, 8, 3))
            w = rng.standard_normal(shape)
            out = nn.conv2d_forward(x, w, stride, padding, mode)
            g = rng.standard_normal(out.shape)
            lhs = float(np.sum(out * g))
            rhs = float(np.sum(x * nn.conv2d_backward_input(g, w, x.shape, stride, padding, mode)))
            worst = max(worst, _rel(lhs, rhs))
        return worst

    def delta_dense() -> float:
        worst = 0.0
        for _ in range(20):
            h, w, n, d = _random_shape(rng)
            # binary codes make every partial sum exact
            op = SensingOperator.from_mask(CodedMask.random_binary(h, w, d, rng), n)
            dense = op.dense_matrix()
            diag = np.diag(dense @ dense.T).reshape(op.measurement_shape)
            worst = max(worst, float(np.max(np.abs(phi_diag(op) - diag))))
        return worst

    def projection_dense() -> float:
        worst = 0.0
        for _ in range(50):
            h, w, n, d = _random_shape(rng)
            op = random_operator(rng, h, w, n, d)
            alpha = float(rng.uniform(0.05, 2.0))
            y = Measurement(rng.standard_normal(op.measurement_shape))
            r = ShearedCube(rng.standard_normal(op.shifted_mask.shape), d)
            dense = op.dense_matrix()
            lhs = dense.T @ dense + alpha * np.eye(dense.shape[1])
            expected = np.linalg.solve(lhs, dense.T @ y.data.reshape(-1) + alpha * r.data.reshape(-1))
            got = linear_projection(y, r, alpha, op, FrameworkKind.ADMM).data.reshape(-1)
            worst = max(worst, float(np.linalg.norm(got - expected) / max(np.linalg.norm(expected), 1e-300)))
        return worst

    return [
        _timed("phi adjoint (100 cases)", 1e-12, phi_adjoint),
        _timed("conv adjoint (all modes)", 1e-10, conv_adjoint),
        _timed("delta == diag(Phi Phi^T)", 0.0, delta_dense),
        _timed("projection vs dense solve (50 cases)", 1e-10, projection_dense),
    ]


def _tiny_cmformer_config() -> CMFormerConfig:
    return CMFormerConfig(channels=4, blocks=(1, 1, 1), kernel_size=3, ffn_expansion=2)


def conditioned_estimator(bands: int, stages: int, rng: np.random.Generator,
                          hidden: int = 8, scale: float = 25.0) -> EstimatorNet:
    """Float64 estimator with its weights scaled by ``scale``.

    At the std-0.02 init every output sits within 1e-8 of ln 2, below what
    central differences can resolve.
    """
    estimator = EstimatorNet(bands, stages, hidden, rng=rng, dtype=F64)
    for param in estimator.parameters():
        param.assign(param.data * scale)
    return estimator


def gradcheck_suite(seed: int = 42, tolerance: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)

    def t(*shape) -> nn.Tensor:
        return nn.Tensor(rng.standard_normal(shape), dtype=F64)

    def check(name: str, fn, inputs) -> CheckResult:
        return _timed(name, tolerance, lambda: nn.gradcheck(fn, inputs, name=name, rng=rng).max_rel_error)

    results = []
    x = t(2, 6, 6, 3)
    for mode, shape, stride, padding in (("standard", (3, 3, 3, 4), 2, 1),
                                         ("depthwise", (3, 3, 3), 1, 1),
                                         ("transposed", (2, 2, 3, 4), 2, 0)):
        w, b = t(*shape), t(shape[-1])
        results.append(check(f"conv2d[{mode}]", lambda w=w, b=b, m=mode, s=stride, p=padding:
                             nn.conv2d(x, w, b, s, p, m), [x, w, b]))
    gain, offset = t(3), t(3)
    results.append(check("layer_norm", lambda: nn.layer_norm(x, gain, offset), [x, gain, offset]))
    results.append(check("gelu", lambda: nn.gelu(x), [x]))
    v, weight, bias = t(4, 5), t(3, 5), t(3)
    results.append(check("linear", lambda: nn.linear(v, weight, bias), [v, weight, bias]))
    results.append(check("global_avg_pool", lambda: nn.global_avg_pool(x), [x]))
    results.append(check("softplus", lambda: nn.softplus(x), [x]))

    cfg = _tiny_cmformer_config()
    feat = t(1, 8, 8, 4)
    cmb = CMB(4, 3, rng=rng, dtype=F64)
    results.append(check("CMB", lambda: cmb(feat), [feat, cmb.w1.weight, cmb.dw.weight, cmb.w3.weight]))
    ffn = FFN(4, 2, rng=rng, dtype=F64)
    results.append(check("FFN", lambda: ffn(feat), [feat, ffn.expand.weight, ffn.mix.weight]))
    cab = CAB(4, cfg, 0.0, rng=rng, dtype=F64)
    results.append(check("CAB", lambda: cab(feat),
                         [feat, cab.norm1.gain, cab.cmb.w2.weight, cab.ffn.project.weight]))

    mask = nn.Tensor(rng.random((1, 8, 9, 2)), dtype=F64)
    phi_t_y = t(1, 8, 9, 2)
    initial = InitialNetwork(2, rng=rng, dtype=F64)
    results.append(check("initial network", lambda: initial(phi_t_y, mask),
                         [phi_t_y, initial.conv.weight, initial.conv.bias]))
    estimator = conditioned_estimator(2, 2, rng)
    results.append(check("estimator", lambda: estimator(phi_t_y),
                         [estimator.conv1.weight, estimator.conv2.weight, estimator.fc3.weight]))

    net = UnfoldingNetwork(FrameworkKind.R2ADMM, 2, 2,
                           lambda: CMFormer(2, cfg, rng=rng, dtype=F64), rng=rng, dtype=F64)
    for g in net.gammas:
        g.assign(np.full((1, 1, 1, 1), 0.3))
    y = nn.Tensor(np.sum(mask.data * rng.random((1, 8, 9, 2)), axis=3, keepdims=True), dtype=F64)
    results.append(check(
        "unfolded R2ADMM (2 stages, 8x8x2)", lambda: net(y, mask),
        [net.initial.conv.weight, net.estimator.fc3.weight, net.denoisers[0].head.weight,
         net.denoisers[1].embed.weight, net.gammas[0]],
    ))
    return results


def oracle_suite(seed: int = 42, iters: int = 1000) -> list[CheckResult]:
    y, op, lam = lasso_instance(seed)
    dense = op.dense_matrix()
    tau = 1.0

    state = {}

    def objective_gap() -> float:
        reference = ista_lasso(y.data.reshape(-1), dense, lam)
        trace: list = []
        x = classical_solve("admm", y, op, SoftThreshold(), tau, lam, iters, trace=trace)
        state["trace"] = trace
        f_admm = lasso_objective(x.data.reshape(-1), y.data.reshape(-1), dense, lam)
        f_ref = lasso_objective(reference, y.data.reshape(-1), dense, lam)
        return abs(f_admm - f_ref)

    def primal_residual() -> float:
        trace = state.get("trace")
        if trace is None:
            trace = []
            classical_solve("admm", y, op, SoftThreshold(), tau, lam, iters, trace=trace)
        return min(rec.primal_residual for rec in trace[:500])

    return [
        _timed("ADMM lasso objective gap", 1e-6, objective_gap),
        _timed("ADMM primal residual within 500 iterations", 1e-6, primal_residual),
    ]


def equivalence_suite(seed: int = 42, stages: int = 10) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    op = random_operator(rng, 8, 8, 2, 1)
    y = Measurement(rng.random(op.measurement_shape))
    denoiser = CMFormer(2, _tiny_cmformer_config(), rng=rng, dtype=F64)
    alpha = rng.uniform(0.1, 1.0, stages)
    beta = rng.uniform(0.5, 5.0, stages)

    def trajectory(kind: str, gamma: float) -> np.ndarray:
        trace: list = []
        params = StageParams.constant(stages, alpha, beta, gamma)
        run_unfold(kind, stages, denoiser, y, op, params, trace=trace)
        return np.stack([np.stack([r.x, r.z]) for r in trace])

    def deviation(a: tuple, b: tuple) -> float:
        return float(np.max(np.abs(trajectory(*a) - trajectory(*b))))

    return [
        _timed("R2ADMM(gamma=0) == HQS", 1e-12, lambda: deviation(("r2admm", 0.0), ("hqs", 0.0))),
        _timed("R2ADMM(gamma=1) == ADMM", 1e-12, lambda: deviation(("r2admm", 1.0), ("admm", 1.0))),
    ]


SUITES: dict[str, Callable[..., list[CheckResult]]] = {
    "adjoint": adjoint_suite,
    "gradcheck": gradcheck_suite,
    "oracle": oracle_suite,
    "equivalence": equivalence_suite,
}


def run_suite(name: str, seed: int = 42) -> list[CheckResult]:
    if name not in SUITES:
        raise UsageError(f"unknown suite {name!r}; valid: {', '.join(SUITES)}")
    return SUITES[name](seed)
