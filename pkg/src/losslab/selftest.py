"""Built-in invariant suite: fast, deterministic checks of the numerical
core that can run on any install (``losslab self-test``).

Covers the divergence identity between the direct and simplified
regularizer forms, nonnegativity and the uniform-zero property, analytic
gradients against central finite differences (loss level and through the
full network), the reduction identities of the combined objective, the
metric implementations against a brute-force threshold sweep, DET
monotonicity, and the expected-KL dot-product identity.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import metrics as M
from . import network as N
from . import probe as P


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class SelfTestReport:
    passed: bool
    checks: list[CheckResult] = field(default_factory=list)
    duration_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "duration_s": self.duration_s,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail}
                for c in self.checks
            ],
        }


def _random_posterior(rng: np.random.Generator, num_classes: int) -> L.Posterior:
    return L.Posterior.from_probs(
        rng.dirichlet(np.ones(num_classes)), int(rng.integers(num_classes))
    )


def check_jeffreys_equivalence(samples_per_k: int = 2000) -> CheckResult:
    """Direct vs simplified divergence, mixed tolerance 1e-9 + 1e-9|value|."""
    rng = np.random.default_rng(2024)
    worst = -np.inf
    for num_classes in (2, 3, 10, 100, 512):
        for _ in range(samples_per_k):
            p = _random_posterior(rng, num_classes)
            direct, simplified = L.jeffreys_direct(p), L.jeffreys_loss(p)
            excess = abs(direct - simplified) - (1e-9 + 1e-9 * abs(simplified))
            worst = max(worst, excess)
    return CheckResult(
        "jeffreys_equivalence", worst <= 0, f"max tolerance excess {worst:.3e}"
    )


def check_jeffreys_nonnegativity(n_random: int = 10_000, n_uniform: int = 1000) -> CheckResult:
    """Divergence >= 0 on random posteriors; ~0 on uniform non-targets."""
    rng = np.random.default_rng(77)
    min_value = np.inf
    for _ in range(n_random):
        p = _random_posterior(rng, int(rng.integers(2, 40)))
        min_value = min(min_value, L.jeffreys_loss(p))
    worst_uniform = 0.0
    for _ in range(n_uniform):
        num_classes = int(rng.integers(3, 40))
        pk = float(rng.uniform(0.05, 0.95))
        probs = np.full(num_classes, (1 - pk) / (num_classes - 1))
        k = int(rng.integers(num_classes))
        probs[k] = pk
        worst_uniform = max(worst_uniform, abs(L.jeffreys_loss(L.Posterior.from_probs(probs, k))))
    ok = min_value >= -1e-12 and worst_uniform <= 1e-10
    return CheckResult(
        "jeffreys_nonnegativity",
        ok,
        f"min random value {min_value:.3e}, max |uniform| {worst_uniform:.3e}",
    )


def _fd_loss_gradient(values, target, weights, aam, h=1e-5) -> np.ndarray:
    grad = np.zeros(values.size)
    for i in range(values.size):
        plus, minus = values.copy(), values.copy()
        plus[i] += h
        minus[i] -= h
        if aam is None:
            lp = L.combined_loss(L.softmax(plus, target), weights).total
            lm = L.combined_loss(L.softmax(minus, target), weights).total
        else:
            lp = L.combined_loss(L.softmax(L.aam_transform(plus, target, aam), target), weights).total
            lm = L.combined_loss(L.softmax(L.aam_transform(minus, target, aam), target), weights).total
        grad[i] = (lp - lm) / (2 * h)
    return grad


def check_loss_gradients(n_cases: int = 40) -> CheckResult:
    """Analytic loss gradients vs central differences, margin on and off."""
    rng = np.random.default_rng(11)
    worst = 0.0
    done = 0
    while done < n_cases:
        num_classes = int(rng.integers(3, 20))
        target = int(rng.integers(num_classes))
        weights = L.LossWeights(float(rng.uniform(0, 0.3)), float(rng.uniform(0, 0.3)))
        with_margin = done % 2 == 1
        if with_margin:
            values = rng.uniform(-0.95, 0.95, num_classes)
            aam = L.AamConfig(scale=float(rng.uniform(1, 8)), margin=float(rng.uniform(0, 0.5)))
            probs = L.softmax_matrix(L.aam_transform(values.copy(), target, aam)[None, :])[0]
        else:
            values = rng.uniform(-4, 4, num_classes)
            aam = None
            probs = L.softmax_matrix(values[None, :])[0]
        if probs.min() < 1e-9:  # stay away from the clamp
            continue
        analytic = L.combined_loss_grad(values, target, weights, aam)
        fd = _fd_loss_gradient(values, target, weights, aam)
        worst = max(worst, np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-10))
        done += 1
    return CheckResult("loss_gradients", worst <= 1e-6, f"max relative error {worst:.3e}")


def check_network_gradients() -> CheckResult:
    """Full backprop vs central differences on a miniature network, for
    every loss kind."""
    rng = np.random.default_rng(5)
    spec = N.NetworkSpec(input_dim=3, hidden_dims=(4,), embed_dim=3, num_classes=4)
    worst = 0.0
    for kind in L.LOSS_KINDS:
        cfg = N.TrainConfig(
            loss_kind=kind,
            weights=L.LossWeights(0.1, 0.05),
            aam=L.AamConfig(scale=5.0, margin=0.2),
            seed=0,
        )
        while True:
            params = N.init_params(spec, int(rng.integers(1 << 30)))
            inputs = rng.normal(size=(6, 3))
            labels = rng.integers(0, 4, size=6)
            cached = N._forward_cached(params, inputs)
            cos = N.forward_cosines(params, cached[4])
            if cached[3].min() > 1e-2 and np.max(np.abs(cos)) < 1 - 1e-3:
                break
        _, grads = N._backward(params, inputs, labels, cfg)
        analytic, fd = [], []
        h = 1e-5
        for t_idx, theta in enumerate(params.tensors()):
            flat = theta.reshape(-1)
            for j in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                old = flat[j]
                flat[j] = old + h
                lp = N.batch_loss(params, inputs, labels, cfg).total
                flat[j] = old - h
                lm = N.batch_loss(params, inputs, labels, cfg).total
                flat[j] = old
                analytic.append(grads[t_idx].reshape(-1)[j])
                fd.append((lp - lm) / (2 * h))
        analytic, fd = np.asarray(analytic), np.asarray(fd)
        worst = max(worst, np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-10))
    return CheckResult("network_gradients", worst <= 1e-5, f"max relative error {worst:.3e}")


def check_reduction_identities(n_cases: int = 200) -> CheckResult:
    """Equal weights reduce to CE + a * divergence; beta = 0 reduces to the
    label-smoothing objective."""
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(n_cases):
        p = _random_posterior(rng, int(rng.integers(3, 30)))
        a = float(rng.uniform(0, 0.5))
        equal = L.combined_loss(p, L.LossWeights(a, a)).total
        expected = L.cross_entropy(p) + a * L.jeffreys_loss(p)
        worst = max(worst, abs(equal - expected) / max(abs(expected), 1e-12))
        ls_only = L.combined_loss(p, L.LossWeights(a, 0.0)).total
        expected_ls = L.cross_entropy(p) + a * L.label_smoothing_term(p)
        worst = max(worst, abs(ls_only - expected_ls) / max(abs(expected_ls), 1e-12))
    return CheckResult("reduction_identities", worst <= 1e-12, f"max relative error {worst:.3e}")


def _sweep_metrics_oracle(scores: M.ScoreSet) -> tuple[float, float]:
    """Brute-force O(n^2) threshold sweep: every score (plus the two
    boundary corners) is a candidate threshold, and rates are counted one
    score at a time."""
    thresholds = sorted(set(scores.target_scores) | set(scores.nontarget_scores))
    points = [(1.0, 0.0)]
    for t in thresholds:
        p_miss = sum(1 for s in scores.target_scores if s < t) / scores.target_scores.size
        p_fa = sum(1 for s in scores.nontarget_scores if s >= t) / scores.nontarget_scores.size
        points.append((p_fa, p_miss))
    points.append((0.0, 1.0))
    eer = None
    for i, (p_fa, p_miss) in enumerate(points):
        if p_miss - p_fa >= 0:
            if p_miss == p_fa:
                eer = p_miss
            else:
                pf0, pm0 = points[i - 1]
                t = (pf0 - pm0) / ((p_miss - pm0) - (p_fa - pf0))
                eer = pm0 + t * (p_miss - pm0)
            break
    min_dcf = min(
        (0.01 * p_miss + 0.99 * p_fa) / 0.01 for p_fa, p_miss in points
    )
    return float(eer), float(min_dcf)


def check_metric_oracle(n_sets: int = 40) -> CheckResult:
    """EER/minDCF vs the exhaustive sweep, including the worked example."""
    rng = np.random.default_rng(123)
    worst = 0.0
    fixed = M.ScoreSet(np.array([0.9, 0.8, 0.4]), np.array([0.5, 0.2, 0.1]))
    sets = [fixed]
    for _ in range(n_sets):
        n_t = int(rng.integers(1, 100))
        n_n = int(rng.integers(1, 100))
        sets.append(
            M.ScoreSet(rng.normal(1, 1, n_t), rng.normal(0, 1, n_n))
        )
    for scores in sets:
        curve = M.compute_det(scores)
        eer, min_dcf = M.compute_eer(curve), M.compute_min_dcf(curve)
        oracle_eer, oracle_dcf = _sweep_metrics_oracle(scores)
        worst = max(worst, abs(eer - oracle_eer), abs(min_dcf - oracle_dcf))
    expected_fixed = abs(M.compute_eer(M.compute_det(fixed)) - 1 / 3)
    ok = worst <= 1e-12 and expected_fixed <= 1e-12
    return CheckResult("metric_oracle", ok, f"max |impl - oracle| {worst:.3e}")


def check_det_monotonicity(n_sets: int = 50) -> CheckResult:
    """Every computed DET curve satisfies the monotone-step invariants."""
    rng = np.random.default_rng(31)
    for _ in range(n_sets):
        scores = M.ScoreSet(
            rng.normal(0.5, 1, int(rng.integers(1, 200))),
            rng.normal(0, 1, int(rng.integers(1, 200))),
        )
        curve = M.compute_det(scores)  # constructor asserts monotonicity
        if np.any(np.diff(curve.p_fa) > 0) or np.any(np.diff(curve.p_miss) < 0):
            return CheckResult("det_monotonicity", False, "monotonicity violated")
    return CheckResult("det_monotonicity", True, f"{n_sets} random curves verified")


def check_expected_kl_identity(n_cases: int = 100) -> CheckResult:
    """Difference of mean divergences equals E[p] . (log q2 - log q1)."""
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(n_cases):
        num_classes = int(rng.integers(3, 12))
        posteriors = rng.dirichlet(np.ones(num_classes), size=int(rng.integers(2, 30)))
        q1 = rng.dirichlet(np.ones(num_classes))
        q2 = rng.dirichlet(np.ones(num_classes))
        kl1, kl2 = P.mean_kl_gap(posteriors, q1, q2)
        dot = float(posteriors.mean(axis=0) @ (np.log(q2) - np.log(q1)))
        worst = max(worst, abs((kl1 - kl2) - dot))
    return CheckResult("expected_kl_identity", worst <= 1e-10, f"max |lhs - rhs| {worst:.3e}")


ALL_CHECKS = (
    check_jeffreys_equivalence,
    check_jeffreys_nonnegativity,
    check_loss_gradients,
    check_network_gradients,
    check_reduction_identities,
    check_metric_oracle,
    check_det_monotonicity,
    check_expected_kl_identity,
)


def self_test() -> SelfTestReport:
    """Run every check and collect a machine-readable summary."""
    start = time.perf_counter()
    checks = [check() for check in ALL_CHECKS]
    return SelfTestReport(
        passed=all(c.passed for c in checks),
        checks=checks,
        duration_s=time.perf_counter() - start,
    )
