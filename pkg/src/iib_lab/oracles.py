"""Independent brute-force verifiers.

Everything here is deliberately dumb and self-contained: direct summation
over discrete probability tables, Monte Carlo sampling against closed forms,
exhaustive threshold enumeration, and a first-order max-margin dual solve.
These routines certify the analytic kernels and dataset constructions used
elsewhere; nothing in this module shares code with the paths it checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envgen import SkewSpec, gen_geoskew

FEATURE_NAMES = ("invariant", "pseudo_invariant", "skew", "spurious")


class OracleError(ValueError):
    pass


class NonSeparableError(RuntimeError):
    """The margin constraints admit no feasible classifier."""


# ---------------------------------------------------------------------------
# discrete information quantities


@dataclass
class DiscreteJoint:
    """Probability table over (Y, D, Z) with finite alphabets."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 3:
            raise OracleError(f"expected a 3-d (Y, D, Z) table, got ndim={self.table.ndim}")
        _validate_distribution(self.table)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.table.shape  # type: ignore[return-value]


def _validate_distribution(p: np.ndarray) -> None:
    if np.any(p < -1e-15):
        raise OracleError("probability table has negative entries")
    total = p.sum()
    if abs(total - 1.0) > 1e-12:
        raise OracleError(f"probability table sums to {total!r}, not 1")


def _entropy(p: np.ndarray) -> float:
    flat = p.reshape(-1)
    nz = flat[flat > 0.0]
    return float(-(nz * np.log(nz)).sum())


def exact_mi(joint: np.ndarray) -> float:
    """I(A; B) in nats by direct summation over a 2-d joint, with 0 ln 0 = 0."""
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2:
        raise OracleError(f"expected a 2-d joint, got ndim={p.ndim}")
    _validate_distribution(p)
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            pij = p[i, j]
            if pij > 0.0:
                total += pij * np.log(pij / (pa[i] * pb[j]))
    return float(total)


def exact_conditional_mi(joint: DiscreteJoint | np.ndarray) -> float:
    """I(Y; D | Z) = H(Y|Z) - H(Y|D,Z), each entropy by direct summation.

    The difference is mathematically nonnegative; tiny negative rounding
    residue (above -1e-12) is clamped to zero.
    """
    table = joint.table if isinstance(joint, DiscreteJoint) else DiscreteJoint(joint).table
    h_yz = _entropy(table.sum(axis=1)) - _entropy(table.sum(axis=(0, 1)))
    h_ydz = _entropy(table) - _entropy(table.sum(axis=0))
    value = h_yz - h_ydz
    if value < -1e-12:
        raise OracleError(f"conditional MI computed as {value}, below rounding tolerance")
    return max(value, 0.0)


def conditional_given_z(table: np.ndarray) -> np.ndarray:
    """P(Y | Z=z, D=d) for every (z, d) of positive mass; NaN where p(d,z)=0."""
    p_dz = table.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return table / p_dz[None, :, :]


def random_joint(shape: tuple[int, int, int], rng: np.random.Generator) -> DiscreteJoint:
    raw = rng.random(shape)
    return DiscreteJoint(raw / raw.sum())


def conditionally_independent_joint(
    shape: tuple[int, int, int], rng: np.random.Generator
) -> DiscreteJoint:
    """Random joint with Y independent of D given Z: p(y,d,z) = p(z) p(y|z) p(d|z)."""
    ny, nd, nz = shape
    p_z = rng.random(nz)
    p_z /= p_z.sum()
    p_y_given_z = rng.random((ny, nz))
    p_y_given_z /= p_y_given_z.sum(axis=0, keepdims=True)
    p_d_given_z = rng.random((nd, nz))
    p_d_given_z /= p_d_given_z.sum(axis=0, keepdims=True)
    table = p_y_given_z[:, None, :] * p_d_given_z[None, :, :] * p_z[None, None, :]
    return DiscreteJoint(table)


# ---------------------------------------------------------------------------
# Monte Carlo KL against the standard-normal reference


def mc_kl(mu, sigma=None, n_draws: int = 100_000, seed: int = 0) -> float:
    """Monte Carlo estimate of KL(N(mu, diag sigma^2) || N(0, I)).

    Accepts either explicit (mu, sigma) vectors or any object exposing
    ``mu``/``sigma`` attributes (graph nodes included). Averages
    ln q(z|x) - ln r(z) over z ~ q.
    """
    if sigma is None:
        code = mu
        mu = getattr(code.mu, "value", code.mu)
        sigma = getattr(code.sigma, "value", code.sigma)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if mu.shape != sigma.shape:
        raise OracleError(f"mu {mu.shape} and sigma {sigma.shape} differ")
    if np.any(sigma <= 0):
        raise OracleError("sigma must be strictly positive")
    if n_draws < 10_000:
        raise OracleError("n_draws must be at least 10^4")
    rng = np.random.default_rng(seed)
    eps = rng.normal(size=(n_draws, mu.size))
    z = mu + sigma * eps
    log_q = -np.log(sigma).sum() - 0.5 * (eps**2).sum(axis=1)
    log_r = -0.5 * (z**2).sum(axis=1)
    return float((log_q - log_r).mean())


# ---------------------------------------------------------------------------
# sparsity-constrained invariant feature enumeration


@dataclass
class ToyFeatureInstance:
    """Per-environment samples over the four scalar diagnostic features.

    Column order is (invariant, pseudo-invariant, skew, spurious); labels are
    +-1. At least two environments are required.
    """

    env_features: list[np.ndarray]
    env_labels: list[np.ndarray]

    def __post_init__(self):
        if len(self.env_features) < 2 or len(self.env_features) != len(self.env_labels):
            raise OracleError("need matched features/labels for at least two environments")
        for X, y in zip(self.env_features, self.env_labels):
            if X.ndim != 2 or X.shape[1] != 4:
                raise OracleError(f"expected (n, 4) features, got {X.shape}")
            if X.shape[0] != y.shape[0]:
                raise OracleError("feature/label length mismatch")
            if not np.all(np.isin(y, (-1, 1))):
                raise OracleError("labels must be +-1")


@dataclass
class FeatureReport:
    index: int
    name: str
    feasible: bool
    per_env_optimal_risk: list[float]
    shared_risk: float
    max_regret: float
    threshold: float
    orientation: int
    note: str


@dataclass
class SparseSearchResult:
    chosen_index: int | None
    degenerate: bool
    no_invariant_feature: bool
    baseline_risk: float
    features: list[FeatureReport]


def _stump_risks(values: np.ndarray, labels: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """0-1 risks of sign(value - t) classifiers, shape (2, n_thresholds).

    Row 0 is the + orientation (predict +1 above the threshold), row 1 the
    flipped one.
    """
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    pos_sorted = (labels[order] == 1).astype(np.int64)
    cum_pos = np.concatenate([[0], np.cumsum(pos_sorted)])
    n = len(values)
    n_pos = int(pos_sorted.sum())
    idx = np.searchsorted(sorted_vals, thresholds, side="right")
    # + orientation errors: positives at or below t, negatives above t
    pos_below = cum_pos[idx]
    neg_above = (n - idx) - (n_pos - pos_below)
    risk_plus = (pos_below + neg_above) / n
    return np.stack([risk_plus, 1.0 - risk_plus])


def sparse_invariant_search(
    instance: ToyFeatureInstance, invariance_tol: float = 0.02
) -> SparseSearchResult:
    """Enumerate the four one-feature threshold classifiers.

    A feature is feasible when some single shared stump is simultaneously
    near-optimal in every environment: its per-environment excess risk over
    that environment's own best stump stays within ``invariance_tol``. Among
    feasible features the one with the lowest pooled risk wins; ties break
    toward the lowest index. If no feasible stump improves on the best
    constant classifier the result is flagged degenerate, and if no feature
    is feasible at all the result records that instead of raising.
    """
    pooled_labels = np.concatenate(instance.env_labels)
    n_total = len(pooled_labels)
    baseline = min(np.mean(pooled_labels == 1), np.mean(pooled_labels == -1))
    env_sizes = [len(y) for y in instance.env_labels]

    reports = []
    for k, name in enumerate(FEATURE_NAMES):
        pooled_vals = np.concatenate([X[:, k] for X in instance.env_features])
        uniq = np.unique(pooled_vals)
        mids = (uniq[:-1] + uniq[1:]) / 2.0 if len(uniq) > 1 else np.empty(0)
        thresholds = np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])

        per_env = np.stack(
            [
                _stump_risks(X[:, k], y, thresholds)
                for X, y in zip(instance.env_features, instance.env_labels)
            ]
        )  # (n_envs, 2, n_thresholds)
        env_optima = per_env.reshape(len(env_sizes), -1).min(axis=1)
        regrets = (per_env - env_optima[:, None, None]).max(axis=0)  # (2, n_thresholds)
        pooled = np.tensordot(np.asarray(env_sizes, dtype=np.float64), per_env, axes=(0, 0)) / n_total

        feasible_mask = regrets <= invariance_tol
        if feasible_mask.any():
            masked = np.where(feasible_mask, pooled, np.inf)
            flat_best = int(np.argmin(masked))
            orient, t_idx = np.unravel_index(flat_best, masked.shape)
            reports.append(
                FeatureReport(
                    index=k,
                    name=name,
                    feasible=True,
                    per_env_optimal_risk=[float(v) for v in env_optima],
                    shared_risk=float(pooled[orient, t_idx]),
                    max_regret=float(regrets[orient, t_idx]),
                    threshold=float(thresholds[t_idx]),
                    orientation=+1 if orient == 0 else -1,
                    note="feasible",
                )
            )
        else:
            best_flat = int(np.argmin(regrets))
            orient, t_idx = np.unravel_index(best_flat, regrets.shape)
            reports.append(
                FeatureReport(
                    index=k,
                    name=name,
                    feasible=False,
                    per_env_optimal_risk=[float(v) for v in env_optima],
                    shared_risk=float(pooled[orient, t_idx]),
                    max_regret=float(regrets[orient, t_idx]),
                    threshold=float(thresholds[t_idx]),
                    orientation=+1 if orient == 0 else -1,
                    note="infeasible: no shared stump is near-optimal in every environment",
                )
            )

    feasible = [r for r in reports if r.feasible]
    if not feasible:
        return SparseSearchResult(
            chosen_index=None,
            degenerate=True,
            no_invariant_feature=True,
            baseline_risk=float(baseline),
            features=reports,
        )
    best = min(feasible, key=lambda r: (r.shared_risk, r.index))
    degenerate = best.shared_risk >= baseline - invariance_tol
    for r in reports:
        if r.feasible and r is not best:
            r.note = "feasible but higher risk"
    return SparseSearchResult(
        chosen_index=best.index,
        degenerate=degenerate,
        no_invariant_feature=False,
        baseline_risk=float(baseline),
        features=reports,
    )


def canonical_toy_instance(seed: int, n_per_env: int = 2000) -> ToyFeatureInstance:
    """Two-environment instance realizing the four diagnostic feature types.

    invariant: sign always matches the label. pseudo-invariant: weak stable
    signal. skew: a clean bimodal group indicator independent of the label.
    spurious: strong within-environment signal whose sign flips between the
    training environments.
    """
    env_features, env_labels = [], []
    for env, spurious_sign in enumerate((1.0, -1.0)):
        rng = np.random.default_rng([seed, env])
        y = np.where(rng.random(n_per_env) < 0.5, 1.0, -1.0)
        z_i = y * rng.uniform(0.6, 1.4, size=n_per_env)
        z_p = 0.3 * y + rng.normal(size=n_per_env)
        g = np.where(rng.random(n_per_env) < 0.9, 1.0, -1.0)
        z_sk = g * rng.uniform(0.8, 1.2, size=n_per_env)
        z_sp = spurious_sign * y + 0.3 * rng.normal(size=n_per_env)
        env_features.append(np.stack([z_i, z_p, z_sk, z_sp], axis=1))
        env_labels.append(y)
    return ToyFeatureInstance(env_features, env_labels)


# ---------------------------------------------------------------------------
# minimum-norm margin classifier


def min_norm_classifier(
    X: np.ndarray,
    y: np.ndarray,
    tol: float = 1e-6,
    max_iters: int = 100_000,
) -> np.ndarray:
    """Least-norm w with y_i <x_i, w> >= 1 for all i, by first-order dual ascent.

    Cyclic projected coordinate ascent on the hard-margin dual (Hildreth's
    scheme): each iteration projects one multiplier onto the nonnegative
    orthant after an exact line step, with the primal carried along as
    w = X^T (alpha * y). One iteration touches one constraint; the cap counts
    those touches. Terminates when the worst constraint violation and the
    relative duality gap both fall below ``tol``; raises
    :class:`NonSeparableError` when the cap passes without approaching
    feasibility.
    """
    A = y[:, None] * np.asarray(X, dtype=np.float64)
    n = A.shape[0]
    row_sq = (A * A).sum(axis=1)
    if np.any(row_sq == 0.0):
        raise NonSeparableError("zero feature row cannot satisfy a unit margin")

    alpha = np.zeros(n)
    w = np.zeros(A.shape[1])
    # Screened working set: most constraints are never active, so ascend on
    # the few that are and rescan the full set between inner solves.
    working: list[int] = [int(np.argmin(row_sq))]
    touches = 0
    while touches < max_iters:
        for _ in range(200):  # inner coordinate-ascent cycles on the working set
            moved = 0.0
            for i in working:
                delta = (1.0 - A[i] @ w) / row_sq[i]
                new_alpha = max(0.0, alpha[i] + delta)
                if new_alpha != alpha[i]:
                    w += (new_alpha - alpha[i]) * A[i]
                    moved = max(moved, abs(new_alpha - alpha[i]) * np.sqrt(row_sq[i]))
                    alpha[i] = new_alpha
                touches += 1
            if moved <= 0.01 * tol or touches >= max_iters:
                break
        slack = 1.0 - A @ w
        violation = max(0.0, float(slack.max()))
        gap = abs(float(w @ w) - float(alpha.sum()))
        if violation <= tol and gap <= tol * max(1.0, float(w @ w)):
            return w
        worst = int(np.argmax(slack))
        if worst not in working:
            working.append(worst)
        working = [i for i in working if alpha[i] > 0.0 or i == worst]
    violation = max(0.0, float((1.0 - A @ w).max()))
    if violation > 1e-3:
        raise NonSeparableError(f"margin constraints still violated by {violation:.3g} at cap")
    return w


def min_norm_comparison(spec: SkewSpec, seed: int) -> tuple[float, float]:
    """(||w_all||, ||w_min||): least-norm invariant-feature classifiers.

    ``w_all`` separates every sample of the generated skewed dataset using
    the invariant block only; ``w_min`` separates just the minority group.
    Feasible-set inclusion forces ||w_min|| <= ||w_all||; on skewed instances
    the gap is strict and large, which is exactly the shortcut incentive the
    construction demonstrates.
    """
    ds = gen_geoskew(spec, seed)
    X_inv = ds.inputs[:, : spec.invariant_dim]
    y = ds.signed_labels().astype(np.float64)
    w_all = min_norm_classifier(X_inv, y)
    minority = ds.group == 0
    w_min = min_norm_classifier(X_inv[minority], y[minority])
    return float(np.linalg.norm(w_all)), float(np.linalg.norm(w_min))
