"""Loss kernels and composite training objectives.

The composite methods all reduce to four ingredients computed from one
shared forward pass:

* ``l_i``  -- pooled cross-entropy of the invariant predictor,
* ``l_z``  -- mean KL of the Gaussian code against a standard normal,
* ``l_d``  -- pooled cross-entropy of the domain-aware predictor (or, for
  the marginal-invariance baseline, of the domain discriminator),
* ``irm_pen`` -- the squared dummy-scale gradient penalty, one term per
  environment, evaluated on the deterministic path.

``compose`` wires them into a (minimizer, adversary) pair. The adversary
objective is always plain ``l_d``: the domain-aware head minimizing its own
loss is equivalent to it maximizing the invariance gap, and keeps its
learning rate independent of the gap weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import models as mdl

DEFAULT_LAMBDA = 10.0
DEFAULT_BETA = 1e-4
DEFAULT_IRM_ANNEAL = 500


class Method(str, Enum):
    ERM = "ERM"
    IRM = "IRM"
    IB_ERM = "IB_ERM"
    IB_IRM = "IB_IRM"
    IIB = "IIB"
    IIB_NO_INV = "IIB_NO_INV"  # lambda = 0 ablation
    IIB_NO_IB = "IIB_NO_IB"  # beta = 0 ablation
    DOMAIN_ADV = "DOMAIN_ADV"


STOCHASTIC_METHODS = {Method.IB_ERM, Method.IB_IRM, Method.IIB, Method.IIB_NO_INV, Method.IIB_NO_IB}
ADVERSARY_METHODS = {Method.IIB, Method.IIB_NO_INV, Method.IIB_NO_IB, Method.DOMAIN_ADV}
IRM_PENALTY_METHODS = {Method.IRM, Method.IB_IRM}
INVARIANCE_GAP_METHODS = {Method.IIB, Method.IIB_NO_IB}
MULTI_ENV_METHODS = IRM_PENALTY_METHODS | {Method.IIB, Method.IIB_NO_IB}

# methods whose objective carries no invariance weight / no bottleneck weight
_NO_LAMBDA = {Method.ERM, Method.IB_ERM, Method.IIB_NO_INV}
_NO_BETA = {Method.ERM, Method.IRM, Method.IIB_NO_IB, Method.DOMAIN_ADV}


@dataclass
class ObjectiveSpec:
    """Method selector plus objective coefficients.

    ``lam`` is the invariance-gap weight for the bottleneck methods, the
    penalty weight for the IRM family (annealed: weight 1.0 for the first
    ``irm_anneal_iters`` steps), and the adversarial weight for the
    marginal-invariance baseline. Coefficients that a method does not use are
    forced to zero so ablation rows are unambiguous.
    """

    method: Method
    lam: float = DEFAULT_LAMBDA
    beta: float = DEFAULT_BETA
    irm_anneal_iters: int = DEFAULT_IRM_ANNEAL

    def __post_init__(self):
        self.method = Method(self.method)
        if self.lam < 0 or self.beta < 0:
            raise ValueError("objective coefficients must be nonnegative")
        if self.method in _NO_LAMBDA:
            self.lam = 0.0
        if self.method in _NO_BETA:
            self.beta = 0.0

    @property
    def stochastic(self) -> bool:
        return self.method in STOCHASTIC_METHODS

    @property
    def has_adversary(self) -> bool:
        return self.method in ADVERSARY_METHODS

    @property
    def domain_head(self) -> str:
        return mdl.DOMAIN_DISCRIMINATOR if self.method == Method.DOMAIN_ADV else mdl.CLASS_CONDITIONAL

    @property
    def needs_multiple_envs(self) -> bool:
        return self.method in MULTI_ENV_METHODS

    def irm_weight(self, step: int) -> float:
        if self.method not in IRM_PENALTY_METHODS:
            return 0.0
        return self.lam if step >= self.irm_anneal_iters else 1.0


@dataclass
class EnvBatch:
    """One environment's slice of a training step; ``domain`` is the
    consecutive training-domain id used for conditioning."""

    x: np.ndarray
    y: np.ndarray
    domain: int | None = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("feature/label length mismatch")


@dataclass
class LossBreakdown:
    l_i: float
    l_z: float
    l_d: float
    irm_pen: float
    minimizer_loss: float
    adversary_loss: float

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not math.isfinite(value):
                raise ValueError(f"loss component {name} is not finite: {value}")

    def as_dict(self) -> dict[str, float]:
        return {
            "l_i": self.l_i,
            "l_z": self.l_z,
            "l_d": self.l_d,
            "irm_pen": self.irm_pen,
            "minimizer_loss": self.minimizer_loss,
            "adversary_loss": self.adversary_loss,
        }


def _total_samples(env_batches: list[EnvBatch]) -> int:
    n = sum(len(b.y) for b in env_batches)
    if n == 0:
        raise ValueError("empty batch")
    return n


def _codes_and_samples(
    env_batches: list[EnvBatch],
    params: ad.ParameterSet,
    cfg: mdl.ModelConfig,
    eps_batches: list[np.ndarray] | None,
) -> tuple[list[mdl.GaussianCode], list[ad.Node]]:
    codes, zs = [], []
    for i, batch in enumerate(env_batches):
        code = mdl.encode(batch.x, params, cfg)
        codes.append(code)
        if eps_batches is None:
            zs.append(code.mu)  # deterministic path: sigma head unused
        else:
            zs.append(mdl.sample_code(code, eps_batches[i]))
    return codes, zs


def _pooled_ce(per_env_losses: list[ad.Node], n_total: int) -> ad.Node:
    total = None
    for vec in per_env_losses:
        s = ad.tensor_sum(vec)
        total = s if total is None else ad.add(total, s)
    return ad.scale(total, 1.0 / n_total)


def loss_invariant(
    env_batches: list[EnvBatch],
    params: ad.ParameterSet,
    cfg: mdl.ModelConfig,
    eps_batches: list[np.ndarray] | None = None,
) -> ad.Node:
    """Pooled mean cross-entropy of the invariant predictor (nats)."""
    n = _total_samples(env_batches)
    _, zs = _codes_and_samples(env_batches, params, cfg, eps_batches)
    losses = [
        ad.softmax_cross_entropy(mdl.predict_invariant(z, params, cfg), b.y)
        for z, b in zip(zs, env_batches)
    ]
    return _pooled_ce(losses, n)


def loss_bottleneck(codes: list[mdl.GaussianCode]) -> ad.Node:
    """Mean KL(N(mu, diag sigma^2) || N(0, I)) over all samples.

    Closed form per coordinate: (mu^2 + sigma^2 - 1 - 2 ln sigma) / 2.
    """
    if not codes:
        raise ValueError("empty batch")
    n = sum(code.mu.shape[0] for code in codes)
    total = None
    for code in codes:
        if np.any(code.sigma.value <= 0.0):
            raise ValueError("code std must be strictly positive")
        elts = ad.add(
            ad.add(ad.mul(code.mu, code.mu), ad.mul(code.sigma, code.sigma)),
            ad.scale(ad.log(code.sigma), -2.0),
        )
        s = ad.tensor_sum(ad.add_scalar(elts, -1.0))
        total = s if total is None else ad.add(total, s)
    return ad.scale(total, 0.5 / n)


def loss_domain(
    env_batches: list[EnvBatch],
    params: ad.ParameterSet,
    cfg: mdl.ModelConfig,
    eps_batches: list[np.ndarray] | None = None,
) -> ad.Node:
    """Pooled mean cross-entropy of the domain-aware predictor (nats).

    Shares the sampling convention of :func:`loss_invariant`; pass the same
    noise to evaluate both on identical code draws.
    """
    n = _total_samples(env_batches)
    for batch in env_batches:
        if batch.domain is None:
            raise ValueError("every sample needs a domain index for the domain-aware loss")
    _, zs = _codes_and_samples(env_batches, params, cfg, eps_batches)
    losses = []
    for z, batch in zip(zs, env_batches):
        d = np.full(len(batch.y), batch.domain, dtype=np.int64)
        logits = mdl.predict_domain(z, d, params, cfg)
        losses.append(ad.softmax_cross_entropy(logits, batch.y))
    return _pooled_ce(losses, n)


def loss_domain_membership(
    env_batches: list[EnvBatch],
    params: ad.ParameterSet,
    cfg: mdl.ModelConfig,
) -> ad.Node:
    """Domain-classification cross-entropy of the discriminator on the code."""
    n = _total_samples(env_batches)
    _, zs = _codes_and_samples(env_batches, params, cfg, None)
    losses = []
    for z, batch in zip(zs, env_batches):
        if batch.domain is None:
            raise ValueError("every sample needs a domain index for the discriminator loss")
        d = np.full(len(batch.y), batch.domain, dtype=np.int64)
        losses.append(ad.softmax_cross_entropy(mdl.predict_domain_membership(z, params, cfg), d))
    return _pooled_ce(losses, n)


def irm_penalty(
    env_batches: list[EnvBatch],
    params: ad.ParameterSet,
    cfg: mdl.ModelConfig,
) -> ad.Node:
    """Sum over environments of the squared dummy-scale risk derivative.

    Each term is (d/dw R^e(w * logits) at w = 1)^2 with R^e the environment
    cross-entropy of the deterministic-path logits. The scalar derivative is
    closed-form (see :func:`iib_lab.autodiff.ce_scale_derivative`), so the
    penalty differentiates through a first-order graph.
    """
    if not env_batches:
        raise ValueError("need at least one environment batch")
    for batch in env_batches:
        if len(batch.y) == 0:
            raise ValueError("empty environment batch")
    _, zs = _codes_and_samples(env_batches, params, cfg, None)
    total = None
    for z, batch in zip(zs, env_batches):
        g = ad.ce_scale_derivative(mdl.predict_invariant(z, params, cfg), batch.y)
        term = ad.mul(g, g)
        total = term if total is None else ad.add(total, term)
    return total


def compose(spec: ObjectiveSpec, l_i, l_z=None, l_d=None, irm_pen=None, step: int = 0):
    """Combine loss components into (minimizer_loss, adversary_loss).

    Accepts graph nodes or plain floats; the composition is exactly linear in
    the components. ``adversary_loss`` is None for methods without one.
    Missing components that the method requires raise.
    """
    method = spec.method

    def require(value, name):
        if value is None:
            raise ValueError(f"{method.value} requires component {name}")
        return value

    minimizer = l_i
    if method in (Method.IB_ERM, Method.IB_IRM, Method.IIB, Method.IIB_NO_INV):
        minimizer = minimizer + spec.beta * require(l_z, "l_z")
    if method in IRM_PENALTY_METHODS:
        minimizer = minimizer + spec.irm_weight(step) * require(irm_pen, "irm_pen")
    if method in INVARIANCE_GAP_METHODS:
        minimizer = minimizer + spec.lam * (l_i - require(l_d, "l_d"))
    if method == Method.DOMAIN_ADV:
        minimizer = minimizer + spec.lam * (-1.0 * require(l_d, "l_d"))

    adversary = require(l_d, "l_d") if spec.has_adversary else None
    return minimizer, adversary


@dataclass
class MethodLosses:
    minimizer: ad.Node
    adversary: ad.Node | None
    breakdown: LossBreakdown


def method_losses(
    spec: ObjectiveSpec,
    env_batches: list[EnvBatch],
    params: ad.ParameterSet,
    cfg: mdl.ModelConfig,
    eps_batches: list[np.ndarray] | None = None,
    step: int = 0,
) -> MethodLosses:
    """One shared forward pass producing the method's composed objectives.

    The invariance gap reuses the same code samples for ``l_i`` and ``l_d``.
    Deterministic-path methods ignore ``eps_batches``; the dummy-scale
    penalty always evaluates on the deterministic path.
    """
    n = _total_samples(env_batches)
    eps = eps_batches if spec.stochastic else None
    codes, zs = _codes_and_samples(env_batches, params, cfg, eps)

    l_i = _pooled_ce(
        [
            ad.softmax_cross_entropy(mdl.predict_invariant(z, params, cfg), b.y)
            for z, b in zip(zs, env_batches)
        ],
        n,
    )

    l_z = loss_bottleneck(codes) if spec.stochastic else None

    l_d = None
    if spec.method == Method.DOMAIN_ADV:
        losses = []
        for z, batch in zip(zs, env_batches):
            d = np.full(len(batch.y), batch.domain, dtype=np.int64)
            losses.append(ad.softmax_cross_entropy(mdl.predict_domain_membership(z, params, cfg), d))
        l_d = _pooled_ce(losses, n)
    elif spec.has_adversary:
        losses = []
        for z, batch in zip(zs, env_batches):
            d = np.full(len(batch.y), batch.domain, dtype=np.int64)
            losses.append(ad.softmax_cross_entropy(mdl.predict_domain(z, d, params, cfg), batch.y))
        l_d = _pooled_ce(losses, n)

    pen = None
    if spec.method in IRM_PENALTY_METHODS:
        total = None
        for code, batch in zip(codes, env_batches):
            g = ad.ce_scale_derivative(mdl.predict_invariant(code.mu, params, cfg), batch.y)
            term = ad.mul(g, g)
            total = term if total is None else ad.add(total, term)
        pen = total

    minimizer, adversary = compose(spec, l_i, l_z, l_d, pen, step=step)
    breakdown = LossBreakdown(
        l_i=float(l_i.value),
        l_z=float(l_z.value) if l_z is not None else 0.0,
        l_d=float(l_d.value) if l_d is not None else 0.0,
        irm_pen=float(pen.value) if pen is not None else 0.0,
        minimizer_loss=float(minimizer.value),
        adversary_loss=float(adversary.value) if adversary is not None else 0.0,
    )
    return MethodLosses(minimizer=minimizer, adversary=adversary, breakdown=breakdown)
