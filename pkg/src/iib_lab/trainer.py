"""Alternating min-max training loop, optimizer state, and model selection.

A training step draws one batch per environment plus shared reparameterization
noise, measures the loss breakdown at the current parameters, then runs the
configured number of adversary updates (domain head only) followed by one
minimizer update (encoder and invariant head only, domain head frozen).
Evaluation always uses the deterministic code mean and is recorded every
``eval_every`` iterations together with a parameter snapshot, so model
selection is a pure function of the recorded history.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models as mdl
from .envgen import EnvironmentDataset
from .objectives import EnvBatch, LossBreakdown, Method, ObjectiveSpec, method_losses

TRAINING_DOMAIN_VALIDATION = "training_domain_validation"
LEAVE_ONE_DOMAIN_OUT = "leave_one_domain_out"


@dataclass
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 128
    learning_rate: float = 1e-3
    adversary_steps_per_min_step: int = 1
    optimizer: str = "adam"
    seed: int = 0
    selection: str = TRAINING_DOMAIN_VALIDATION
    validation_fraction: float = 0.2
    eval_every: int = 100
    latent_dim: int = 16
    hidden_width: int = 64
    predictor_depth: int = 1
    debug_routing_checks: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0.0 < self.validation_fraction <= 0.5):
            raise ValueError("validation_fraction must lie in (0, 0.5]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.selection not in (TRAINING_DOMAIN_VALIDATION, LEAVE_ONE_DOMAIN_OUT):
            raise ValueError(f"unknown selection strategy {self.selection!r}")
        if self.adversary_steps_per_min_step < 0:
            raise ValueError("adversary_steps_per_min_step must be >= 0")


class Optimizer:
    """Plain gradient descent or adaptive-moment updates over named parameters."""

    def __init__(self, params: ad.ParameterSet, names: list[str], lr: float, kind: str):
        self.nodes = {name: params.get(name) for name in names}
        self.lr = lr
        self.kind = kind
        self.t = 0
        if kind == "adam":
            self.m = {n: np.zeros_like(node.value) for n, node in self.nodes.items()}
            self.v = {n: np.zeros_like(node.value) for n, node in self.nodes.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, node in self.nodes.items():
            g = grads[name]
            if self.kind == "sgd":
                node.value -= self.lr * g
            else:
                m = self.m[name]
                v = self.v[name]
                m[...] = 0.9 * m + 0.1 * g
                v[...] = 0.999 * v + 0.001 * (g * g)
                m_hat = m / (1.0 - 0.9**self.t)
                v_hat = v / (1.0 - 0.999**self.t)
                node.value -= self.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


@dataclass
class EvalEvent:
    iteration: int
    train_acc: list[float]
    val_acc: list[float]
    test_acc: float | None
    majority_val_acc: float | None
    minority_val_acc: float | None

    @property
    def mean_val_acc(self) -> float:
        return float(np.mean(self.val_acc))


@dataclass
class RunRecord:
    method: str
    seed: int
    losses: list[LossBreakdown] = field(default_factory=list)
    evals: list[EvalEvent] = field(default_factory=list)
    checkpoints: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    fold_val_accs: dict[int, list[float]] | None = None
    selected_checkpoint: int | None = None
    wall_clock: float = 0.0

    def eval_at(self, iteration: int) -> EvalEvent:
        for ev in self.evals:
            if ev.iteration == iteration:
                return ev
        raise KeyError(f"no evaluation recorded at iteration {iteration}")

    def selected_eval(self) -> EvalEvent:
        if self.selected_checkpoint is None:
            raise ValueError("no checkpoint selected")
        return self.eval_at(self.selected_checkpoint)


def model_config_for(
    train_envs: list[EnvironmentDataset], spec: ObjectiveSpec, cfg: TrainConfig
) -> mdl.ModelConfig:
    first = train_envs[0]
    return mdl.ModelConfig(
        input_dim=first.n_features,
        n_classes=first.n_classes,
        n_domains=len(train_envs),
        latent_dim=cfg.latent_dim,
        encoder_hidden=cfg.hidden_width,
        predictor_hidden=cfg.hidden_width,
        predictor_depth=cfg.predictor_depth,
        domain_head=spec.domain_head,
    )


def split_train_validation(
    envs: list[EnvironmentDataset], fraction: float, seed: int
) -> tuple[list[EnvironmentDataset], list[EnvironmentDataset]]:
    """Deterministic per-environment split; the validation part keeps tags."""
    rng = np.random.default_rng([seed, 0xA11CE])
    train_parts, val_parts = [], []
    for ds in envs:
        perm = rng.permutation(len(ds))
        n_val = max(1, int(round(fraction * len(ds))))
        val_parts.append(ds.subset(perm[:n_val]))
        train_parts.append(ds.subset(perm[n_val:]))
    return train_parts, val_parts


def predict_labels(
    params: ad.ParameterSet, model_cfg: mdl.ModelConfig, inputs: np.ndarray, chunk: int = 2048
) -> np.ndarray:
    """Deterministic-path class predictions (code mean, invariant head)."""
    out = np.empty(len(inputs), dtype=np.int64)
    for start in range(0, len(inputs), chunk):
        x = inputs[start : start + chunk]
        code = mdl.encode(x, params, model_cfg)
        logits = mdl.predict_invariant(code.mu, params, model_cfg)
        out[start : start + len(x)] = np.argmax(logits.value, axis=1)
    return out


def evaluate_accuracy(
    params: ad.ParameterSet, model_cfg: mdl.ModelConfig, ds: EnvironmentDataset
) -> float:
    return float(np.mean(predict_labels(params, model_cfg, ds.inputs) == ds.labels))


def group_accuracies(
    params: ad.ParameterSet, model_cfg: mdl.ModelConfig, envs: list[EnvironmentDataset]
) -> tuple[float | None, float | None]:
    """(majority, minority) accuracy pooled over the given datasets."""
    correct = {0: 0, 1: 0}
    total = {0: 0, 1: 0}
    for ds in envs:
        pred = predict_labels(params, model_cfg, ds.inputs)
        for tag in (0, 1):
            mask = ds.group == tag
            total[tag] += int(mask.sum())
            correct[tag] += int((pred[mask] == ds.labels[mask]).sum())
    maj = correct[1] / total[1] if total[1] else None
    mino = correct[0] / total[0] if total[0] else None
    return maj, mino


def train_step(
    env_splits: list[EnvironmentDataset],
    params: ad.ParameterSet,
    model_cfg: mdl.ModelConfig,
    spec: ObjectiveSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt_min: Optimizer,
    opt_adv: Optimizer | None,
    step: int,
) -> LossBreakdown:
    """One alternation: measure, update the adversary, update the minimizer."""
    if spec.needs_multiple_envs and len(env_splits) < 2:
        raise ValueError(f"{spec.method.value}: invariance term undefined with one domain")

    batches, eps_batches = [], []
    for i, ds in enumerate(env_splits):
        idx = rng.integers(0, len(ds), size=cfg.batch_size)
        batches.append(EnvBatch(x=ds.inputs[idx], y=ds.labels[idx], domain=i))
        eps_batches.append(rng.normal(size=(cfg.batch_size, model_cfg.latent_dim)))

    out = method_losses(spec, batches, params, model_cfg, eps_batches, step=step)
    breakdown = out.breakdown

    min_group_names = [
        name for group in ("encoder", "invariant_predictor") for name in params.group(group)
    ]
    adv_group_names = list(params.group("domain_predictor"))

    if cfg.debug_routing_checks:
        before_min = {n: params.get(n).value.copy() for n in min_group_names}
    adversary_ran = False
    if spec.has_adversary and opt_adv is not None and cfg.adversary_steps_per_min_step > 0:
        current = out
        for k in range(cfg.adversary_steps_per_min_step):
            if k > 0:
                current = method_losses(spec, batches, params, model_cfg, eps_batches, step=step)
            grads = ad.backward(current.adversary, params)
            opt_adv.step({n: grads[n] for n in adv_group_names})
            adversary_ran = True
    if cfg.debug_routing_checks:
        for n in min_group_names:
            if not np.array_equal(before_min[n], params.get(n).value):
                raise AssertionError(f"adversary step modified minimizer parameter {n}")

    if cfg.debug_routing_checks:
        before_adv = {n: params.get(n).value.copy() for n in adv_group_names}
    current = (
        method_losses(spec, batches, params, model_cfg, eps_batches, step=step)
        if adversary_ran
        else out
    )
    grads = ad.backward(current.minimizer, params)
    opt_min.step({n: grads[n] for n in min_group_names})
    if cfg.debug_routing_checks:
        for n in adv_group_names:
            if not np.array_equal(before_adv[n], params.get(n).value):
                raise AssertionError(f"minimizer step modified adversary parameter {n}")

    return breakdown


def run_training(
    train_envs: list[EnvironmentDataset],
    test_env: EnvironmentDataset | None,
    spec: ObjectiveSpec,
    cfg: TrainConfig,
) -> RunRecord:
    """Full seeded run: split, iterate, evaluate, snapshot, select."""
    started = time.perf_counter()
    model_cfg = model_config_for(train_envs, spec, cfg)
    params = mdl.init_params(model_cfg, seed=[cfg.seed, 3])
    train_splits, val_splits = split_train_validation(
        train_envs, cfg.validation_fraction, cfg.seed
    )
    rng = np.random.default_rng([cfg.seed, 1])
    opt_min = Optimizer(
        params,
        [n for g in ("encoder", "invariant_predictor") for n in params.group(g)],
        cfg.learning_rate,
        cfg.optimizer,
    )
    adv_names = list(params.group("domain_predictor"))
    opt_adv = Optimizer(params, adv_names, cfg.learning_rate, cfg.optimizer) if adv_names else None

    record = RunRecord(method=spec.method.value, seed=cfg.seed)
    has_groups = any(np.any(ds.group == 0) for ds in val_splits)

    def run_eval(iteration: int) -> None:
        train_acc = [evaluate_accuracy(params, model_cfg, ds) for ds in train_splits]
        val_acc = [evaluate_accuracy(params, model_cfg, ds) for ds in val_splits]
        test_acc = evaluate_accuracy(params, model_cfg, test_env) if test_env is not None else None
        maj = mino = None
        if has_groups:
            maj, mino = group_accuracies(params, model_cfg, val_splits)
        record.evals.append(
            EvalEvent(
                iteration=iteration,
                train_acc=train_acc,
                val_acc=val_acc,
                test_acc=test_acc,
                majority_val_acc=maj,
                minority_val_acc=mino,
            )
        )
        record.checkpoints[iteration] = params.copy_values()

    for step in range(cfg.iterations):
        breakdown = train_step(
            train_splits, params, model_cfg, spec, cfg, rng, opt_min, opt_adv, step
        )
        record.losses.append(breakdown)
        if (step + 1) % cfg.eval_every == 0 or step == cfg.iterations - 1:
            run_eval(step + 1)

    record.selected_checkpoint = select_model(record, TRAINING_DOMAIN_VALIDATION)
    record.wall_clock = time.perf_counter() - started
    return record


def select_model(record: RunRecord, strategy: str) -> int:
    """Checkpoint id chosen by the given selection strategy; ties go earliest."""
    if not record.evals:
        raise ValueError("record contains no evaluations")
    if strategy == TRAINING_DOMAIN_VALIDATION:
        scores = [(ev.mean_val_acc, ev.iteration) for ev in record.evals]
    elif strategy == LEAVE_ONE_DOMAIN_OUT:
        if not record.fold_val_accs:
            raise ValueError("record has no fold accuracies for leave-one-domain-out selection")
        scores = [
            (float(np.mean(accs)), iteration)
            for iteration, accs in sorted(record.fold_val_accs.items())
        ]
    else:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    best_score = max(score for score, _ in scores)
    for score, iteration in scores:  # earliest checkpoint wins ties
        if score == best_score:
            return iteration
    raise AssertionError("unreachable")


def run_leave_one_domain_out(
    train_envs: list[EnvironmentDataset],
    test_env: EnvironmentDataset | None,
    spec: ObjectiveSpec,
    cfg: TrainConfig,
) -> RunRecord:
    """Retrain once per held-out training domain, then select on fold means.

    Fold k trains without domain k and scores every checkpoint on the held-out
    domain; the full run on all training domains supplies the deployable
    parameters, selected at the iteration with the best fold-mean accuracy.
    """
    if len(train_envs) < 2:
        raise ValueError("leave-one-domain-out needs at least two training domains")
    fold_scores: dict[int, list[float]] = {}
    for held_out in range(len(train_envs)):
        fold_train = [ds for i, ds in enumerate(train_envs) if i != held_out]
        fold_record = run_training(fold_train, train_envs[held_out], spec, cfg)
        for ev in fold_record.evals:
            fold_scores.setdefault(ev.iteration, []).append(ev.test_acc)
    full = run_training(train_envs, test_env, spec, cfg)
    full.fold_val_accs = {
        it: accs for it, accs in fold_scores.items() if it in full.checkpoints
    }
    full.selected_checkpoint = select_model(full, LEAVE_ONE_DOMAIN_OUT)
    return full
