"""Stochastic encoder and the twin predictor heads.

The model has three trainable parts held in one :class:`ParameterSet`:

* ``encoder`` -- an MLP producing a Gaussian code (mean head plus a
  softplus-floored standard-deviation head),
* ``invariant_predictor`` -- class logits from the code alone,
* ``domain_predictor`` -- either class logits from (code, domain one-hot),
  or a domain-membership discriminator on the code for the
  marginal-invariance baseline.

Codes use a diagonal covariance so the bottleneck penalty has a closed form;
sampling goes through the usual reparameterization z = mu + sigma * eps so
gradients reach both heads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

SIGMA_FLOOR = 1e-6
CHECKPOINT_MAGIC = b"IIBP"
CHECKPOINT_VERSION = 1

CLASS_CONDITIONAL = "class_conditional"
DOMAIN_DISCRIMINATOR = "domain_discriminator"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    n_classes: int
    n_domains: int
    latent_dim: int = 16
    encoder_hidden: int = 64
    predictor_hidden: int = 64
    predictor_depth: int = 1
    domain_head: str = CLASS_CONDITIONAL

    def __post_init__(self):
        for field_name in ("input_dim", "n_classes", "n_domains", "latent_dim",
                           "encoder_hidden", "predictor_hidden"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be >= 1")
        if self.predictor_depth not in (1, 3):
            raise ValueError("predictor_depth must be 1 (linear) or 3 (two rectifier layers)")
        if self.domain_head not in (CLASS_CONDITIONAL, DOMAIN_DISCRIMINATOR):
            raise ValueError(f"unknown domain_head {self.domain_head!r}")


@dataclass
class GaussianCode:
    """Batched latent code: mean and strictly positive std, shape (n, K)."""

    mu: ad.Node
    sigma: ad.Node

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ad.ShapeError(f"code mean {self.mu.shape} and std {self.sigma.shape} differ")
        if np.any(self.sigma.value <= 0.0):
            raise ValueError("code std must be strictly positive")

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[1]


def _he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(size=shape) * np.sqrt(2.0 / fan_in)


def _predictor_shapes(cfg: ModelConfig, in_dim: int, out_dim: int) -> list[tuple[int, int]]:
    if cfg.predictor_depth == 1:
        return [(in_dim, out_dim)]
    h = cfg.predictor_hidden
    return [(in_dim, h), (h, h), (h, out_dim)]


def init_params(cfg: ModelConfig, seed) -> ad.ParameterSet:
    """He-initialized weights, zero biases, reproducible from the seed.

    ``seed`` is anything ``numpy.random.default_rng`` accepts.
    """
    rng = np.random.default_rng(seed)
    enc = {
        "enc.w1": ad.parameter(_he(rng, cfg.input_dim, (cfg.input_dim, cfg.encoder_hidden)), "enc.w1"),
        "enc.b1": ad.parameter(np.zeros(cfg.encoder_hidden), "enc.b1"),
        "enc.w_mu": ad.parameter(_he(rng, cfg.encoder_hidden, (cfg.encoder_hidden, cfg.latent_dim)), "enc.w_mu"),
        "enc.b_mu": ad.parameter(np.zeros(cfg.latent_dim), "enc.b_mu"),
        "enc.w_sigma": ad.parameter(_he(rng, cfg.encoder_hidden, (cfg.encoder_hidden, cfg.latent_dim)), "enc.w_sigma"),
        "enc.b_sigma": ad.parameter(np.zeros(cfg.latent_dim), "enc.b_sigma"),
    }

    fi = {}
    for layer, (d_in, d_out) in enumerate(_predictor_shapes(cfg, cfg.latent_dim, cfg.n_classes), 1):
        fi[f"fi.w{layer}"] = ad.parameter(_he(rng, d_in, (d_in, d_out)), f"fi.w{layer}")
        fi[f"fi.b{layer}"] = ad.parameter(np.zeros(d_out), f"fi.b{layer}")

    fd = {}
    if cfg.domain_head == CLASS_CONDITIONAL:
        shapes = _predictor_shapes(cfg, cfg.latent_dim, cfg.n_classes)
        first_out = shapes[0][1]
        fd["fd.w1_z"] = ad.parameter(_he(rng, cfg.latent_dim, (cfg.latent_dim, first_out)), "fd.w1_z")
        fd["fd.w1_d"] = ad.parameter(_he(rng, cfg.n_domains, (cfg.n_domains, first_out)), "fd.w1_d")
        fd["fd.b1"] = ad.parameter(np.zeros(first_out), "fd.b1")
        for layer, (d_in, d_out) in enumerate(shapes[1:], 2):
            fd[f"fd.w{layer}"] = ad.parameter(_he(rng, d_in, (d_in, d_out)), f"fd.w{layer}")
            fd[f"fd.b{layer}"] = ad.parameter(np.zeros(d_out), f"fd.b{layer}")
    else:
        for layer, (d_in, d_out) in enumerate(_predictor_shapes(cfg, cfg.latent_dim, cfg.n_domains), 1):
            fd[f"fd.w{layer}"] = ad.parameter(_he(rng, d_in, (d_in, d_out)), f"fd.w{layer}")
            fd[f"fd.b{layer}"] = ad.parameter(np.zeros(d_out), f"fd.b{layer}")

    return ad.ParameterSet(
        {"encoder": enc, "invariant_predictor": fi, "domain_predictor": fd}
    )


def encode(x, params: ad.ParameterSet, cfg: ModelConfig) -> GaussianCode:
    """Gaussian code for a batch: mu from the mean head, sigma softplus-floored."""
    x_node = x if isinstance(x, ad.Node) else ad.constant(np.atleast_2d(x), name="input")
    if x_node.shape[1] != cfg.input_dim:
        raise ad.ShapeError(f"input width {x_node.shape[1]} does not match input_dim {cfg.input_dim}")
    enc = params.group("encoder")
    h = ad.relu(ad.affine(x_node, enc["enc.w1"], enc["enc.b1"]))
    mu = ad.affine(h, enc["enc.w_mu"], enc["enc.b_mu"])
    sigma = ad.add_scalar(ad.softplus(ad.affine(h, enc["enc.w_sigma"], enc["enc.b_sigma"])), SIGMA_FLOOR)
    return GaussianCode(mu=mu, sigma=sigma)


def sample_code(code: GaussianCode, eps: np.ndarray) -> ad.Node:
    """Reparameterized draw z = mu + sigma * eps; gradients flow to both heads."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != code.mu.shape:
        raise ad.ShapeError(f"noise {eps.shape} does not match code {code.mu.shape}")
    return ad.add(code.mu, ad.mul(code.sigma, ad.constant(eps, name="code_noise")))


def _mlp(z: ad.Node, weights: list[tuple[ad.Node, ad.Node]]) -> ad.Node:
    out = z
    for i, (w, b) in enumerate(weights):
        out = ad.affine(out, w, b)
        if i < len(weights) - 1:
            out = ad.relu(out)
    return out


def predict_invariant(z: ad.Node, params: ad.ParameterSet, cfg: ModelConfig) -> ad.Node:
    """Class logits from the code alone; never sees the domain index."""
    fi = params.group("invariant_predictor")
    n_layers = cfg.predictor_depth
    weights = [(fi[f"fi.w{k}"], fi[f"fi.b{k}"]) for k in range(1, n_layers + 1)]
    return _mlp(z, weights)


def predict_domain(z: ad.Node, domains: np.ndarray, params: ad.ParameterSet, cfg: ModelConfig) -> ad.Node:
    """Class logits from (code, one-hot domain index).

    The first layer applies block weights to the concatenated input, i.e.
    z @ W_z + onehot(d) @ W_d + b, which is the concat layout without
    materializing the concatenation.
    """
    if cfg.domain_head != CLASS_CONDITIONAL:
        raise ValueError("parameters were built with a domain-discriminator head")
    domains = np.asarray(domains)
    if domains.min() < 0 or domains.max() >= cfg.n_domains:
        raise ValueError(f"domain index outside [0, {cfg.n_domains})")
    fd = params.group("domain_predictor")
    onehot = ad.constant(np.eye(cfg.n_domains)[domains], name="domain_onehot")
    first_out = fd["fd.b1"].shape[0]
    h = ad.add(
        ad.affine(z, fd["fd.w1_z"], fd["fd.b1"]),
        ad.affine(onehot, fd["fd.w1_d"], ad.constant(np.zeros(first_out))),
    )
    if cfg.predictor_depth == 1:
        return h
    h = ad.relu(h)
    h = ad.relu(ad.affine(h, fd["fd.w2"], fd["fd.b2"]))
    return ad.affine(h, fd["fd.w3"], fd["fd.b3"])


def predict_domain_membership(z: ad.Node, params: ad.ParameterSet, cfg: ModelConfig) -> ad.Node:
    """Domain logits from the code (the adversary of the marginal-invariance baseline)."""
    if cfg.domain_head != DOMAIN_DISCRIMINATOR:
        raise ValueError("parameters were built with a class-conditional domain head")
    fd = params.group("domain_predictor")
    n_layers = cfg.predictor_depth
    weights = [(fd[f"fd.w{k}"], fd[f"fd.b{k}"]) for k in range(1, n_layers + 1)]
    return _mlp(z, weights)


def reads_domain_onehot(root: ad.Node) -> bool:
    """Graph introspection: does any leaf under ``root`` carry the domain one-hot?"""
    stack, seen = [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.name == "domain_onehot":
            return True
        stack.extend(node.parents)
    return False


# ---------------------------------------------------------------------------
# flat binary checkpoints


def save_checkpoint(params: ad.ParameterSet, path) -> None:
    entries = list(params.items())
    blob = [struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(entries))]
    for group, name, node in entries:
        g = group.encode()
        n = name.encode()
        dims = node.value.shape
        blob.append(struct.pack(f"<H{len(g)}sH{len(n)}sB", len(g), g, len(n), n, len(dims)))
        blob.append(struct.pack(f"<{len(dims)}I", *dims))
    for _, _, node in entries:
        blob.append(node.value.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_checkpoint(path) -> dict[str, tuple[str, np.ndarray]]:
    """Read a checkpoint as {name: (group, array)}."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, count = struct.unpack_from("<4sHI", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = struct.calcsize("<4sHI")
    directory = []
    for _ in range(count):
        (g_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        group = raw[off : off + g_len].decode()
        off += g_len
        (n_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + n_len].decode()
        off += n_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        directory.append((group, name, dims))
    out = {}
    for group, name, dims in directory:
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(dims).copy()
        off += 8 * size
        out[name] = (group, arr)
    return out


def load_checkpoint_into(params: ad.ParameterSet, path) -> None:
    loaded = load_checkpoint(path)
    for _, name, node in params.items():
        group, arr = loaded[name]
        if arr.shape != node.value.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {node.value.shape}")
        node.value[...] = arr
