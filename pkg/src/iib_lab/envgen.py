"""Procedural multi-environment dataset generators.

Each generator is a pure function of its spec and a seed: calling it twice
with the same arguments yields byte-identical datasets. The constructions
cover the classic out-of-distribution failure mechanisms at desk scale:

* ``gen_linear_scm`` -- a linear structural causal model whose spurious
  feature means vary by environment. When the training means span a proper
  subspace, the orthogonal directions behave as pseudo-invariant features.
* ``gen_geoskew`` -- a majority/minority construction where a scalar
  spurious coordinate offers a low-norm shortcut to a max-margin learner.
* ``gen_color_shortcut`` -- a ten-class task with a one-hot "color" block
  that matches the label with per-environment probability ``p_e`` (a
  CS-CMNIST style construction on Gaussian class prototypes).
* ``gen_cross_lines`` / ``gen_vertical_line`` -- small synthetic images with
  line overlays; class content is a fixed procedural texture so the
  invariant mechanism is identical in every environment.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"IIBD"
DATASET_VERSION = 1

# geoskew invariant margins: sample j in a group gets margin
# MARGIN_FLOOR + MARGIN_SPAN / sqrt(j + 1), so the minimum margin shrinks as
# the group grows and the larger group pins the harder constraint.
MARGIN_FLOOR = 0.1
MARGIN_SPAN = 1.0

# image texture constants shared by the cross-lines and vertical-line tasks
TEXTURE_AMPLITUDE = 0.22
TEXTURE_NOISE = 0.35
N_IMAGE_CLASSES = 10


class GeneratorError(ValueError):
    """Invalid generator spec or arguments."""


# ---------------------------------------------------------------------------
# dataset container + binary serialization


@dataclass
class EnvironmentDataset:
    """Labeled samples tagged with a domain index.

    ``group`` is 1 for majority-group samples and 0 for minority-group ones
    (all 1 when the construction has no group structure). ``spurious`` holds
    the per-sample spurious ground truth (not serialized).
    """

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    domain_index: int
    group: np.ndarray = field(default=None)  # type: ignore[assignment]
    spurious: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise GeneratorError(
                f"inputs {self.inputs.shape} inconsistent with labels {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise GeneratorError(f"labels outside [0, {self.n_classes})")
        if self.group is None:
            self.group = np.ones(len(self.labels), dtype=np.uint8)
        else:
            self.group = np.asarray(self.group, dtype=np.uint8)
        if self.group.shape != self.labels.shape:
            raise GeneratorError("group tags must align with labels")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def signed_labels(self) -> np.ndarray:
        """Binary labels mapped to +-1 (class 1 -> +1)."""
        if self.n_classes != 2:
            raise GeneratorError("signed labels only defined for binary tasks")
        return 2 * self.labels - 1

    def subset(self, idx: np.ndarray) -> "EnvironmentDataset":
        return EnvironmentDataset(
            inputs=self.inputs[idx],
            labels=self.labels[idx],
            n_classes=self.n_classes,
            domain_index=self.domain_index,
            group=self.group[idx],
            spurious=None if self.spurious is None else self.spurious[idx],
        )


def save_dataset(ds: EnvironmentDataset, path) -> None:
    """Write the flat binary container: IIBD header, f64 features, u16 labels, u8 tags."""
    header = struct.pack(
        "<4sHIIHH",
        DATASET_MAGIC,
        DATASET_VERSION,
        len(ds),
        ds.n_features,
        ds.n_classes,
        ds.domain_index,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.inputs.astype("<f8").tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())
        fh.write(ds.group.astype("u1").tobytes())


def load_dataset(path) -> EnvironmentDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize("<4sHIIHH")
    magic, version, n, d, n_classes, domain = struct.unpack("<4sHIIHH", raw[:head])
    if magic != DATASET_MAGIC:
        raise GeneratorError(f"not a dataset file (magic {magic!r})")
    if version != DATASET_VERSION:
        raise GeneratorError(f"unsupported dataset version {version}")
    off = head
    inputs = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    off += 8 * n * d
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    group = np.frombuffer(raw, dtype="u1", count=n, offset=off)
    return EnvironmentDataset(
        inputs=inputs.copy(), labels=labels, n_classes=n_classes, domain_index=domain, group=group.copy()
    )


# ---------------------------------------------------------------------------
# linear SCM with per-environment spurious means


@dataclass(frozen=True)
class ScmSpec:
    d_causal: int
    d_spurious: int
    causal_mean_scale: float
    causal_noise: float
    env_spurious_means: tuple[tuple[float, ...], ...]
    label_prior: float = 0.5

    def __post_init__(self):
        if self.d_causal < 1 or self.d_spurious < 1:
            raise GeneratorError("d_causal and d_spurious must be >= 1")
        for mu in self.env_spurious_means:
            if len(mu) != self.d_spurious:
                raise GeneratorError(
                    f"spurious mean {mu} has length {len(mu)}, expected {self.d_spurious}"
                )
        if not (0.0 < self.label_prior < 1.0):
            raise GeneratorError("label_prior must lie in (0, 1)")

    @property
    def n_envs(self) -> int:
        return len(self.env_spurious_means)


def gen_linear_scm(
    spec: ScmSpec, n_per_env: int, envs: list[int], seed: int
) -> list[EnvironmentDataset]:
    """Sample one dataset per requested environment index.

    Per sample: a +-1 label y with P(y=+1) = label_prior; causal block
    z_c = y * mu_c * 1 + N(0, sigma_c^2 I) whose law never depends on the
    environment; spurious block z_s = y * mu_e + N(0, I). Inputs are
    concat(z_c, z_s) and the spurious block is recorded as ground truth.
    """
    if n_per_env < 1:
        raise GeneratorError("n_per_env must be >= 1")
    out = []
    for env in envs:
        if not (0 <= env < spec.n_envs):
            raise GeneratorError(f"environment index {env} outside spec with {spec.n_envs} envs")
        rng = np.random.default_rng([seed, env])
        y = np.where(rng.random(n_per_env) < spec.label_prior, 1.0, -1.0)
        z_c = y[:, None] * spec.causal_mean_scale + spec.causal_noise * rng.normal(
            size=(n_per_env, spec.d_causal)
        )
        mu_e = np.asarray(spec.env_spurious_means[env], dtype=np.float64)
        z_s = y[:, None] * mu_e + rng.normal(size=(n_per_env, spec.d_spurious))
        out.append(
            EnvironmentDataset(
                inputs=np.concatenate([z_c, z_s], axis=1),
                labels=((y + 1) // 2).astype(np.int64),
                n_classes=2,
                domain_index=env,
                spurious=z_s,
            )
        )
    return out


# ---------------------------------------------------------------------------
# geometric skew


@dataclass(frozen=True)
class SkewSpec:
    n_majority: int
    n_minority: int
    spurious_margin: float
    invariant_dim: int

    def __post_init__(self):
        if not (self.n_majority > self.n_minority >= 1):
            raise GeneratorError("need n_majority > n_minority >= 1")
        if self.spurious_margin < 0:
            raise GeneratorError("spurious_margin must be >= 0")
        if self.invariant_dim < 1:
            raise GeneratorError("invariant_dim must be >= 1")


def canonical_skew_spec() -> SkewSpec:
    """The 95/5 imbalanced instance used throughout the verification suite."""
    return SkewSpec(n_majority=950, n_minority=50, spurious_margin=1.0, invariant_dim=5)


def _group_margins(n: int) -> np.ndarray:
    return MARGIN_FLOOR + MARGIN_SPAN / np.sqrt(np.arange(1, n + 1, dtype=np.float64))


def gen_geoskew(spec: SkewSpec, seed: int, domain_index: int = 0) -> EnvironmentDataset:
    """Majority/minority dataset with a scalar spurious shortcut coordinate.

    Labels are +-1. The invariant block places each sample at signed margin
    m_j along a random unit direction (plus noise orthogonal to it), with
    m_j shrinking as its group grows; every sample is therefore separable
    from the invariant block alone, but the smallest margin over all samples
    is set by the majority group. The last input column is the spurious
    coordinate +margin*y on the majority group and -margin*y on the
    minority, so P[z_sp * y > 0] = n_maj / (n_maj + n_min).
    """
    rng = np.random.default_rng([seed, domain_index])
    n = spec.n_majority + spec.n_minority
    u = rng.normal(size=spec.invariant_dim)
    u /= np.linalg.norm(u)

    margins = np.concatenate(
        [_group_margins(spec.n_majority), _group_margins(spec.n_minority)]
    )
    group = np.concatenate(
        [np.ones(spec.n_majority, dtype=np.uint8), np.zeros(spec.n_minority, dtype=np.uint8)]
    )
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)

    noise = rng.normal(size=(n, spec.invariant_dim)) * 0.1
    noise -= np.outer(noise @ u, u)  # keep noise orthogonal to the margin direction
    x_inv = (y * margins)[:, None] * u + noise
    sign = np.where(group == 1, 1.0, -1.0)
    z_sp = spec.spurious_margin * sign * y

    perm = rng.permutation(n)
    return EnvironmentDataset(
        inputs=np.concatenate([x_inv, z_sp[:, None]], axis=1)[perm],
        labels=((y + 1) // 2).astype(np.int64)[perm],
        n_classes=2,
        domain_index=domain_index,
        group=group[perm],
        spurious=z_sp[perm],
    )


# ---------------------------------------------------------------------------
# color shortcut (CS-CMNIST style)


def gen_color_shortcut(
    p_envs: list[float],
    n_per_env: int,
    seed: int,
    d_content: int = 20,
    content_noise: float = 1.1,
    n_classes: int = 10,
) -> list[EnvironmentDataset]:
    """Ten-class task with an exact one-hot color block as the shortcut.

    The content block draws from fixed unit-norm Gaussian class prototypes
    (identical in every environment) plus isotropic noise; the color block is
    a one-hot vector whose hot index equals the class with probability p_e
    and is uniform over all indices otherwise. The color index is recorded as
    spurious ground truth and samples whose color matches their class are
    tagged as the majority group.
    """
    for p in p_envs:
        if not (0.0 <= p <= 1.0):
            raise GeneratorError(f"p_e must lie in [0, 1], got {p}")
    proto_rng = np.random.default_rng([seed, 0x9E3779B9])
    prototypes = proto_rng.normal(size=(n_classes, d_content))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    out = []
    for env, p in enumerate(p_envs):
        rng = np.random.default_rng([seed, env])
        y = rng.integers(0, n_classes, size=n_per_env)
        content = prototypes[y] + content_noise * rng.normal(size=(n_per_env, d_content))
        random_color = rng.integers(0, n_classes, size=n_per_env)
        use_own = rng.random(n_per_env) < p
        color = np.where(use_own, y, random_color)
        color_block = np.eye(n_classes)[color]
        out.append(
            EnvironmentDataset(
                inputs=np.concatenate([content, color_block], axis=1),
                labels=y.astype(np.int64),
                n_classes=n_classes,
                domain_index=env,
                group=(color == y).astype(np.uint8),
                spurious=color.astype(np.float64),
            )
        )
    return out


# ---------------------------------------------------------------------------
# image tasks: shared procedural textures


def class_texture(label: int, image_hw: int) -> np.ndarray:
    """Deterministic per-class texture, shape (3, hw, hw), values in [0, 1].

    A fixed oriented sinusoid per class with per-channel phase shifts. No
    randomness enters here, so every environment (and every generator call)
    shares the same invariant class content.
    """
    rows, cols = np.meshgrid(np.arange(image_hw), np.arange(image_hw), indexing="ij")
    theta = np.pi * label / N_IMAGE_CLASSES
    freq = 1.0 + (label % 3)
    phase_base = 2.0 * np.pi * label / N_IMAGE_CLASSES
    img = np.empty((3, image_hw, image_hw))
    for ch in range(3):
        phase = phase_base + 2.0 * np.pi * ch / 3.0
        wave = np.sin(
            2.0 * np.pi * freq * (np.cos(theta) * rows + np.sin(theta) * cols) / image_hw + phase
        )
        img[ch] = 0.5 + TEXTURE_AMPLITUDE * wave
    return img


def _textured_batch(labels: np.ndarray, image_hw: int, rng: np.random.Generator) -> np.ndarray:
    base = np.stack([class_texture(int(k), image_hw) for k in range(N_IMAGE_CLASSES)])
    imgs = base[labels] + TEXTURE_NOISE * rng.normal(size=(len(labels), 3, image_hw, image_hw))
    return np.clip(imgs, 0.0, 1.0)


# ---------------------------------------------------------------------------
# cross lines


@dataclass(frozen=True)
class LineConfig:
    """Signs for the four line slots: vertical on channels 0..2, horizontal on channel 0."""

    index: int
    vertical_signs: tuple[int, int, int]
    horizontal_sign: int

    @property
    def signs(self) -> tuple[int, int, int, int]:
        return (*self.vertical_signs, self.horizontal_sign)


# rows of the shipped table that carry identical sign patterns
DUPLICATE_LINE_ROWS = (0, 3)

_CONFIG_PATH = Path(__file__).parent / "data" / "cross_line_configs.txt"


def load_line_configs(path=None) -> list[LineConfig]:
    """Parse the checked-in configuration table (all eleven rows, 0..10)."""
    path = Path(path) if path is not None else _CONFIG_PATH
    slots: dict[int, dict[tuple[int, str], int]] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        idx_s, channel_s, orientation, sign_s = line.split()
        sign = {"+": 1, "-": -1}[sign_s]
        slots.setdefault(int(idx_s), {})[(int(channel_s), orientation)] = sign
    configs = []
    for idx in sorted(slots):
        entry = slots[idx]
        expected = {(0, "vertical"), (1, "vertical"), (2, "vertical"), (0, "horizontal")}
        if set(entry) != expected:
            raise GeneratorError(f"configuration {idx} does not fill the four line slots")
        configs.append(
            LineConfig(
                index=idx,
                vertical_signs=(entry[(0, "vertical")], entry[(1, "vertical")], entry[(2, "vertical")]),
                horizontal_sign=entry[(0, "horizontal")],
            )
        )
    return configs


def _apply_lines(img: np.ndarray, config: LineConfig) -> None:
    hw = img.shape[-1]
    mid = hw // 2
    for ch, sign in enumerate(config.vertical_signs):
        img[ch, :, mid] = 0.5 + 0.5 * sign
    img[0, mid, :] = 0.5 + 0.5 * config.horizontal_sign


def gen_cross_lines(
    n_per_class: int,
    p_diag: float,
    image_hw: int,
    seed: int,
    n_train_envs: int = 2,
) -> tuple[list[EnvironmentDataset], EnvironmentDataset]:
    """Line-overlay shortcut task; the test environment carries no lines.

    For a class-i image, its own line configuration i is painted with
    probability ``p_diag`` (majority group); otherwise one of the ten other
    table rows is drawn uniformly, so each off-class configuration appears
    with probability (1 - p_diag) / 10 (minority group). ``p_diag = 1/11``
    therefore makes all eleven outcomes equally likely and the overlay
    carries no class information.
    """
    if not (0.0 < p_diag <= 1.0):
        raise GeneratorError(f"p_diag must lie in (0, 1], got {p_diag}")
    if image_hw < 4:
        raise GeneratorError(f"image_hw={image_hw} too small to hold a middle line")
    configs = load_line_configs()
    n_configs = len(configs)  # 11 rows; classes own rows 0..9

    def build_env(domain_index: int, with_lines: bool) -> EnvironmentDataset:
        rng = np.random.default_rng([seed, domain_index])
        labels = np.repeat(np.arange(N_IMAGE_CLASSES), n_per_class)
        rng.shuffle(labels)
        imgs = _textured_batch(labels, image_hw, rng)
        group = np.ones(len(labels), dtype=np.uint8)
        applied = np.full(len(labels), -1, dtype=np.float64)
        if with_lines:
            for i, label in enumerate(labels):
                if rng.random() < p_diag:
                    cfg = configs[label]
                    group[i] = 1
                else:
                    others = [c for c in range(n_configs) if c != label]
                    cfg = configs[others[rng.integers(0, len(others))]]
                    group[i] = 0
                _apply_lines(imgs[i], cfg)
                applied[i] = cfg.index
        return EnvironmentDataset(
            inputs=imgs.reshape(len(labels), -1),
            labels=labels.astype(np.int64),
            n_classes=N_IMAGE_CLASSES,
            domain_index=domain_index,
            group=group,
            spurious=applied,
        )

    train = [build_env(e, with_lines=True) for e in range(n_train_envs)]
    test = build_env(n_train_envs, with_lines=False)
    return train, test


# ---------------------------------------------------------------------------
# vertical line


def gen_vertical_line(
    b_value: float, n: int, image_hw: int, seed: int, domain_index: int = 0
) -> EnvironmentDataset:
    """Brightness-shifted vertical line mixed non-orthogonally into channel 2.

    The last channel is transformed as (pixel + 4 + B*on_line) / 9, which
    keeps every value inside [0, 1] for B in [-4, 4] while entangling the
    environment offset with the invariant texture of that channel.
    """
    if abs(b_value) > 4.0:
        raise GeneratorError(f"line offset B={b_value} outside [-4, 4]")
    if image_hw < 4:
        raise GeneratorError(f"image_hw={image_hw} too small to hold a middle line")
    rng = np.random.default_rng([seed, domain_index])
    labels = rng.integers(0, N_IMAGE_CLASSES, size=n)
    imgs = _textured_batch(labels, image_hw, rng)
    mid = image_hw // 2
    last = imgs[:, 2] + 4.0
    last[:, :, mid] += b_value
    imgs[:, 2] = last / 9.0
    return EnvironmentDataset(
        inputs=imgs.reshape(n, -1),
        labels=labels.astype(np.int64),
        n_classes=N_IMAGE_CLASSES,
        domain_index=domain_index,
        spurious=np.full(n, b_value, dtype=np.float64),
    )
