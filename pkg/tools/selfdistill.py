"""Desk-scale multi-crop self-distillation with an EMA teacher.

A two-layer tanh encoder maps 16x16 grey views to d logits. The teacher sees
the whole-entity (global) views, centres its logits and sharpens them with a
low temperature; the student sees the local crops and is trained by plain
gradient descent to match every teacher row. The teacher follows the student
by an exponential moving average of the parameters.
"""

import dataclasses
import logging
import math
import pathlib

import numpy as np
import scipy.ndimage
import scipy.special
import scipy.stats
import skimage.transform

from cohort_io import write_json
from helpers import GlomstatError
from helpers import ValidationError

logger = logging.getLogger(__name__)

# Mean per-dimension teacher std below which the outputs count as collapsed.
COLLAPSE_STD = 0.01


class EntityTooSmall(ValidationError):
    pass


class NonFiniteLoss(GlomstatError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, state, dump_path=None):
        where = f"; state written to {dump_path}" if dump_path else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.state = state
        self.dump_path = dump_path


@dataclasses.dataclass(frozen=True)
class ViewConfig:
    n_global: int = 2
    n_local: int = 6
    s_min: float = 0.4
    s_max: float = 1.0
    global_size: int = 16
    local_size: int = 16
    flips: bool = True
    jitter: bool = True
    blur: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    blur_sigma: tuple = (0.1, 1.0)
    blur_probability: float = 0.5

    def __post_init__(self):
        if not 0 < self.s_min <= self.s_max <= 1:
            raise ValidationError(f"need 0 < s_min <= s_max <= 1, got {self.s_min}, {self.s_max}")
        if self.n_global < 1 or self.n_local < 1:
            raise ValidationError("at least one global and one local view are needed")

    @property
    def augmenting(self) -> bool:
        return self.flips or self.jitter or self.blur


@dataclasses.dataclass(frozen=True)
class EncoderShape:
    side: int = 16
    hidden: int = 32
    output: int = 8

    @property
    def inputs(self) -> int:
        return self.side * self.side

    @property
    def size(self) -> int:
        return self.hidden * self.inputs + self.hidden + self.output * self.hidden + self.output

    def unpack(self, theta: np.ndarray) -> tuple:
        """Split a flat parameter vector into (W1, b1, W2, b2)."""
        p, h, d = self.inputs, self.hidden, self.output
        w1_end = h * p
        b1_end = w1_end + h
        w2_end = b1_end + d * h
        return (
            theta[:w1_end].reshape(h, p),
            theta[w1_end:b1_end],
            theta[b1_end:w2_end].reshape(d, h),
            theta[w2_end:],
        )


@dataclasses.dataclass(frozen=True)
class DistillConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 0.002
    tau_s: float = 0.1
    tau_t: float = 0.04
    momentum: float = 0.996
    center_momentum: float = 0.9
    centering: bool = True
    init_spread: float = 0.007
    views: ViewConfig = ViewConfig()
    shape: EncoderShape = EncoderShape()
    log_every: int = 50
    dump_path: str | None = None

    def __post_init__(self):
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ValidationError("temperatures must be positive")
        if self.lr <= 0:
            raise ValidationError(f"step size must be positive, got {self.lr}")
        if self.init_spread < 0:
            raise ValidationError(f"initial logit spread must be non-negative, got {self.init_spread}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"EMA momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.center_momentum < 1:
            raise ValidationError(f"centre momentum must be in [0, 1), got {self.center_momentum}")
        if self.views.global_size != self.shape.side or self.views.local_size != self.shape.side:
            raise ValidationError(f"views must be resized to the encoder input side {self.shape.side}")


@dataclasses.dataclass(frozen=True)
class DistillState:
    theta_s: np.ndarray
    theta_t: np.ndarray
    center: np.ndarray
    tau_s: float = 0.1
    tau_t: float = 0.04
    momentum: float = 0.996
    step: int = 0

    def __post_init__(self):
        if self.theta_s.shape != self.theta_t.shape:
            raise ValidationError("student and teacher parameters differ in size")


@dataclasses.dataclass(frozen=True)
class LossBatch:
    """Teacher rows g (m x d) and student rows l (n x d), each on the simplex.

    Teacher rows may hold zeros; student rows must be strictly positive.
    """

    teacher: np.ndarray
    student: np.ndarray

    def __post_init__(self):
        for name in ("teacher", "student"):
            rows = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            floor_ok = np.all(rows > 0) if name == "student" else np.all(rows >= 0)
            if not floor_ok or not np.allclose(rows.sum(axis=1), 1.0, rtol=0, atol=1e-9):
                raise ValidationError(f"{name} rows must be valid distributions")
            object.__setattr__(self, name, rows)


@dataclasses.dataclass(frozen=True)
class ViewBatch:
    """Flattened views of B entities: student (B, n, p) locals, teacher (B, m, p) globals."""

    student: np.ndarray
    teacher: np.ndarray


@dataclasses.dataclass(frozen=True)
class LogEntry:
    step: int
    loss: float
    embedding_std: float
    teacher_entropy: float


def sample_crop_box(height: int, width: int, s_min: float, s_max: float, rng) -> tuple:
    """Draw a crop covering a U(s_min, s_max) share of the entity; returns (top, left, h, w, s)."""
    s = float(rng.uniform(s_min, s_max))
    h = min(height, math.ceil(math.sqrt(s) * height))
    w = min(width, math.ceil(math.sqrt(s) * width))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w, s


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    return skimage.transform.resize(image, (size, size), order=1, mode="edge", anti_aliasing=False, preserve_range=True)


def augment(image: np.ndarray, cfg: ViewConfig, rng) -> np.ndarray:
    """Random flips, brightness/contrast jitter and Gaussian blur, each when enabled."""
    if cfg.flips:
        if rng.random() < 0.5:
            image = image[:, ::-1]
        if rng.random() < 0.5:
            image = image[::-1, :]
    if cfg.jitter:
        contrast = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        brightness = rng.uniform(-cfg.brightness, cfg.brightness)
        mean = image.mean()
        image = (image - mean) * contrast + mean + brightness
    if cfg.blur and rng.random() < cfg.blur_probability:
        image = scipy.ndimage.gaussian_filter(image, rng.uniform(*cfg.blur_sigma))
    return np.ascontiguousarray(image)


def make_views(entity, cfg: ViewConfig, rng) -> tuple:
    """Global views of the whole entity and local crops, both augmented and resized."""
    entity = np.asarray(entity, dtype=float)
    height, width = entity.shape
    if height < cfg.local_size or width < cfg.local_size:
        raise EntityTooSmall(f"entity {height}x{width} is smaller than the {cfg.local_size}px local view")
    whole = _resize(entity, cfg.global_size)
    globals_ = [augment(whole, cfg, rng) for _ in range(cfg.n_global)]
    locals_ = []
    for _ in range(cfg.n_local):
        top, left, h, w, _ = sample_crop_box(height, width, cfg.s_min, cfg.s_max, rng)
        crop = _resize(entity[top : top + h, left : left + w], cfg.local_size)
        locals_.append(augment(crop, cfg, rng))
    return globals_, locals_


def init_params(shape: EncoderShape, rng) -> np.ndarray:
    w1 = rng.normal(0.0, 1.0 / math.sqrt(shape.inputs), size=(shape.hidden, shape.inputs))
    w2 = rng.normal(0.0, 1.0 / math.sqrt(shape.hidden), size=(shape.output, shape.hidden))
    return np.concatenate([w1.ravel(), np.zeros(shape.hidden), w2.ravel(), np.zeros(shape.output)])


def encode(theta: np.ndarray, inputs: np.ndarray, shape: EncoderShape) -> tuple:
    """Logits (N, d) and hidden activations (N, h) for flattened inputs (N, p)."""
    w1, b1, w2, b2 = shape.unpack(theta)
    hidden = np.tanh(inputs @ w1.T + b1)
    return hidden @ w2.T + b2, hidden


def forward(theta: np.ndarray, image, temp: float, center=None, shape: EncoderShape = EncoderShape()) -> np.ndarray:
    """Output distribution softmax((z - c) / temp) of one image."""
    logits, _ = encode(theta, np.asarray(image, dtype=float).reshape(1, -1), shape)
    if center is not None:
        logits = logits - center
    return scipy.special.softmax(logits[0] / temp)


def multicrop_loss(batch: LossBatch) -> float:
    """(1 / 2n) * sum over student rows i and teacher rows j of -g_j . log l_i."""
    n = batch.student.shape[0]
    cross = -batch.teacher @ np.log(batch.student).T
    return float(cross.sum() / (2 * n))


def _loss_and_gradient(state: DistillState, batch: ViewBatch, shape: EncoderShape) -> tuple:
    n_entities, n_local, p = batch.student.shape
    n_global = batch.teacher.shape[1]
    teacher_logits, _ = encode(state.theta_t, batch.teacher.reshape(-1, p), shape)
    g = scipy.special.softmax((teacher_logits - state.center) / state.tau_t, axis=1)
    g = g.reshape(n_entities, n_global, -1)
    student_logits, hidden = encode(state.theta_s, batch.student.reshape(-1, p), shape)
    log_l = scipy.special.log_softmax(student_logits / state.tau_s, axis=1).reshape(n_entities, n_local, -1)
    target = g.sum(axis=1)
    loss = float(-np.einsum("bd,bid->", target, log_l) / (2 * n_local) / n_entities)
    l = np.exp(log_l)
    dz = (n_global * l - target[:, None, :]) / (2 * n_local * state.tau_s) / n_entities
    dz = dz.reshape(n_entities * n_local, -1)
    _, _, w2, _ = shape.unpack(state.theta_s)
    dh = (dz @ w2) * (1 - hidden**2)
    grad = np.concatenate(
        [
            (dh.T @ batch.student.reshape(-1, p)).ravel(),
            dh.sum(axis=0),
            (dz.T @ hidden).ravel(),
            dz.sum(axis=0),
        ]
    )
    return loss, grad, teacher_logits


def batch_loss(state: DistillState, batch: ViewBatch, shape: EncoderShape = EncoderShape()) -> float:
    """Multi-crop loss averaged over the entities of a batch."""
    return _loss_and_gradient(state, batch, shape)[0]


def loss_gradient(state: DistillState, batch: ViewBatch, shape: EncoderShape = EncoderShape()) -> np.ndarray:
    """Exact gradient of batch_loss with respect to the student parameters; the teacher is constant."""
    return _loss_and_gradient(state, batch, shape)[1]


def ema_update(state: DistillState) -> DistillState:
    theta_t = state.momentum * state.theta_t + (1 - state.momentum) * state.theta_s
    return dataclasses.replace(state, theta_t=theta_t)


def center_update(center: np.ndarray, teacher_logits: np.ndarray, rho: float) -> np.ndarray:
    if not 0 <= rho < 1:
        raise ValidationError(f"centre momentum must be in [0, 1), got {rho}")
    return rho * center + (1 - rho) * np.atleast_2d(teacher_logits).mean(axis=0)


def collapse_metric(embeddings) -> tuple:
    """Per-dimension sample std of the rows and their mean Shannon entropy (nats)."""
    embeddings = np.asarray(embeddings, dtype=float)
    if embeddings.shape[0] < 2:
        raise ValidationError("collapse metric needs at least two rows")
    std = np.std(embeddings, axis=0, ddof=1)
    entropy = float(np.mean(scipy.stats.entropy(embeddings, axis=1)))
    return std, entropy


def _entity_inputs(entities, shape: EncoderShape) -> np.ndarray:
    return np.stack([_resize(entity, shape.side).ravel() for entity in entities])


def logit_spread(theta: np.ndarray, inputs: np.ndarray, shape: EncoderShape) -> float:
    """Mean over dimensions of the across-entity std of row-centred logits."""
    logits, _ = encode(theta, inputs, shape)
    logits = logits - logits.mean(axis=1, keepdims=True)
    return float(np.mean(np.std(logits, axis=0, ddof=1)))


def initial_state(cfg: DistillConfig, rng, entities=None) -> DistillState:
    """Shared student/teacher start with a zero centre.

    Given the entities, the output layer is rescaled so the initial logit
    spread over them equals `cfg.init_spread`; the teacher then starts close
    to uniform and any later spread has to be earned by training.
    """
    theta = init_params(cfg.shape, rng)
    if entities is not None and cfg.init_spread > 0:
        spread = logit_spread(theta, _entity_inputs(entities, cfg.shape), cfg.shape)
        if math.isfinite(spread) and spread > 0:
            _, _, w2, _ = cfg.shape.unpack(theta)
            w2 *= cfg.init_spread / spread
        else:
            logger.debug("initial logit spread is %s; output layer left unscaled", spread)
    return DistillState(
        theta_s=theta,
        theta_t=theta.copy(),
        center=np.zeros(cfg.shape.output),
        tau_s=cfg.tau_s,
        tau_t=cfg.tau_t,
        momentum=cfg.momentum,
    )


def teacher_outputs(state: DistillState, entities: np.ndarray, shape: EncoderShape) -> np.ndarray:
    """Teacher distributions of the unaugmented, resized entities."""
    logits, _ = encode(state.theta_t, _entity_inputs(entities, shape), shape)
    return scipy.special.softmax((logits - state.center) / state.tau_t, axis=1)


def state_summary(state: DistillState) -> dict:
    return {
        "step": state.step,
        "tau_s": state.tau_s,
        "tau_t": state.tau_t,
        "momentum": state.momentum,
        "center": state.center,
        "theta_s": state.theta_s,
        "theta_t": state.theta_t,
    }


def _view_batch(entities, indices, cfg: DistillConfig, rng) -> ViewBatch:
    students, teachers = [], []
    for index in indices:
        globals_, locals_ = make_views(entities[index], cfg.views, rng)
        teachers.append(np.stack([view.ravel() for view in globals_]))
        students.append(np.stack([view.ravel() for view in locals_]))
    return ViewBatch(student=np.stack(students), teacher=np.stack(teachers))


def train(entities, cfg: DistillConfig = DistillConfig(), master_seed: int = 0) -> tuple:
    """Run the distillation loop; returns (log entries, final state).

    Each step draws a batch of entities, builds their views, takes one
    gradient step on the student, moves the teacher by EMA and, when
    centering is enabled, moves the centre towards the teacher batch mean.
    """
    entities = np.asarray(entities, dtype=float)
    if entities.ndim != 3 or entities.shape[0] < 2:
        raise ValidationError(f"expected a stack of at least two 2-D entity images, got shape {entities.shape}")
    rng = np.random.default_rng(master_seed)
    state = initial_state(cfg, rng, entities)
    log = []
    for step in range(1, cfg.steps + 1):
        indices = rng.choice(entities.shape[0], size=min(cfg.batch_size, entities.shape[0]), replace=False)
        batch = _view_batch(entities, indices, cfg, rng)
        loss, grad, teacher_logits = _loss_and_gradient(state, batch, cfg.shape)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            dump = None
            if cfg.dump_path:
                dump = pathlib.Path(cfg.dump_path)
                write_json(dump, {**state_summary(state), "loss": loss})
            raise NonFiniteLoss(step, state, dump)
        state = dataclasses.replace(state, theta_s=state.theta_s - cfg.lr * grad, step=step)
        state = ema_update(state)
        if cfg.centering:
            state = dataclasses.replace(state, center=center_update(state.center, teacher_logits, cfg.center_momentum))
        std, entropy = collapse_metric(teacher_outputs(state, entities, cfg.shape))
        log.append(LogEntry(step, loss, float(np.mean(std)), entropy))
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d: loss %.4f, embedding std %.4f, teacher entropy %.4f", step, loss, log[-1].embedding_std, entropy)
    return log, state
