"""Training: path construction, regression loss, and the optimizer loop.

Each training step draws, per assembly, a noise pose from the reference
distribution and a uniformly random global rotation of the ground-truth
assembly, applies the rotation correction that shortens the connecting path,
and regresses the network's per-piece twist prediction at an intermediate
state onto the constant twist of that path.  The construction is pathwise
equivariant: transforming the inputs by per-piece rotations, piece
permutations, or a global rotation (with the random draws transported the
same way) leaves the regression residual unchanged, so none of those
augmentations are needed.

The loss compares predictions and targets in twist coordinates (rotation
generator and translation rate) with equal weighting by default; the
minimizer is the same as for a residual on tangent matrices, and staying in
coordinates avoids composing non-orthogonal matrices.

The loop is a decoupled-weight-decay adaptive-moment optimizer with global
gradient-norm clipping, an exponential moving average of the weights, an
append-only line-delimited training log, and single-file checkpoints that
restore training bit-exactly (parameters, both moment buffers, the averaged
weights, and the random generator state).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .equinet import EquivariantNet, ModelConfig, TimeEmbedding, read_checkpoint, write_checkpoint
from .lie import (
    AngleNearPi,
    DegenerateCovariance,
    GroupElementN,
    NoiseParams,
    Rotation,
    TwistN,
    eval_path,
    left_multiply,
    make_path_pair,
    quat_to_rot,
    rotation_correction,
    sample_noise,
)

__all__ = [
    "NaNLoss",
    "TrainSample",
    "TrainConfig",
    "sample_time",
    "random_rotation",
    "build_sample",
    "make_sample",
    "batch_loss",
    "Trainer",
    "train",
]


class NaNLoss(RuntimeError):
    """The training loss became non-finite; a diagnostic dump was written."""


@dataclass(frozen=True)
class TrainSample:
    """One regression pair: an interpolated state and its target twists.

    ``g1`` is the corrected endpoint ``r_star . g1_tilde``; ``xi`` holds the
    per-piece twists log(g1_i g0_i^-1) so the connecting path is
    h(tau) = exp(tau xi) g0 with h(0) = g0 and h(1) = g1; ``h_tau`` is that
    path evaluated at the drawn time.
    """

    pieces: tuple
    g0: GroupElementN
    g1_tilde: GroupElementN
    r_star: Rotation
    g1: GroupElementN
    tau: float
    xi: TwistN
    h_tau: GroupElementN


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the training loop."""

    lr: float = 1e-4
    ema_decay: float = 0.99
    batch_size: int = 8
    steps: int = 2000
    omega: float = 1.0
    time_mean: float = 0.0
    time_std: float = 1.0
    seed: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rot_weight: float = 1.0
    trans_weight: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError(
                "lr and batch_size must be positive and steps nonnegative"
            )
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1)")
        if self.omega <= 0 or self.time_std <= 0:
            raise ValueError("omega and time_std must be positive")
        if self.clip_norm <= 0 or self.rot_weight < 0 or self.trans_weight < 0:
            raise ValueError("clip_norm must be positive and weights nonnegative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def sample_time(rng: np.random.Generator, mean: float = 0.0, std: float = 1.0) -> float:
    """Draw a progress value in (0, 1) as the logistic of a normal variate."""
    z = mean + std * rng.standard_normal()
    return 1.0 / (1.0 + math.exp(-z))


def random_rotation(rng: np.random.Generator) -> Rotation:
    """A uniformly distributed rotation (normalized Gaussian quaternion)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return Rotation(quat_to_rot(q))


def build_sample(
    pieces: Sequence[np.ndarray],
    g0: GroupElementN,
    g1_tilde: GroupElementN,
    tau: float,
) -> TrainSample:
    """Deterministic sample construction from explicit draws.

    Applies the rotation correction to the raw endpoint, takes the per-piece
    logarithms, and evaluates the connecting path at ``tau``.  Raises
    DegenerateCovariance or AngleNearPi for the measure-zero bad draws;
    :func:`make_sample` handles those by redrawing.
    """
    r_star = rotation_correction(g0, g1_tilde)
    g1, xi = make_path_pair(g0, g1_tilde)
    h_tau = eval_path(g0, xi, tau)
    return TrainSample(
        pieces=tuple(pieces),
        g0=g0,
        g1_tilde=g1_tilde,
        r_star=r_star,
        g1=g1,
        tau=float(tau),
        xi=xi,
        h_tau=h_tau,
    )


def make_sample(
    pieces: Sequence[np.ndarray],
    g_true: GroupElementN,
    config: TrainConfig,
    rng: np.random.Generator,
    max_attempts: int = 100,
) -> TrainSample:
    """Draw one training sample for an assembly with ground-truth poses.

    The endpoint is the ground truth composed with a uniformly random global
    rotation on the left (the target distribution is rotation-invariant, so
    a single stored pose per shape represents the whole orbit); the start is
    reference noise.  Degenerate draws (alignment covariance without a
    spectral gap, or a relative rotation at the edge of the logarithm's
    domain) are discarded and redrawn.
    """
    noise = NoiseParams(omega=config.omega)
    for _ in range(max_attempts):
        g0 = sample_noise(g_true.n, noise, rng)
        g1_tilde = left_multiply(random_rotation(rng), g_true)
        tau = sample_time(rng, config.time_mean, config.time_std)
        try:
            return build_sample(pieces, g0, g1_tilde, tau)
        except (AngleNearPi, DegenerateCovariance):
            continue
    raise RuntimeError(f"no valid sample after {max_attempts} draws")


# ---------------------------------------------------------------------------
# Batched loss
# ---------------------------------------------------------------------------


def _flatten_batch(samples: Sequence[TrainSample]):
    """Concatenate posed points of all samples into one flat graph."""
    points, piece_id, sample_id, targets, taus = [], [], [], [], []
    piece = 0
    for s_idx, s in enumerate(samples):
        for i, x in enumerate(s.pieces):
            posed = np.asarray(x, dtype=np.float64) @ s.h_tau.rot[i].T + s.h_tau.trans[i]
            points.append(posed)
            piece_id.append(np.full(len(posed), piece, dtype=np.int64))
            sample_id.append(np.full(len(posed), s_idx, dtype=np.int64))
            targets.append(np.stack([s.xi.w[i], s.xi.t[i]]))
            piece += 1
        taus.append(s.tau)
    return (
        np.concatenate(points),
        np.concatenate(piece_id),
        np.concatenate(sample_id),
        np.stack(targets),
        np.asarray(taus),
        piece,
    )


def batch_loss(net: EquivariantNet, samples: Sequence[TrainSample], config: TrainConfig) -> tc.Tensor:
    """Mean over the batch of the summed squared twist residuals.

    Each sample contributes the sum over its pieces of the squared error
    between the predicted and target twists, with the rotation and
    translation components weighted by ``rot_weight``/``trans_weight``.
    """
    if not samples:
        raise ValueError("batch_loss needs at least one sample")
    points, piece_id, sample_id, targets, taus, n_pieces = _flatten_batch(samples)
    temb = TimeEmbedding.build(taus, net.config.time_features)
    out = net.forward_core(points, piece_id, sample_id, n_pieces, len(samples), temb)
    dt = net.config.np_dtype
    diff = tc.sub(out, tc.constant(targets.astype(dt)))
    weights = np.array([config.rot_weight, config.trans_weight], dtype=dt)
    weighted = tc.mul(tc.mul(diff, diff), tc.constant(weights[None, :, None]))
    return tc.scale(tc.reduce_sum(weighted), 1.0 / len(samples))


# ---------------------------------------------------------------------------
# Optimizer loop
# ---------------------------------------------------------------------------


class Trainer:
    """Stateful training loop with averaging, logging, and checkpointing.

    ``dataset`` is a sequence of (pieces, ground_truth_poses) pairs with the
    pieces centered.  All state needed to continue a run — parameters, both
    optimizer moment buffers, the weight average, the step counter, and the
    random generator — round-trips through the checkpoint file, so a resumed
    run reproduces the uninterrupted one bit for bit.
    """

    def __init__(
        self,
        dataset: Sequence,
        model_config: ModelConfig,
        train_config: TrainConfig,
        out_dir,
    ):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        self.dataset = dataset
        self.config = train_config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.net = EquivariantNet.init(model_config, seed=train_config.seed)
        self.rng = np.random.default_rng(train_config.seed)
        dt = model_config.np_dtype
        self.m = {k: np.zeros_like(p.data, dtype=dt) for k, p in self.net.params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=dt) for k, p in self.net.params.items()}
        self.ema = {k: p.data.copy() for k, p in self.net.params.items()}
        self.step = 0
        self._log_path = self.out_dir / "train_log.jsonl"

    # -- one optimization step -----------------------------------------

    def _draw_batch(self) -> list[TrainSample]:
        picks = self.rng.integers(0, len(self.dataset), size=self.config.batch_size)
        batch = []
        for i in picks:
            pieces, g_true = self.dataset[int(i)]
            batch.append(make_sample(pieces, g_true, self.config, self.rng))
        return batch

    def train_step(self, samples: Sequence[TrainSample] | None = None) -> float:
        """One optimizer update; returns the step's loss value."""
        cfg = self.config
        if samples is None:
            samples = self._draw_batch()
        for p in self.net.params.values():
            p.grad = None
        loss = batch_loss(self.net, samples, cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            self._dump_nan(value)
            raise NaNLoss(f"loss became {value} at step {self.step}")
        tc.backward(loss)

        grads = {}
        sq_sum = 0.0
        for name, p in self.net.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads[name] = g
            sq_sum += float((g.astype(np.float64) ** 2).sum())
        total_norm = math.sqrt(sq_sum)
        clip = min(1.0, cfg.clip_norm / (total_norm + 1e-12))

        self.step += 1
        t = self.step
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        dt = self.net.config.np_dtype
        for name, p in self.net.params.items():
            g = (grads[name] * clip).astype(dt)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            p.data = (p.data - cfg.lr * (update + cfg.weight_decay * p.data)).astype(dt)
            ema = self.ema[name]
            ema *= cfg.ema_decay
            ema += (1.0 - cfg.ema_decay) * p.data
        return value

    def _dump_nan(self, value) -> None:
        dump = {
            "step": self.step,
            "loss": repr(value),
            "param_norms": {
                k: float(np.linalg.norm(p.data)) for k, p in self.net.params.items()
            },
        }
        with open(self.out_dir / "nan_dump.json", "w") as fh:
            json.dump(dump, fh, indent=2)

    def _log(self, loss: float, started: float) -> None:
        record = {
            "step": self.step,
            "loss": loss,
            "lr": self.config.lr,
            "wall_time": round(time.time() - started, 3),
        }
        with open(self._log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    # -- persistence -----------------------------------------------------

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.out_dir / f"step_{self.step:07d}.ckpt"
        extra = {}
        for name in self.net.params:
            extra[f"opt.m/{name}"] = self.m[name]
            extra[f"opt.v/{name}"] = self.v[name]
            extra[f"ema/{name}"] = self.ema[name]
        meta = {
            "step": self.step,
            "rng_state": _jsonable(self.rng.bit_generator.state),
            "train_config": self.config.to_dict(),
        }
        self.net.save(path, meta=meta, extra_arrays=extra)
        return path

    def restore(self, path) -> None:
        config_dict, arrays, meta = read_checkpoint(path)
        if ModelConfig(**config_dict) != self.net.config:
            raise ValueError("checkpoint model configuration differs from the trainer's")
        dt = self.net.config.np_dtype
        self.net.load_state_arrays({k: v for k, v in arrays.items() if k in self.net.params})
        for name in self.net.params:
            self.m[name] = arrays[f"opt.m/{name}"].astype(dt)
            self.v[name] = arrays[f"opt.v/{name}"].astype(dt)
            self.ema[name] = arrays[f"ema/{name}"].astype(dt)
        self.step = int(meta["step"])
        self.rng.bit_generator.state = meta["rng_state"]

    def ema_net(self) -> EquivariantNet:
        """A copy of the network carrying the averaged weights."""
        net = EquivariantNet.init(self.net.config, seed=0)
        net.load_state_arrays(self.ema)
        return net

    # -- full loop ---------------------------------------------------------

    def run(self, progress: Callable[[int, float], None] | None = None) -> Path:
        started = time.time()
        while self.step < self.config.steps:
            loss = self.train_step()
            if self.step % self.config.log_every == 0 or self.step == self.config.steps:
                self._log(loss, started)
            if progress is not None:
                progress(self.step, loss)
            if self.step % self.config.checkpoint_every == 0 and self.step < self.config.steps:
                self.save()
        return self.save(self.out_dir / "final.ckpt")


def _jsonable(obj):
    """Convert a bit-generator state dict to plain JSON types."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def train(dataset, model_config: ModelConfig, train_config: TrainConfig, out_dir, resume=None) -> Path:
    """Run (or resume) a training loop; returns the final checkpoint path."""
    trainer = Trainer(dataset, model_config, train_config, out_dir)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run()
