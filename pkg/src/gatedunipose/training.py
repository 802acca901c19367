"""Toy training on synthetic data: Adam, fixed-order batching, PCK tracking, resume."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .codec import DEFAULT_SIGMA, decode_batch, encode_batch
from .data import SyntheticSpec, generate_synthetic, stack_samples, write_image_tensor
from .exceptions import GatedUniPoseError
from .losses import total_loss
from .model import GatedUniPoseModel, load_checkpoint, read_checkpoint, save_checkpoint, write_records
from .seeding import derive_seed

log = logging.getLogger(__name__)


class TrainingDiverged(GatedUniPoseError, RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    sigma: float = DEFAULT_SIGMA
    distill_weight: float = 0.0
    holdout: int = 64
    pck_threshold: float = 2.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)


class Adam:
    """Adam over a fixed list of named parameters."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def state_records(self) -> dict:
        out = {"__step__": np.array([self.step_count], dtype=np.int64)}
        for name, _ in self.params:
            out[f"m:{name}"] = self.m[name]
            out[f"v:{name}"] = self.v[name]
        return out

    def load_records(self, records: dict):
        self.step_count = int(records["__step__"][0])
        for name, p in self.params:
            self.m[name] = records[f"m:{name}"].astype(p.data.dtype)
            self.v[name] = records[f"v:{name}"].astype(p.data.dtype)


def pck(pred_xy, gt_kps, threshold: float) -> float:
    """Fraction of visible joints whose prediction lies within ``threshold`` pixels."""
    gt = np.asarray(gt_kps)
    visible = gt[..., 2] > 0
    dist = np.linalg.norm(np.asarray(pred_xy)[..., :2] - gt[..., :2], axis=-1)
    return float((dist[visible] <= threshold).mean()) if visible.any() else 0.0


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, pck
    final_pck: float = 0.0
    checkpoint: Path | None = None
    seconds: float = 0.0

    @property
    def loss_reduction(self) -> float:
        return 1.0 - self.losses[-1] / self.losses[0] if self.losses else 0.0


class HeatmapTrainer:
    """Trains a model on fixed arrays, visiting them in one fixed order every epoch.

    ``images`` is [N, 3, H, W]; ``keypoints`` is [N, J, 3] in input pixels.
    PCK is tracked on the optional holdout arrays.
    """

    def __init__(self, model: GatedUniPoseModel, images, keypoints, config: TrainConfig,
                 holdout=None, teacher: GatedUniPoseModel | None = None, out_dir=None,
                 order_seed: int = 0):
        self.model = model
        self.config = config
        self.teacher = teacher
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.heatmap_size = model.config.heatmap_size
        self.stride = model.config.input_size[0] // self.heatmap_size[0]
        dtype = T.get_dtype()
        self.images = np.asarray(images).astype(dtype)
        self.keypoints = np.asarray(keypoints, dtype=np.float64)
        self.targets = encode_batch(self.keypoints, self.heatmap_size, config.sigma, self.stride).astype(dtype)
        if holdout is None:
            self.holdout_images, self.holdout_keypoints = None, None
        else:
            self.holdout_images = np.asarray(holdout[0]).astype(dtype)
            self.holdout_keypoints = np.asarray(holdout[1], dtype=np.float64)
        order_rng = np.random.default_rng(derive_seed(order_seed, 0xB47C4))
        self.order = order_rng.permutation(len(self.images))
        self.optimizer = Adam(model.named_parameters(), config.lr, config.betas, config.eps)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.order) // self.config.batch_size)

    def batch_indices(self, step: int) -> np.ndarray:
        b = step % self.steps_per_epoch
        return self.order[b * self.config.batch_size:(b + 1) * self.config.batch_size]

    def train_step(self, step: int) -> float:
        idx = self.batch_indices(step)
        self.model.train()
        images = T.Tensor(self.images[idx])
        pred = self.model(images)
        teacher = None
        if self.teacher is not None and self.config.distill_weight:
            teacher = self.teacher.predict(self.images[idx])
        loss = total_loss(pred, self.targets[idx], teacher, self.config.distill_weight)
        value = loss.item()
        if not np.isfinite(value):
            self._dump_batch(step, idx)
            raise TrainingDiverged(f"non-finite loss {value} at step {step}")
        self.optimizer.zero_grad()
        loss.backward()
        with T.no_grad():
            self.optimizer.step()
        return value

    def _dump_batch(self, step, idx):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_image_tensor(self.out_dir / f"diverged_step{step}_images.gupi", self.images[idx])
        write_image_tensor(self.out_dir / f"diverged_step{step}_keypoints.gupi", self.keypoints[idx])

    def evaluate_pck(self) -> float:
        if self.holdout_images is None:
            return float("nan")
        preds = []
        for start in range(0, len(self.holdout_images), 32):
            hm = self.model.predict(self.holdout_images[start:start + 32])
            preds.append(decode_batch(hm, self.stride))
        return pck(np.concatenate(preds), self.holdout_keypoints, self.config.pck_threshold)

    def run(self, start_step: int = 0, steps: int | None = None) -> TrainResult:
        steps = self.config.steps if steps is None else steps
        result = TrainResult()
        t0 = time.perf_counter()
        epoch_losses = []
        for step in range(start_step, start_step + steps):
            value = self.train_step(step)
            result.losses.append(value)
            epoch_losses.append(value)
            if (step + 1) % self.steps_per_epoch == 0:
                epoch = (step + 1) // self.steps_per_epoch
                result.epochs.append({"epoch": epoch, "loss": float(np.mean(epoch_losses)),
                                      "pck": self.evaluate_pck()})
                log.info("epoch=%d step=%d loss=%.6g pck=%.4f", epoch, step + 1,
                         result.epochs[-1]["loss"], result.epochs[-1]["pck"])
                epoch_losses = []
        result.final_pck = self.evaluate_pck()
        result.seconds = time.perf_counter() - t0
        return result

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "model.gupz"
        save_checkpoint(self.model, path)
        write_records(directory / "optimizer.gupz", self.optimizer.state_records().items())
        return path

    def restore(self, directory) -> int:
        """Load model and optimizer state; returns the step to resume from."""
        directory = Path(directory)
        loaded = load_checkpoint(directory / "model.gupz")
        own = dict(self.model.named_parameters())
        for name, p in loaded.named_parameters():
            own[name].data = p.data.copy()
        src = dict(loaded.named_modules())
        for name, module in self.model.named_modules():
            for key, arr in src[name]._local_buffers():
                module.set_buffer(key, arr)
        self.optimizer.load_records(read_checkpoint(directory / "optimizer.gupz"))
        return self.optimizer.step_count


class ToyTrainer(HeatmapTrainer):
    """:class:`HeatmapTrainer` over a synthetic set; the holdout follows the training indices."""

    def __init__(self, model: GatedUniPoseModel, data_spec: SyntheticSpec, config: TrainConfig,
                 teacher: GatedUniPoseModel | None = None, out_dir=None):
        images, keypoints = stack_samples(generate_synthetic(data_spec))
        held = SyntheticSpec(**{**data_spec.__dict__, "samples": config.holdout})
        holdout = stack_samples(generate_synthetic(held, start=data_spec.samples))
        super().__init__(model, images, keypoints, config, holdout=holdout, teacher=teacher,
                         out_dir=out_dir, order_seed=data_spec.seed)
