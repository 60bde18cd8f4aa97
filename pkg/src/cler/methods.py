"""Online continual learning methods and the equivariant pretext regularizer.

Every method step computes a (masked) cross-entropy on augmented inputs,
optionally adds the pretext regularizer on the *raw* inputs, and takes a
single optimizer step on the sum.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import evaluation
from .buffer import ReplayBuffer
from .errors import ConfigError
from .model import ArchitectureConfig, SplitNetwork
from .pretext import TransformFamily, get_family
from .stream import ClassIncrementalStream, iterate_arrays, iterate_task

log = logging.getLogger(__name__)

METHODS = ("finetune", "joint_online", "joint_offline", "er", "er_ace")
REPLAY_METHODS = ("er", "er_ace")
JOINT_METHODS = ("joint_online", "joint_offline")
CLER_CHOICES = ("none", "rotation", "jigsaw")


@dataclass
class MethodConfig:
    method: str = "er"
    cler: str = "none"
    lambda_r: float = 0.0
    lr: float = 0.01
    batch_size: int = 10
    replay_batch_size: Optional[int] = None  # None: same as batch_size
    epochs: int = 1  # per task; for joint methods, passes over the union
    buffer_size: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    crop_padding: int = 4
    flip_prob: float = 0.5
    augment: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.cler not in CLER_CHOICES:
            raise ConfigError(f"unknown cler family {self.cler!r}")
        if self.lambda_r < 0:
            raise ConfigError("lambda_r must be non-negative")
        if (self.lambda_r > 0) != (self.cler != "none"):
            raise ConfigError("lambda_r > 0 exactly when a cler family is configured")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size and epochs must be positive")
        if self.method == "joint_online" and self.epochs != 1:
            raise ConfigError("joint_online trains for exactly one epoch")
        if self.method in REPLAY_METHODS and self.buffer_size < 1:
            raise ConfigError(f"{self.method} needs a positive buffer_size")
        if self.replay_batch_size is not None and self.replay_batch_size < 1:
            raise ConfigError("replay_batch_size must be positive")

    @property
    def uses_buffer(self) -> bool:
        return self.method in REPLAY_METHODS

    @property
    def online(self) -> bool:
        return self.epochs == 1

    @property
    def arm(self) -> str:
        """Short label such as ``er_ace+jigsaw``."""
        return self.method if self.cler == "none" else f"{self.method}+{self.cler}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "MethodConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown method config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class AugmentationPolicy:
    """Random crop with reflect padding plus random horizontal flip."""

    crop_padding: int = 4
    flip_prob: float = 0.5

    def __call__(self, images: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        n, _, h, w = images.shape
        out = images
        p = self.crop_padding
        if p > 0:
            padded = F.pad(images, (p, p, p, p), mode="reflect")
            offsets = torch.randint(0, 2 * p + 1, (n, 2), generator=generator).tolist()
            out = torch.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets)])
        if self.flip_prob > 0:
            flip = torch.rand(n, generator=generator) < self.flip_prob
            if flip.any():
                out = out.clone()
                out[flip] = out[flip].flip(-1)
        return out


@dataclass
class StepLosses:
    total: float
    classification: float
    pretext: Optional[float] = None


class CLERRegularizer:
    """Weighted cross-entropy of the pretext head on randomly transformed raw inputs."""

    def __init__(self, family: TransformFamily, lambda_r: float, generator: Optional[torch.Generator] = None):
        self.family = family
        self.lambda_r = float(lambda_r)
        self.generator = generator if generator is not None else torch.Generator()

    def __call__(self, net: SplitNetwork, raw_images: torch.Tensor, labels=None) -> torch.Tensor:
        x, k = self.family.random_apply_batch(raw_images, self.generator, labels=labels)
        return self.lambda_r * F.cross_entropy(net.forward_pretext(x), k)


def cler_loss(net: SplitNetwork, raw_batch, family, lambda_r: float, rng_seed=None, labels=None) -> torch.Tensor:
    """One-off evaluation of the regularizer with a fresh seeded generator."""
    family = get_family(family) if isinstance(family, str) else family
    gen = torch.Generator()
    if rng_seed is None:
        gen.seed()
    else:
        gen.manual_seed(int(rng_seed))
    return CLERRegularizer(family, lambda_r, gen)(net, torch.as_tensor(raw_batch), labels)


def class_mask(classes: Optional[Sequence[int]], num_classes: int) -> torch.Tensor:
    if classes is None:
        return torch.ones(num_classes, dtype=torch.bool)
    mask = torch.zeros(num_classes, dtype=torch.bool)
    mask[list(classes)] = True
    return mask


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy where logits outside ``allowed`` (per row or shared) are set to -inf."""
    if allowed.dim() == 1:
        allowed = allowed.expand_as(logits)
    return F.cross_entropy(logits.masked_fill(~allowed, float("-inf")), labels)


def _step(net, stream_batch, replay_batch, stream_allowed, replay_allowed, optimizer,
          augment, regularizer, generator) -> StepLosses:
    x_s, y_s = stream_batch
    if len(y_s) == 0:
        raise ValueError("empty stream batch")
    n_s = len(y_s)
    if replay_batch is not None and len(replay_batch[1]):
        raw = torch.cat([x_s, replay_batch[0]])
        labels = torch.cat([y_s, replay_batch[1]])
    else:
        raw, labels = x_s, y_s
    allowed = torch.cat([stream_allowed.expand(n_s, -1), replay_allowed.expand(len(labels) - n_s, -1)])

    net.train()
    inputs = augment(raw, generator) if augment is not None else raw
    class_loss = masked_cross_entropy(net(inputs), labels, allowed)
    total = class_loss
    pretext = None
    if regularizer is not None:
        pretext = regularizer(net, raw)
        total = total + pretext
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepLosses(total.item(), class_loss.item(), None if pretext is None else pretext.item())


def _num_classes(net) -> int:
    return net.config.num_classes


def finetune_step(net, stream_batch, optimizer, *, classes=None, augment=None, regularizer=None,
                  generator=None) -> StepLosses:
    """Cross-entropy on the stream batch alone."""
    return er_step(net, stream_batch, None, optimizer, classes=classes, augment=augment,
                   regularizer=regularizer, generator=generator)


def er_step(net, stream_batch, replay_batch, optimizer, *, classes=None, augment=None, regularizer=None,
            generator=None) -> StepLosses:
    """Cross-entropy averaged over the concatenated stream and replay batches.

    ``classes`` restricts the softmax to the given class ids (all classes when None).
    """
    mask = class_mask(classes, _num_classes(net))
    return _step(net, stream_batch, replay_batch, mask, mask, optimizer, augment, regularizer, generator)


def er_ace_step(net, stream_batch, replay_batch, seen_classes, current_classes, optimizer, *, augment=None,
                regularizer=None, generator=None) -> StepLosses:
    """Asymmetric cross-entropy: stream rows compete only among current classes,
    replay rows among every class seen so far including the current ones."""
    n = _num_classes(net)
    current = class_mask(current_classes, n)
    seen = class_mask(sorted(set(seen_classes) | set(current_classes)), n)
    return _step(net, stream_batch, replay_batch, current, seen, optimizer, augment, regularizer, generator)


@dataclass
class TrainResult:
    config: MethodConfig
    seed: int
    class_il: evaluation.AccuracyMatrix
    task_il: evaluation.AccuracyMatrix
    pretext_accuracy: Optional[float]
    examples_per_task: list
    loss_log: list = field(default_factory=list)
    seconds: float = 0.0
    net: Optional[SplitNetwork] = field(default=None, repr=False)
    buffer: Optional[ReplayBuffer] = field(default=None, repr=False)


def _seed_for(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def architecture_for(stream: ClassIncrementalStream, config: MethodConfig, **overrides) -> ArchitectureConfig:
    c, h, w = stream.image_shape
    if h != w:
        raise ConfigError("only square images are supported")
    family = get_family(config.cler)
    kwargs = dict(num_classes=stream.num_classes, pretext_classes=family.size if family else 0,
                  in_channels=c, image_size=h, input_mean=stream.data.mean, input_std=stream.data.std)
    kwargs.update(overrides)
    return ArchitectureConfig(**kwargs)


def train_sequence(stream: ClassIncrementalStream, config: MethodConfig, seed: int,
                   arch: Optional[ArchitectureConfig] = None,
                   after_task: Optional[Callable] = None) -> TrainResult:
    """Train on the stream's tasks in order and record accuracy matrices.

    ``after_task(task_index, net, stream)`` is called after each task's
    evaluation (for joint methods, once after training).
    """
    config.validate()
    started = time.perf_counter()
    arch = arch or architecture_for(stream, config)
    family = get_family(config.cler)
    if family is not None and arch.pretext_classes != family.size:
        raise ConfigError("pretext head width does not match the transform family")

    torch.manual_seed(_seed_for(seed, 0))
    net = SplitNetwork(arch)
    generator = torch.Generator().manual_seed(_seed_for(seed, 1))
    optimizer = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    augment = AugmentationPolicy(config.crop_padding, config.flip_prob) if config.augment else None
    regularizer = CLERRegularizer(family, config.lambda_r, generator) if family is not None else None
    buffer = ReplayBuffer(config.buffer_size, seed=_seed_for(seed, 2)) if config.uses_buffer else None
    replay_bs = config.replay_batch_size or config.batch_size

    t_count = stream.num_tasks
    class_il = evaluation.AccuracyMatrix.empty(t_count, "class_il")
    task_il = evaluation.AccuracyMatrix.empty(t_count, "task_il")
    consumed = [0] * t_count
    loss_log = []

    def evaluate_after(j):
        # class-IL: arg-max over the whole head, including classes not seen yet
        for i in range(j + 1 if config.method not in JOINT_METHODS else t_count):
            class_il.values[i, j] = evaluation.class_il_accuracy(net, stream, i)
            task_il.values[i, j] = evaluation.task_il_accuracy(net, stream, i)

    if config.method in JOINT_METHODS:
        all_classes = list(range(stream.num_classes))
        idx = np.concatenate(stream.train_indices)
        images, labels = stream.data.train_images[idx], stream.data.train_labels[idx]
        for epoch in range(config.epochs):
            losses = []
            for batch in iterate_arrays(images, labels, config.batch_size, _seed_for(seed, 3, epoch)):
                out = finetune_step(net, batch, optimizer, classes=all_classes, augment=augment,
                                    regularizer=regularizer, generator=generator)
                losses.append(out.total)
                if epoch == 0:
                    for c in batch[1].tolist():
                        consumed[_task_of(stream, c)] += 1
            loss_log.append({"epoch": epoch, "mean_loss": float(np.mean(losses))})
        evaluate_after(t_count - 1)
        if after_task is not None:
            after_task(t_count - 1, net, stream)
    else:
        for t in range(t_count):
            current = list(stream.tasks[t].class_ids)
            past = stream.classes_up_to(t - 1) if t else []
            active = past + current
            for epoch in range(config.epochs):
                losses = []
                for batch in iterate_task(stream, t, config.batch_size, _seed_for(seed, 4, t, epoch)):
                    replay = None
                    if buffer is not None and not buffer.is_empty():
                        replay = buffer.sample(replay_bs)
                    common = dict(augment=augment, regularizer=regularizer, generator=generator)
                    if config.method == "er_ace":
                        out = er_ace_step(net, batch, replay, past, current, optimizer, **common)
                    else:
                        out = er_step(net, batch, replay, optimizer, classes=active, **common)
                    losses.append(out.total)
                    if epoch == 0:
                        consumed[t] += len(batch[1])
                        if buffer is not None:
                            buffer.offer_batch(*batch)
                loss_log.append({"task": t, "epoch": epoch, "mean_loss": float(np.mean(losses))})
            evaluate_after(t)
            log.debug("task %d done: class-IL %s", t, class_il.values[: t + 1, t])
            if after_task is not None:
                after_task(t, net, stream)

    pre_acc = None
    if family is not None:
        test_x = np.concatenate([stream.task_test(i)[0] for i in range(t_count)])
        pre_acc = evaluation.pretext_accuracy(net, family, test_x, seed=_seed_for(seed, 5))

    return TrainResult(config=config, seed=seed, class_il=class_il, task_il=task_il,
                       pretext_accuracy=pre_acc, examples_per_task=consumed, loss_log=loss_log,
                       seconds=time.perf_counter() - started, net=net, buffer=buffer)


def _task_of(stream: ClassIncrementalStream, label: int) -> int:
    for task in stream.tasks:
        if label in task.class_ids:
            return task.index
    raise ValueError(f"label {label} belongs to no task")


# Hyperparameters reported for the full-scale benchmarks (SGD, batch size 10).
REFERENCE_HYPERPARAMETERS = [
    # Seq. CIFAR-100, 10 tasks, ResNet18
    dict(dataset="seq-cifar100", method="finetune", cler="none", buffer_size=0, lr=0.01),
    dict(dataset="seq-cifar100", method="joint_online", cler="none", buffer_size=0, lr=0.01, epochs=1),
    dict(dataset="seq-cifar100", method="joint_offline", cler="none", buffer_size=0, lr=0.01, epochs=30),
    dict(dataset="seq-cifar100", method="er_ace", cler="none", buffer_size=500, lr=0.01),
    dict(dataset="seq-cifar100", method="er_ace", cler="jigsaw", buffer_size=500, lr=0.01, lambda_r=1.5),
    dict(dataset="seq-cifar100", method="er_ace", cler="none", buffer_size=2000, lr=0.01),
    dict(dataset="seq-cifar100", method="er_ace", cler="jigsaw", buffer_size=2000, lr=0.01, lambda_r=1.5),
    # Seq. miniImageNet, 20 tasks, slim ResNet18
    dict(dataset="seq-miniimagenet", method="finetune", cler="none", buffer_size=0, lr=0.03),
    dict(dataset="seq-miniimagenet", method="joint_online", cler="none", buffer_size=0, lr=0.01, epochs=1),
    dict(dataset="seq-miniimagenet", method="joint_offline", cler="none", buffer_size=0, lr=0.03, epochs=50),
    dict(dataset="seq-miniimagenet", method="er_ace", cler="none", buffer_size=2000, lr=0.1),
    dict(dataset="seq-miniimagenet", method="er_ace", cler="rotation", buffer_size=2000, lr=0.03, lambda_r=0.3),
    dict(dataset="seq-miniimagenet", method="er_ace", cler="none", buffer_size=8000, lr=0.1),
    dict(dataset="seq-miniimagenet", method="er_ace", cler="jigsaw", buffer_size=8000, lr=0.03, lambda_r=1.0),
]


def reference_config(dataset: str, method: str, cler: str = "none", buffer_size: int = 0) -> MethodConfig:
    """Build a :class:`MethodConfig` from the registered full-scale hyperparameters."""
    for entry in REFERENCE_HYPERPARAMETERS:
        if (entry["dataset"], entry["method"], entry["cler"], entry["buffer_size"]) == \
                (dataset, method, cler, buffer_size):
            values = {k: v for k, v in entry.items() if k != "dataset"}
            return MethodConfig(**values)
    raise KeyError(f"no registered hyperparameters for {(dataset, method, cler, buffer_size)}")
