from __future__ import annotations

import contextlib
import logging
import math
import pathlib
import time
from typing import IO, Protocol

import attr
import numpy as np
import torch

from unicontext import checkpoints, exceptions, losses, prompts, signals, tasks
from unicontext.model import DecoderModel
from unicontext.tasks import TASK_NAMES
from unicontext.vocab import PAD

logger = logging.getLogger(__name__)

SCHEDULES = ("constant", "cosine")
NO_DECAY = ("bias", "ln_", "embedding")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

METRICS_FILE = "metrics.tsv"
METRICS_COLUMNS = ("step", "task", "l_out", "l_aux", "grad_norm", "tokens_per_s")
CHECKPOINT_FILE = "model.ckpt"
CHECKPOINTS_DIR = "checkpoints"


@attr.dataclass(frozen=True, kw_only=True)
class TrainConfig:
    """
    Attributes
    ----------
    learning_rate :
        Base AdamW learning rate.
    weight_decay :
        Decoupled weight decay, not applied to biases, norms and embeddings.
    grad_clip_norm :
        Global gradient norm clipping threshold.
    lambda_aux :
        Weight of the load-balancing loss.
    epochs :
        Number of epochs. 0 only writes the initial checkpoint.
    steps_per_epoch :
        Optimizer steps per epoch. 0 derives it from the dataset sizes and
        the batch size.
    batch_size :
        Sequences per (single-task) batch.
    in_context_k :
        In-context samples per training prompt.
    l_in_weight :
        Weight of the loss on input image tokens, 0 disables it.
    seed :
        Seed of the model weights, batch sampling and dropout.
    tasks :
        Trained tasks, ``segmentation`` and/or ``captioning``.
    task_weights :
        Loss scale of every task, aligned with ``tasks``. Empty means 1 for all.
    dataset_sizes :
        Sizes used for the square-root task sampling, aligned with ``tasks``.
        Empty takes the number of train items of every task.
    schedule :
        ``constant`` or ``cosine`` learning rate.
    max_steps :
        Stop after this many steps in total, 0 for no cap.
    num_threads :
        Torch intra-op threads. 1 keeps runs bit-reproducible.
    log_every :
        Steps between two ``train_step`` log records.
    pad_captions :
        Pad every caption to the caption budget with [PAD].
    """

    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    grad_clip_norm: float = 0.5
    lambda_aux: float = 0.02
    epochs: int = 1
    steps_per_epoch: int = 0
    batch_size: int = 8
    in_context_k: int = 3
    l_in_weight: float = 0.0
    seed: int = 0
    tasks: tuple[str, ...] = TASK_NAMES
    task_weights: tuple[float, ...] = ()
    dataset_sizes: tuple[int, ...] = ()
    schedule: str = "constant"
    max_steps: int = 0
    num_threads: int = 1
    log_every: int = 10
    pad_captions: bool = False

    def __attrs_post_init__(self):
        if self.lambda_aux < 0 or self.l_in_weight < 0:
            raise exceptions.ConfigError("lambda_aux and l_in_weight must be >= 0")
        if self.in_context_k < 0:
            raise exceptions.ConfigError("in_context_k must be >= 0")
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise exceptions.ConfigError(
                "learning_rate and grad_clip_norm must be > 0"
            )
        if self.weight_decay < 0:
            raise exceptions.ConfigError("weight_decay must be >= 0")
        if min(self.epochs, self.steps_per_epoch, self.max_steps) < 0:
            raise exceptions.ConfigError(
                "epochs, steps_per_epoch and max_steps must be >= 0"
            )
        if self.batch_size < 1 or self.num_threads < 1 or self.log_every < 1:
            raise exceptions.ConfigError(
                "batch_size, num_threads and log_every must be positive"
            )
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise exceptions.ConfigError("tasks must be a non-empty list of tasks")
        unknown = set(self.tasks) - set(TASK_NAMES)
        if unknown:
            raise exceptions.ConfigError(
                f"Unknown task(s): {', '.join(sorted(unknown))}"
            )
        for name in ("task_weights", "dataset_sizes"):
            value = getattr(self, name)
            if value and len(value) != len(self.tasks):
                raise exceptions.ConfigError(
                    f"{name} has {len(value)} values for {len(self.tasks)} task(s)"
                )
        if any(weight < 0 for weight in self.task_weights):
            raise exceptions.ConfigError("task_weights must be >= 0")
        if self.schedule not in SCHEDULES:
            raise exceptions.ConfigError(
                f"schedule must be one of {', '.join(SCHEDULES)}"
            )

    def weight_of(self, task: str) -> float:
        if not self.task_weights:
            return 1.0
        return self.task_weights[self.tasks.index(task)]


# Optimization


def build_optimizer(model: DecoderModel, config: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, parameter in model.named_parameters():
        (no_decay if any(part in name for part in NO_DECAY) else decay).append(
            parameter
        )
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.learning_rate,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
    )


def build_scheduler(
    optimizer: torch.optim.Optimizer, schedule: str, total_steps: int
) -> torch.optim.lr_scheduler.LambdaLR | None:
    if schedule == "constant":
        return None

    def cosine(step: int) -> float:
        progress = min(step, total_steps) / max(1, total_steps)
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, cosine)


def check_gradients(model: torch.nn.Module) -> None:
    for name, parameter in model.named_parameters():
        if parameter.grad is not None and not bool(
            torch.isfinite(parameter.grad).all()
        ):
            raise exceptions.NonFiniteGradient(parameter=name)


def optimizer_step(
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    *,
    grad_clip_norm: float,
    scheduler: torch.optim.lr_scheduler.LambdaLR | None = None,
) -> float:
    """
    Clip the gradients to a global norm of ``grad_clip_norm`` and apply one
    update. Returns the gradient norm before clipping.
    """
    check_gradients(model)
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip_norm)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    if scheduler is not None:
        scheduler.step()
    return float(norm)


# Loop


class BatchSource(Protocol):
    def next_batch(self) -> prompts.Batch: ...


@attr.dataclass(frozen=True, kw_only=True)
class StepRecord:
    step: int
    epoch: int
    task: str
    l_out: float
    l_aux: float
    l_in: float
    loss: float
    grad_norm: float
    accuracy: float
    tokens_per_s: float
    expert_load: tuple[tuple[float, ...], ...]

    @property
    def load_spread(self) -> float:
        """
        ``max f_e - min f_e``, averaged over MoE layers.
        """
        if not self.expert_load:
            return 0.0
        return float(np.mean([max(load) - min(load) for load in self.expert_load]))

    def metrics_line(self) -> str:
        return (
            f"{self.step}\t{self.task}\t{self.l_out!r}\t{self.l_aux!r}\t"
            f"{self.grad_norm!r}\t{self.tokens_per_s:.1f}\n"
        )


@attr.dataclass(frozen=True, kw_only=True)
class TrainResult:
    steps: int
    epochs_completed: int
    stopped: bool
    checkpoint: pathlib.Path | None
    history: list[StepRecord]


def masked_accuracy(
    logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor
) -> float:
    mask = mask.bool()
    if not bool(mask.any()):
        return 0.0
    return float((logits[mask].argmax(dim=-1) == targets[mask]).double().mean())


class Trainer:
    """
    Runs the optimization loop. With an ``out`` directory, a checkpoint is
    written before the first step and at every epoch boundary, and one line
    per step is appended to the metrics file.
    """

    def __init__(
        self,
        model: DecoderModel,
        batches: BatchSource,
        config: TrainConfig,
        *,
        pad_id: int,
        steps_per_epoch: int,
        out: pathlib.Path | None = None,
        install_signal_handlers: bool = True,
    ):
        self.model = model
        self.batches = batches
        self.config = config
        self.pad_id = pad_id
        self.steps_per_epoch = steps_per_epoch
        self.out = out
        self.install_signal_handlers = install_signal_handlers

        self.optimizer = build_optimizer(model, config)
        self.scheduler = build_scheduler(
            self.optimizer, config.schedule, self.total_steps
        )
        self.stop_requested = False
        self.step = 0
        self.last_checkpoint: pathlib.Path | None = None
        self.history: list[StepRecord] = []

    @property
    def total_steps(self) -> int:
        total = self.config.epochs * self.steps_per_epoch
        if self.config.max_steps:
            total = min(total, self.config.max_steps)
        return total

    def stop(self) -> None:
        self.stop_requested = True
        logger.info(
            "Stop requested, finishing the current step",
            extra={"action": "stopping_trainer", "step": self.step},
        )

    def save(self, epoch: int) -> None:
        if self.out is None:
            return
        metadata = {"step": self.step, "epoch": epoch, "seed": self.config.seed}
        epoch_path = self.out / CHECKPOINTS_DIR / f"epoch-{epoch:03d}.ckpt"
        checkpoints.save_checkpoint(epoch_path, self.model, metadata)
        checkpoints.save_checkpoint(self.out / CHECKPOINT_FILE, self.model, metadata)
        self.last_checkpoint = epoch_path

    def train_step(self, batch: prompts.Batch, epoch: int) -> StepRecord:
        started = time.perf_counter()
        self.model.train()
        inputs, targets, loss_mask, input_mask = (
            torch.from_numpy(array)
            for array in prompts.shift(batch.ids, batch.loss_mask, batch.input_mask)
        )
        output = self.model(inputs, token_mask=inputs != self.pad_id)
        l_out = losses.output_loss(output.logits, targets, loss_mask)
        l_aux = losses.aux_loss(output.moe_stats, self.model.config.num_experts)
        l_in = (
            losses.input_loss(output.logits, targets, input_mask)
            if self.config.l_in_weight
            else torch.zeros((), dtype=l_out.dtype)
        )
        loss = self.config.weight_of(batch.task) * losses.total_loss(
            l_out,
            l_aux,
            l_in,
            lambda_aux=self.config.lambda_aux,
            l_in_weight=self.config.l_in_weight,
        )
        if not bool(torch.isfinite(loss)):
            self.optimizer.zero_grad(set_to_none=True)
            raise exceptions.NonFiniteLoss(
                step=self.step + 1,
                checkpoint=str(self.last_checkpoint) if self.last_checkpoint else None,
            )
        loss.backward()
        grad_norm = optimizer_step(
            self.model,
            self.optimizer,
            grad_clip_norm=self.config.grad_clip_norm,
            scheduler=self.scheduler,
        )
        self.step += 1
        elapsed = max(time.perf_counter() - started, 1e-9)
        return StepRecord(
            step=self.step,
            epoch=epoch,
            task=batch.task,
            l_out=l_out.item(),
            l_aux=l_aux.item(),
            l_in=l_in.item(),
            loss=loss.item(),
            grad_norm=grad_norm,
            accuracy=masked_accuracy(output.logits.detach(), targets, loss_mask),
            tokens_per_s=batch.ids.size / elapsed,
            expert_load=tuple(
                tuple(stats.fraction.tolist()) for stats in output.moe_stats
            ),
        )

    def record(self, record: StepRecord, metrics: IO[str] | None) -> None:
        self.history.append(record)
        if metrics is not None:
            metrics.write(record.metrics_line())
            metrics.flush()
        if record.step % self.config.log_every == 0 or record.step == 1:
            logger.info(
                f"Step {record.step} ({record.task}): l_out={record.l_out:.4f} "
                f"l_aux={record.l_aux:.4f}",
                extra={
                    "action": "train_step",
                    "step": record.step,
                    "epoch": record.epoch,
                    "task": record.task,
                    "l_out": record.l_out,
                    "l_aux": record.l_aux,
                    "l_in": record.l_in,
                    "grad_norm": record.grad_norm,
                    "accuracy": record.accuracy,
                    "expert_load": [list(load) for load in record.expert_load],
                },
            )

    def _open_metrics(self) -> IO[str] | None:
        if self.out is None:
            return None
        self.out.mkdir(parents=True, exist_ok=True)
        metrics = (self.out / METRICS_FILE).open("w")
        metrics.write("\t".join(METRICS_COLUMNS) + "\n")
        return metrics

    def run(self) -> TrainResult:
        self.stop_requested = False
        torch.set_num_threads(self.config.num_threads)
        logger.info(
            f"Starting training for {self.total_steps} step(s)",
            extra={
                "action": "start_training",
                "epochs": self.config.epochs,
                "steps_per_epoch": self.steps_per_epoch,
                "total_steps": self.total_steps,
            },
        )
        epochs_completed = 0
        stop_context: contextlib.AbstractContextManager = contextlib.nullcontext()
        if self.install_signal_handlers:
            stop_context = signals.on_stop(self.stop)
        metrics = self._open_metrics()
        try:
            with stop_context, torch.random.fork_rng(devices=[]):
                torch.manual_seed(self.config.seed)
                self.save(epoch=0)
                for epoch in range(1, self.config.epochs + 1):
                    done = 0
                    while done < self.steps_per_epoch and not self._should_stop():
                        record = self.train_step(self.batches.next_batch(), epoch)
                        self.record(record, metrics)
                        done += 1
                    if done == self.steps_per_epoch:
                        epochs_completed = epoch
                    self.save(epoch=epoch)
                    if self._should_stop():
                        break
        finally:
            if metrics is not None:
                metrics.close()

        logger.info(
            f"Training done after {self.step} step(s)",
            extra={
                "action": "end_training",
                "steps": self.step,
                "epochs_completed": epochs_completed,
                "stopped": self.stop_requested,
            },
        )
        return TrainResult(
            steps=self.step,
            epochs_completed=epochs_completed,
            stopped=self.stop_requested,
            checkpoint=self.last_checkpoint,
            history=self.history,
        )

    def _should_stop(self) -> bool:
        capped = bool(self.config.max_steps) and self.step >= self.config.max_steps
        return self.stop_requested or capped


def derive_steps_per_epoch(config: TrainConfig, sizes: list[int]) -> int:
    if config.steps_per_epoch:
        return config.steps_per_epoch
    return max(1, math.ceil(sum(sizes) / config.batch_size))


def build_trainer(
    model: DecoderModel,
    task_list: list[tasks.Task],
    config: TrainConfig,
    *,
    out: pathlib.Path | None = None,
    install_signal_handlers: bool = True,
) -> Trainer:
    sizes = list(config.dataset_sizes) or [task.size for task in task_list]
    sampler = tasks.TaskSampler(
        task_list,
        batch_size=config.batch_size,
        k=config.in_context_k,
        seed=config.seed,
        sizes=sizes,
    )
    return Trainer(
        model,
        sampler,
        config,
        pad_id=task_list[0].quantizers.vocab.tag_id(PAD),
        steps_per_epoch=derive_steps_per_epoch(config, sizes),
        out=out,
        install_signal_handlers=install_signal_handlers,
    )
