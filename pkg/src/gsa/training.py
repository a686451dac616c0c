"""AdamW, warmup + cosine schedule, and the MQAR training / evaluation loops."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import checkpoint
from .model import ModelConfig, init_params, is_gain, loss_and_grads, model_fwd, param_shapes
from .tasks import MqarSpec, mqar_accuracy, mqar_batch
from .tensor import ConfigError

# held-out instances are drawn from this index onwards, far past any training index
EVAL_OFFSET = 1 << 40


@dataclass(frozen=True)
class Schedule:
    peak_lr: float = 3e-4
    min_lr: float = 3e-5
    warmup_steps: int = 100
    total_steps: int = 3000

    def __post_init__(self):
        if not 0 < self.min_lr <= self.peak_lr:
            raise ConfigError(f"need 0 < min_lr <= peak_lr, got {self.min_lr}, {self.peak_lr}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")


def lr_at(s: Schedule, step: int) -> float:
    """Linear ramp from 0 to the peak, then a cosine down to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= s.total_steps:
        raise ConfigError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    frac = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def decays(name: str) -> bool:
    """Weight decay applies to matrices only: not to norm gains or the embedding."""
    return not (is_gain(name) or name == "embedding")


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.95,
               eps: float = 1e-8, weight_decay: float = 0.01) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update with decoupled weight decay, applied in place."""
    if grads.keys() != params.keys():
        raise ValueError("gradient names do not match parameter names")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay and decays(name):
            p *= 1.0 - lr * weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grads(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients by one factor so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
    return grads, norm


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 64
    peak_lr: float = 3e-4
    min_lr: float = 3e-5
    warmup: int = 100
    weight_decay: float = 0.01
    clip: float | None = 1.0
    seed: int = 0
    eval_instances: int = 1024
    checkpoint_every: int = 500
    # when set, step s reads instances starting at (s * batch) % pool: a fixed training set
    pool: int | None = None

    def schedule(self) -> Schedule:
        return Schedule(self.peak_lr, min(self.min_lr, self.peak_lr), min(self.warmup, self.steps - 1), self.steps)


@dataclass
class TrainingReport:
    model: dict
    task: dict
    train: dict
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    params: dict | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"model": self.model, "task": self.task, "train": self.train, "records": self.records,
                "summary": self.summary}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


def evaluate(params: dict, cfg: ModelConfig, spec: MqarSpec, instances: int, start: int = EVAL_OFFSET,
             batch: int = 64) -> float:
    """MQAR accuracy pooled over ``instances`` held-out instances."""
    hits = total = 0
    for s in range(start, start + instances, batch):
        n = min(batch, start + instances - s)
        tokens, targets = mqar_batch(spec, n, s)
        logits, _ = model_fwd(tokens, params, cfg)
        mask = targets >= 0
        hits += mqar_accuracy(logits, targets) * mask.sum()
        total += mask.sum()
    return float(hits / total)


def save_checkpoint(path, params: dict, cfg: ModelConfig, state: AdamState | None = None,
                    extra: dict | None = None) -> None:
    tensors = dict(params)
    tensors["meta/config.json"] = checkpoint.encode_json(cfg.to_dict())
    if extra is not None:
        tensors["meta/train.json"] = checkpoint.encode_json(extra)
    if state is not None:
        tensors.update({f"opt/m/{k}": a for k, a in state.m.items()})
        tensors.update({f"opt/v/{k}": a for k, a in state.v.items()})
        tensors["opt/step"] = np.array([state.step], dtype=np.int64)
    checkpoint.save(path, tensors)


def load_checkpoint(path):
    """Returns ``(params, cfg, state_or_None, extra_or_None)``."""
    t = checkpoint.load(path)
    if "meta/config.json" not in t:
        raise checkpoint.CheckpointError("checkpoint has no model config")
    cfg = ModelConfig.from_dict(checkpoint.decode_json(t.pop("meta/config.json")))
    extra = checkpoint.decode_json(t.pop("meta/train.json")) if "meta/train.json" in t else None
    params = {k: a for k, a in t.items() if not (k.startswith("opt/") or k.startswith("meta/"))}
    shapes = param_shapes(cfg)
    if set(shapes) != set(params):
        raise checkpoint.CheckpointError("tensor names do not match the stored model config")
    for k, shp in shapes.items():
        if params[k].shape != shp:
            raise checkpoint.CheckpointError(f"{k} has shape {params[k].shape}, config implies {shp}")
    state = None
    if "opt/step" in t:
        state = AdamState({k: t[f"opt/m/{k}"] for k in shapes}, {k: t[f"opt/v/{k}"] for k in shapes},
                          int(t["opt/step"][0]))
    return params, cfg, state, extra


def train_loop(cfg: ModelConfig, task: MqarSpec, tcfg: TrainConfig, checkpoint_path=None, resume: bool = False,
               log: Callable[[dict], None] | None = None, stop_after: int | None = None) -> TrainingReport:
    """Deterministic MQAR training.

    Step ``s`` trains on instances ``[s*B, (s+1)*B)`` of the task stream, so a
    run resumed from a checkpoint sees exactly the data it would have seen.
    ``stop_after`` ends the run early (after that many total steps) without
    changing the schedule, which is how an interrupted run is simulated.
    """
    task = replace(task, seed=tcfg.seed).validate()
    if cfg.vocab < task.vocab:
        raise ConfigError(f"model vocab {cfg.vocab} is smaller than the task vocab {task.vocab}")
    sched = tcfg.schedule()
    report = TrainingReport(cfg.to_dict(), asdict(task), asdict(tcfg))
    start = 0
    if resume and checkpoint_path is not None:
        params, saved_cfg, state, extra = load_checkpoint(checkpoint_path)
        if saved_cfg != cfg:
            raise ConfigError("checkpoint config differs from the requested model config")
        if state is None or extra is None:
            raise checkpoint.CheckpointError("checkpoint carries no optimizer state to resume from")
        report.records = extra["records"]
        start = state.step
    else:
        params = init_params(cfg, tcfg.seed)
        state = AdamState.zeros_like(params)

    t0 = time.perf_counter()
    end = tcfg.steps if stop_after is None else min(stop_after, tcfg.steps)
    for step in range(start, end):
        first = step * tcfg.batch
        if tcfg.pool:
            first %= tcfg.pool
        tokens, targets = mqar_batch(task, tcfg.batch, first)
        loss, logits, grads = loss_and_grads(tokens, targets, params, cfg)
        lr = lr_at(sched, step)
        norm = global_norm(grads)
        if not (math.isfinite(loss) and math.isfinite(norm)):
            raise TrainingDiverged(f"non-finite loss {loss} / grad norm {norm} at step {step} (lr {lr:.3g})")
        if tcfg.clip is not None:
            grads, _ = clip_grads(grads, tcfg.clip)
        adamw_step(params, grads, state, lr, weight_decay=tcfg.weight_decay)
        rec = {"step": step, "lr": lr, "loss": loss, "acc": mqar_accuracy(logits, targets)}
        report.records.append(rec)
        if log:
            log(rec)
        done = step + 1
        if checkpoint_path is not None and (done % tcfg.checkpoint_every == 0 or done == end):
            save_checkpoint(checkpoint_path, params, cfg, state, {"records": report.records, "task": asdict(task)})

    acc = evaluate(params, cfg, task, tcfg.eval_instances)
    report.summary = {
        "steps": end,
        "final_loss": report.records[-1]["loss"] if report.records else None,
        "eval_accuracy": acc,
        "eval_instances": tcfg.eval_instances,
        "eval_offset": EVAL_OFFSET,
        "seconds": time.perf_counter() - t0,
    }
    report.params = params
    return report
