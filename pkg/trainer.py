# =============================================================================
#           HADES TOOLKIT - TRAINING
#           LOSS ASSEMBLY, BACKWARD PASS, ADAMW, SCHEDULE, GRADIENT CHECK,
#           TRAINING RUNNER WITH METRICS LOG
# =============================================================================

import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from errors import ConfigError, GradcheckError, NumericalError
from model import HadesModel, PRESETS, provenance_line, save_checkpoint
from numerics import Rng

logger = logging.getLogger(__name__)

IGNORE_INDEX = -1

METRIC_COLUMNS = ["step", "task", "balance", "diversity", "total", "lr", "grad_norm"]


@dataclass
class LossBreakdown:
    task: float
    balance: float
    diversity: float
    total: float
    lambda1: float = 0.0
    lambda2: float = 0.0

    def recompose(self):
        return self.task + self.lambda1 * self.balance + self.lambda2 * self.diversity


@dataclass
class TrainConfig:
    lr: float = 3e-3
    steps: int = 1000
    batch: int = 8
    seq_len: int = 64
    seed: int = 0
    warmup: int = 100
    clip: float = 1.0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    min_lr_ratio: float = 0.1
    checkpoint_every: int = 500
    log_every: int = 50
    checkpoint_dtype: str = "<f4"

    def validate(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.steps < 0 or self.warmup < 0:
            raise ConfigError("steps and warmup must be non-negative")
        if self.batch < 1 or self.seq_len < 2:
            raise ConfigError("batch must be >= 1 and seq_len >= 2")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.clip < 0 or self.weight_decay < 0:
            raise ConfigError("clip and weight_decay must be non-negative")
        if not 0.0 <= self.min_lr_ratio <= 1.0:
            raise ConfigError("min_lr_ratio must lie in [0, 1]")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown trainer config keys: {unknown}")
        return cls(**data).validate()


# --- Losses ---

def cross_entropy(logits, targets):
    """Mean next-token cross-entropy over non-ignored targets; returns (loss, d_logits)"""
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape[:-1]}")
    valid = targets != IGNORE_INDEX
    if np.any(targets[valid] < 0) or np.any(targets[valid] >= V):
        raise ValueError(f"target id outside vocabulary [0, {V})")
    count = int(valid.sum())

    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_probs = shifted - log_z
    if count == 0:
        return 0.0, np.zeros_like(logits)
    safe_targets = np.where(valid, targets, 0)
    picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked[valid])) / count

    d_logits = np.exp(log_probs)
    np.put_along_axis(d_logits, safe_targets[..., None],
                      np.take_along_axis(d_logits, safe_targets[..., None], axis=-1) - 1.0, axis=-1)
    d_logits *= valid[..., None] / count
    return loss, d_logits


def total_loss(logits, targets, aux, lambda1, lambda2):
    task, _ = cross_entropy(logits, targets)
    balance, diversity = float(aux["balance"]), float(aux["diversity"])
    total = task + lambda1 * balance + lambda2 * diversity
    breakdown = LossBreakdown(task, balance, diversity, total, lambda1, lambda2)
    for name in ("task", "balance", "diversity", "total"):
        if not math.isfinite(getattr(breakdown, name)):
            raise NumericalError(f"loss.{name}")
    return breakdown


def token_accuracy(logits, targets):
    """Fraction of non-ignored targets predicted by argmax"""
    targets = np.asarray(targets)
    valid = targets != IGNORE_INDEX
    if not valid.any():
        return 0.0
    return float(np.mean(np.argmax(logits, axis=-1)[valid] == targets[valid]))


# --- Backward ---

def backward(model, inputs, targets, gamma=None):
    """Loss breakdown and gradients of the total loss for a (B, T) batch"""
    inputs = np.atleast_2d(np.asarray(inputs))
    targets = np.atleast_2d(np.asarray(targets))
    cfg = model.cfg
    logits, aux, _, tapes = model.forward(inputs, gamma=gamma, collect_records=False, keep_tape=True)
    breakdown = total_loss(logits, targets, aux, cfg.lambda1, cfg.lambda2)
    _, d_logits = cross_entropy(logits, targets)
    grads = backward_from_tapes(model, tapes, d_logits,
                                d_balance=cfg.lambda1, d_diversity=cfg.lambda2)
    return breakdown, grads


def backward_from_tapes(model, tapes, d_logits, d_balance=0.0, d_diversity=0.0):
    """Push upstream gradients through saved tapes in fixed sequence order"""
    if tapes is None or len(tapes) != len(d_logits):
        raise ValueError("backward needs one saved tape per sequence")
    grads = {name: np.zeros_like(array) for name, array in model.params.items()}
    batch = len(tapes)
    for tape, d_seq in zip(tapes, d_logits):
        model.backward_sequence(tape, d_seq, d_balance=d_balance / batch,
                                d_diversity=d_diversity / batch, grads=grads)
    return grads


# --- Optimizer ---

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, params):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def learning_rate(step, cfg):
    """Linear warmup over cfg.warmup steps, then cosine decay to min_lr_ratio * lr"""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    horizon = max(cfg.steps - cfg.warmup, 1)
    progress = min(max(step - cfg.warmup, 0) / horizon, 1.0)
    floor = cfg.min_lr_ratio * cfg.lr
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads, max_norm):
    """Scale every gradient so the global norm is at most max_norm; returns (grads, pre-clip norm)"""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


def optimizer_step(params, grads, state, lr, weight_decay=0.1, betas=(0.9, 0.95), eps=1e-8, clip=1.0):
    """AdamW with decoupled weight decay on matrices; returns (params', state', grad_norm)"""
    if set(params) != set(grads):
        raise ValueError("gradient names do not match parameter names")
    grads, norm = clip_gradients(grads, clip)
    beta1, beta2 = betas
    step = state.step + 1
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        decayed = p * (1.0 - lr * weight_decay) if p.ndim >= 2 else p
        new_params[name] = decayed - lr * update
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(new_m, new_v, step), norm


# --- Gradient check ---

@dataclass
class GradcheckReport:
    seed: int
    excluded: bool
    reason: str
    min_margin: float
    max_rel_error: float
    rows: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def passed(self):
        return self.excluded or self.max_rel_error < GRADCHECK_TOL


GRADCHECK_STEP = 1e-5
GRADCHECK_TOL = 1e-5
GRADCHECK_FLOOR = 1e-4
TIE_MARGIN = 1e-3
# tensors up to this size are checked entry by entry
GRADCHECK_EXHAUSTIVE_SIZE = 32


def routing_margins(model, inputs):
    """Smallest gap between the Q-th and (Q+1)-th expert score over every token"""
    cfg = model.cfg
    margin = math.inf
    if not 0 < cfg.Q < cfg.E or cfg.router_mode in ("fixed", "random"):
        return margin
    for ids in np.atleast_2d(inputs):
        _, _, records, _, _ = model.forward_sequence(ids)
        for record in records:
            scores = np.sort(record.scores)[::-1]
            margin = min(margin, float(scores[cfg.Q - 1] - scores[cfg.Q]))
    return margin


def _loss_at(model, inputs, targets):
    logits, aux, _ = model.forward(inputs, collect_records=False)
    return total_loss(logits, targets, aux, model.cfg.lambda1, model.cfg.lambda2).total


def _checked_entries(flat_grad, samples_per_tensor, rng):
    if flat_grad.size <= GRADCHECK_EXHAUSTIVE_SIZE:
        return np.arange(flat_grad.size)
    candidates = np.flatnonzero(np.abs(flat_grad) > 0)
    if candidates.size == 0:
        candidates = np.arange(flat_grad.size)
    count = min(samples_per_tensor, candidates.size)
    return np.sort(candidates[rng.choice(candidates.size, size=count, replace=False)])


def gradient_check(model, inputs, targets, samples_per_tensor=12, seed=0,
                   step=GRADCHECK_STEP, floor=GRADCHECK_FLOOR):
    """Compare analytic gradients with central differences.

    Small tensors are checked in full, larger ones on sampled entries with a
    nonzero gradient. Relative error is |a - n| / max(|a|, |n|, floor). Seeds
    whose routing sits near a top-Q tie are reported as excluded.
    """
    margin = routing_margins(model, inputs)
    if margin < TIE_MARGIN:
        logger.warning("gradcheck seed %d excluded: top-Q margin %.2e", seed, margin)
        return GradcheckReport(seed, True, "tie_margin", margin, 0.0)

    _, grads = backward(model, inputs, targets)
    rng = Rng.keyed(seed, 1)
    rows = []
    for name in sorted(model.params):
        tensor = model.params[name]
        flat_grad = grads[name].reshape(-1)
        for flat_index in _checked_entries(flat_grad, samples_per_tensor, rng):
            index = np.unravel_index(int(flat_index), tensor.shape)
            original = tensor[index]
            tensor[index] = original + step
            plus = _loss_at(model, inputs, targets)
            tensor[index] = original - step
            minus = _loss_at(model, inputs, targets)
            tensor[index] = original
            numeric = (plus - minus) / (2.0 * step)
            analytic = float(flat_grad[flat_index])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            rows.append({"tensor": name, "index": int(flat_index), "analytic": analytic,
                         "numeric": numeric, "rel_error": rel})
    frame = pd.DataFrame(rows, columns=["tensor", "index", "analytic", "numeric", "rel_error"])
    worst = float(frame["rel_error"].max()) if len(frame) else 0.0
    return GradcheckReport(seed, False, "", margin, worst, frame)


def gradcheck_suite(seeds, cfg=None, seq_len=8, samples_per_tensor=12, raise_on_failure=True):
    """Gradient check of freshly initialized models, one per seed"""
    cfg = cfg or PRESETS["desk-tiny"]
    reports = []
    for seed in seeds:
        model = HadesModel.initialize(cfg, seed=seed)
        rng = Rng.keyed(seed, 2)
        inputs = rng.integers(0, cfg.vocab, (1, seq_len))
        targets = rng.integers(0, cfg.vocab, (1, seq_len))
        report = gradient_check(model, inputs, targets, samples_per_tensor=samples_per_tensor, seed=seed)
        reports.append(report)
        if raise_on_failure and not report.passed:
            raise GradcheckError(f"seed {seed}: max relative error {report.max_rel_error:.3e} "
                                 f">= {GRADCHECK_TOL:.0e}")
    return reports


# --- Training runner ---

def smoothed(series, window=50):
    return pd.Series(series).rolling(window, min_periods=1).mean()


class TrainingRunner:
    """Runs the optimizer over a task stream, logging one CSV row per step"""

    def __init__(self, model_cfg, train_cfg, task_stream, out_dir="runs/hades", run_dict=None,
                 progress=True):
        """task_stream(step) -> (inputs, targets) arrays of shape (batch, seq_len)"""
        self.model_cfg = model_cfg.validate()
        self.train_cfg = train_cfg.validate()
        self.task_stream = task_stream
        self.out_dir = out_dir
        self.progress = progress
        self.run_dict = run_dict or {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
        self.metrics_path = os.path.join(out_dir, "metrics.csv")
        self.model = HadesModel.initialize(model_cfg, seed=train_cfg.seed)
        self.state = OptimizerState.fresh(self.model.params)
        self.checkpoints = []

    def init_csv_files(self):
        """Initialize the metrics log with provenance and column header"""
        os.makedirs(self.out_dir, exist_ok=True)
        with open(self.metrics_path, "w", newline="") as f:
            f.write(provenance_line(self.run_dict, "metrics") + "\n")
            pd.DataFrame(columns=METRIC_COLUMNS).to_csv(f, index=False)

    def append_metrics(self, row):
        with open(self.metrics_path, "a", newline="") as f:
            pd.DataFrame([row], columns=METRIC_COLUMNS).to_csv(f, index=False, header=False)

    def save(self, label):
        path = os.path.join(self.out_dir, f"checkpoint_{label}.ckpt")
        save_checkpoint(self.model, path, dtype=self.train_cfg.checkpoint_dtype)
        self.checkpoints.append(path)
        return path

    def train_step(self, step):
        inputs, targets = self.task_stream(step)
        breakdown, grads = backward(self.model, inputs, targets)
        if not math.isfinite(breakdown.task):
            raise NumericalError("task_loss", f"step {step}")
        lr = learning_rate(step - 1, self.train_cfg)
        params, self.state, grad_norm = optimizer_step(
            self.model.params, grads, self.state, lr,
            weight_decay=self.train_cfg.weight_decay,
            betas=(self.train_cfg.beta1, self.train_cfg.beta2),
            eps=self.train_cfg.adam_eps, clip=self.train_cfg.clip,
        )
        self.model = HadesModel(self.model_cfg, params)
        return {"step": step, "task": breakdown.task, "balance": breakdown.balance,
                "diversity": breakdown.diversity, "total": breakdown.total,
                "lr": lr, "grad_norm": grad_norm}

    def run(self):
        cfg = self.train_cfg
        print("HADES TRAINING RUN")
        print("=" * 70)
        print(f"Model: L={self.model_cfg.n_layer} d={self.model_cfg.d} M={self.model_cfg.M} "
              f"H={self.model_cfg.H} S={self.model_cfg.S} router={self.model_cfg.router_mode}")
        print(f"Steps: {cfg.steps} | Batch: {cfg.batch} x {cfg.seq_len} | Peak LR: {cfg.lr:g}")
        print(f"Output directory: {self.out_dir}")
        print("=" * 70)

        self.init_csv_files()
        self.save("step0")
        logger.info("training started: %d steps into %s", cfg.steps, self.out_dir)

        bar = tqdm(range(1, cfg.steps + 1), desc="Training", disable=not self.progress or cfg.steps == 0)
        last = None
        try:
            for step in bar:
                last = self.train_step(step)
                self.append_metrics(last)
                if self.progress:
                    bar.set_postfix(task=f"{last['task']:.4f}", lr=f"{last['lr']:.2e}")
                if cfg.log_every and step % cfg.log_every == 0:
                    tqdm.write(f"Step {step:6d} | task {last['task']:.4f} | total {last['total']:.4f} "
                               f"| grad_norm {last['grad_norm']:.3f}")
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    tqdm.write(f"[OK] Saved checkpoint: {self.save(f'step{step}')}")
        except NumericalError as e:
            print(f"[ERROR] Training diverged: {e}")
            raise
        finally:
            bar.close()

        if cfg.steps > 0:
            self.save("final")
        print("\nTRAINING COMPLETE!")
        print("=" * 50)
        if last is not None:
            print(f"   • Final task loss: {last['task']:.4f}")
            print(f"   • Final total loss: {last['total']:.4f}")
        print(f"   • Checkpoints written: {len(self.checkpoints)}")
        print(f"Results saved to: {self.metrics_path}")
        return self.metrics_path


def load_metrics(path):
    return pd.read_csv(path, comment="#")


def train_loop(model_cfg, train_cfg, task_stream, out_dir, progress=False, run_dict=None):
    """Train and return (model, metrics frame)"""
    runner = TrainingRunner(model_cfg, train_cfg, task_stream, out_dir=out_dir,
                            run_dict=run_dict, progress=progress)
    runner.run()
    return runner.model, load_metrics(runner.metrics_path)
