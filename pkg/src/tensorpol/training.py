"""Training loop: adaptive-moment optimizer, warmup + half-cosine learning
rate, EMA shadow weights, validation-based selection, and checkpointing.

The loss is the per-molecule Frobenius norm of the residual tensor, averaged
across the batch — identical in structure to the validation/selection metric
so that optimization and reporting never disagree. Molecules are evaluated
independently (no padding); batch gradients are an ordered mean over the
per-molecule backward passes, which keeps runs bitwise reproducible for a
fixed seed even when a thread pool fans out the per-molecule work.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import Molecule
from .model import Model, ModelConfig, PreparedMolecule, load_checkpoint, save_checkpoint


class DivergenceDetected(RuntimeError):
    """Loss went NaN/Inf; carries the last good result."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 5e-4
    warmup_steps: int = 1000
    ema_decay: float = 0.999
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0  # epochs between last.ckpt snapshots; 0 = end only
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ValueError("warmup_steps and weight_decay must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to exactly base_lr at step == warmup_steps, then a half
    cosine from base_lr down to zero at total_steps. Steps are 1-indexed."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, params: dict, grads: dict, lr: float):
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= (lr * update).astype(p.value.dtype)

    def state_arrays(self) -> dict:
        out = {f"opt_m/{k}": v for k, v in self.m.items()}
        out.update({f"opt_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, step_count: int):
        for k in self.m:
            self.m[k] = np.array(arrays[f"opt_m/{k}"])
            self.v[k] = np.array(arrays[f"opt_v/{k}"])
        self.step_count = step_count


class EMA:
    """Exponential moving average shadow of the parameters.

    shadow <- decay * shadow + (1 - decay) * param after every optimizer
    step; decay = 0 keeps the shadow equal to the raw weights.
    """

    def __init__(self, params: dict, decay: float):
        self.decay = decay
        self.shadow = {k: p.value.copy() for k, p in params.items()}

    def update(self, params: dict):
        d = self.decay
        for k, p in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * p.value

    def model_with_shadow(self, model: Model) -> Model:
        params = {k: ad.parameter(v.copy()) for k, v in self.shadow.items()}
        return Model(model.config, params)

    def state_arrays(self) -> dict:
        return {f"ema/{k}": v for k, v in self.shadow.items()}

    def load_state(self, arrays: dict):
        for k in self.shadow:
            self.shadow[k] = np.array(arrays[f"ema/{k}"])


@dataclass
class EpochLog:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_frob_mae: float
    wall_seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    best_model: Model
    best_epoch: int
    best_val: float
    history: list = field(default_factory=list)
    diverged: bool = False


def molecule_loss(model: Model, prep: PreparedMolecule):
    """Frobenius-norm residual for one molecule; returns (tape, loss node)."""
    target = ad.constant(prep.target.astype(model.dtype))
    with ad.Tape() as tape:
        loss = ad.frobenius_norm(ad.sub(model.forward(prep), target))
    return tape, loss


def _molecule_grads(model: Model, prep: PreparedMolecule):
    tape, loss = molecule_loss(model, prep)
    grads = ad.backward(tape, loss)
    named = {name: grads[p] for name, p in model.params.items() if p in grads}
    return float(loss.value), named


def evaluate_frob_mae(model: Model, preps) -> float:
    total = 0.0
    for prep in preps:
        pred = np.asarray(model.forward(prep).value, dtype=np.float64)
        total += float(np.linalg.norm(pred - prep.target))
    return total / len(preps)


def select_best(history) -> int:
    """Epoch with the lowest validation Frobenius MAE; ties go earlier."""
    if not history:
        raise ValueError("history is empty")
    best_epoch, best_val = None, math.inf
    for entry in history:
        if entry.val_frob_mae < best_val:
            best_epoch, best_val = entry.epoch, entry.val_frob_mae
    return best_epoch


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # per-epoch stream so a resumed run shuffles identically to a straight one
    return np.random.default_rng(np.random.SeedSequence([seed, 1, epoch]))


def _prepare_all(model, mols):
    preps = []
    for mol in mols:
        if mol.target_alpha is None:
            raise ValueError(f"{mol.mol_id}: training molecule has no target")
        preps.append(model.prepare(mol))
    return preps


def train(
    train_mols: list,
    val_mols: list,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    resume_from=None,
    log_fh=None,
) -> TrainResult:
    """Optimize a fresh (or resumed) model; returns the best-by-validation
    EMA snapshot. Writes last.ckpt / best.ckpt / train_log.jsonl under
    out_dir when given. Raises DivergenceDetected on NaN/Inf loss with the
    last good result attached."""
    if not train_mols or not val_mols:
        raise ValueError("train and val splits must be nonempty")
    cfg = train_config
    init_seed = int(np.random.SeedSequence([cfg.seed, 0]).generate_state(1)[0])
    model = Model.init(model_config, seed=init_seed, dtype=np.float32)
    optimizer = Adam(model.params, weight_decay=cfg.weight_decay)
    ema = EMA(model.params, cfg.ema_decay)
    start_epoch = 1
    step = 0
    best_epoch, best_val = 0, math.inf
    best_params = None

    if resume_from is not None:
        loaded, meta, extra = load_checkpoint(resume_from)
        if loaded.config != model_config:
            raise ValueError("resume checkpoint was trained with a different model config")
        model = loaded
        optimizer = Adam(model.params, weight_decay=cfg.weight_decay)
        optimizer.load_state(extra, meta["step"])
        ema = EMA(model.params, cfg.ema_decay)
        ema.load_state(extra)
        step = meta["step"]
        start_epoch = meta["epoch"] + 1
        best_epoch = meta.get("best_epoch", 0)
        best_val = meta.get("best_val", math.inf)
        if best_epoch:
            best_params = {k: np.array(extra[f"best/{k}"]) for k in model.params}

    train_preps = _prepare_all(model, train_mols)
    val_preps = _prepare_all(model, val_mols)
    steps_per_epoch = math.ceil(len(train_preps) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    history = []

    def run_batch(batch):
        if pool is not None:
            results = list(pool.map(lambda p: _molecule_grads(model, p), batch))
        else:
            results = [_molecule_grads(model, p) for p in batch]
        mean_loss = sum(r[0] for r in results) / len(results)
        summed = {}
        for _, named in results:  # ordered, deterministic merge
            for name, g in named.items():
                if name in summed:
                    summed[name] = summed[name] + g
                else:
                    summed[name] = g.copy()
        mean_grads = {}
        for name, p in model.params.items():
            if name in summed:
                mean_grads[name] = (summed[name] / len(results)).astype(p.value.dtype)
            else:
                mean_grads[name] = np.zeros_like(p.value)
        return mean_loss, mean_grads

    def save_state(path, epoch):
        extra = optimizer.state_arrays()
        extra.update(ema.state_arrays())
        if best_params is not None:
            extra.update({f"best/{k}": v for k, v in best_params.items()})
        save_checkpoint(
            path,
            model,
            seed=cfg.seed,
            step=step,
            extra=extra,
            meta_extra={"epoch": epoch, "best_epoch": best_epoch, "best_val": best_val},
        )

    def snapshot_model(params_arrays) -> Model:
        return Model(
            model.config, {k: ad.parameter(v.copy()) for k, v in params_arrays.items()}
        )

    def finish(diverged=False):
        if best_params is not None:
            best_model = snapshot_model(best_params)
        else:
            best_model = ema.model_with_shadow(model)
        return TrainResult(best_model, best_epoch, best_val, history, diverged)

    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            t0 = time.monotonic()
            order = _epoch_rng(cfg.seed, epoch).permutation(len(train_preps))
            loss_sum, loss_n = 0.0, 0
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_preps[i] for i in order[lo:lo + cfg.batch_size]]
                step += 1
                lr = lr_schedule(step, cfg.lr, cfg.warmup_steps, total_steps)
                batch_loss, grads = run_batch(batch)
                if not math.isfinite(batch_loss):
                    raise DivergenceDetected(
                        f"non-finite loss at epoch {epoch} step {step}", finish(True)
                    )
                optimizer.step(model.params, grads, lr)
                ema.update(model.params)
                loss_sum += batch_loss * len(batch)
                loss_n += len(batch)

            ema_model = ema.model_with_shadow(model)
            val_mae = evaluate_frob_mae(ema_model, val_preps)
            if not math.isfinite(val_mae):
                raise DivergenceDetected(
                    f"non-finite validation MAE at epoch {epoch}", finish(True)
                )
            entry = EpochLog(
                epoch=epoch,
                step=step,
                lr=lr,
                train_loss=loss_sum / loss_n,
                val_frob_mae=val_mae,
                wall_seconds=time.monotonic() - t0,
            )
            history.append(entry)
            if log_fh is not None:
                log_fh.write(entry.to_json() + "\n")
                log_fh.flush()
            if val_mae < best_val:
                best_epoch, best_val = epoch, val_mae
                best_params = {k: v.copy() for k, v in ema.shadow.items()}
                if out_dir is not None:
                    save_checkpoint(
                        _p(out_dir, "best.ckpt"),
                        snapshot_model(best_params),
                        seed=cfg.seed,
                        step=step,
                        meta_extra={
                            "epoch": best_epoch,
                            "best_epoch": best_epoch,
                            "best_val": best_val,
                        },
                    )
            if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_state(_p(out_dir, "last.ckpt"), epoch)
    finally:
        if pool is not None:
            pool.shutdown()

    if out_dir is not None:
        save_state(_p(out_dir, "last.ckpt"), cfg.epochs)
    return finish()


def _p(out_dir, name):
    return os.path.join(str(out_dir), name)
