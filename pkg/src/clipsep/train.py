"""Optimization loop: Adam, warmup/decay schedule, clipping, validation, checkpoints."""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import data, losses
from .checkpoint import load_state_into, model_tensors, read_container, write_container
from .errors import InvalidInputError, NumericError
from .model import SeparatorConfig, build_model, canonical_variant

log = logging.getLogger(__name__)

MODALITIES = ("image", "text", "hybrid", "label")


@dataclass
class TrainConfig:
    steps: int = 200_000
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    lr_warmup_steps: int = 5000
    lr_peak: float = 1e-3
    lr_floor: float = 1e-4
    lr_decay_end: int = 100_000
    validate_every: int = 10_000
    variant: str = "clipsep"
    query_modality: str = "image"
    seed: int = 0
    crop_len: int = data.TRAIN_CROP
    gamma: float = 0.25
    lambda_: float = 0.1
    val_size: int = 64
    gain_range: tuple = None

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.query_modality not in MODALITIES:
            raise InvalidInputError(f"query_modality must be one of {MODALITIES}")
        if not 0 < self.lr_warmup_steps < self.lr_decay_end <= self.steps:
            raise InvalidInputError("need 0 < lr_warmup_steps < lr_decay_end <= steps")
        if min(self.lr_peak, self.lr_floor, self.clip_norm, self.batch_size, self.validate_every) <= 0:
            raise InvalidInputError("rates, batch size and intervals must be positive")
        if self.gain_range is not None:
            self.gain_range = tuple(self.gain_range)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def desk_configs(variant="clipsep", steps=2000, **overrides):
    """Desk-scale overlay: short crops, small batch and a compressed schedule."""
    train = TrainConfig(
        steps=steps,
        batch_size=8,
        lr_warmup_steps=max(1, steps // 20),
        lr_decay_end=steps,
        validate_every=max(1, steps // 4),
        variant=variant,
        crop_len=data.DESK_CROP,
        val_size=16,
    )
    model = SeparatorConfig(variant=variant, unet_depth=5, base_channels=8)
    train_fields = set(TrainConfig.field_names())
    train = replace(train, **{k: v for k, v in overrides.items() if k in train_fields})
    model = replace(model, **{k: v for k, v in overrides.items() if k not in train_fields})
    return train, model


def lr_at(step, cfg):
    """Linear warmup from 0 to the peak, linear decay to the floor, then constant."""
    if step < 0:
        raise InvalidInputError("step must be non-negative")
    if step <= cfg.lr_warmup_steps:
        return cfg.lr_peak * step / cfg.lr_warmup_steps
    if step <= cfg.lr_decay_end:
        frac = (step - cfg.lr_warmup_steps) / (cfg.lr_decay_end - cfg.lr_warmup_steps)
        return cfg.lr_peak * (1.0 - frac) + cfg.lr_floor * frac
    return cfg.lr_floor


def hybrid_batch_modality(step):
    """Image queries on even steps, text queries on odd steps."""
    return "image" if step % 2 == 0 else "text"


def modality_for(step, cfg):
    if cfg.variant == "labelsep":
        return "label"
    if cfg.variant == "pit":
        return None
    if cfg.query_modality == "hybrid":
        return hybrid_batch_modality(step)
    return cfg.query_modality


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    step: int = 0
    seed: int = 0
    best_val: float = float("inf")
    best_path: str = None


def make_optimizer(model, cfg):
    return torch.optim.Adam(
        model.parameters(), lr=0.0, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
        foreach=False,
    )


def init_state(train_cfg, model_cfg):
    model = build_model(model_cfg, seed=train_cfg.seed)
    return TrainState(model, make_optimizer(model, train_cfg), 0, train_cfg.seed)


def collate(batch, model):
    """Stack a list of MixtureExamples into model-ready tensors."""
    dtype = next(model.parameters()).dtype
    X = torch.as_tensor(np.stack([ex.X for ex in batch]), dtype=dtype)
    targets = torch.as_tensor(np.stack([ex.targets for ex in batch]), dtype=dtype)
    E = None
    if model.variant == "labelsep":
        E = model.label_table(torch.tensor([ex.class_ids for ex in batch]))
    elif model.variant != "pit":
        if any(ex.embeddings is None for ex in batch):
            raise InvalidInputError("batch lacks query embeddings")
        E = torch.as_tensor(np.stack([ex.embeddings for ex in batch]), dtype=dtype)
    return X, targets, E


def compute_loss(model, X, targets, E, loss_cfg, counter=None):
    """Variant-appropriate objective; returns (LossBreakdown, extra outputs)."""
    if model.variant == "clipsep_nit":
        Q, N = model.forward_nit(X, E)
        return losses.nit_objective(Q, N, targets, X, loss_cfg, counter), N
    if model.variant == "pit":
        masks = model.forward_pit(X)
        value, perm = losses.pit_loss(masks, targets, X, loss_cfg.clamp_eps, counter)
        return losses.LossBreakdown(total=value.mean(), chosen_permutation=perm.tolist()), None
    masks = model.forward_clipsep(X, E)
    value = losses.clipsep_loss(masks, targets, X, loss_cfg.clamp_eps).mean()
    return losses.LossBreakdown(total=value), None


def loss_config(cfg):
    return losses.LossConfig(lambda_=cfg.lambda_, gamma=cfg.gamma)


def train_step(state, batch, cfg, lr=None):
    """One optimization step; returns (state, LossBreakdown, log record)."""
    model, opt = state.model, state.optimizer
    model.train()
    X, targets, E = collate(batch, model)
    breakdown, _ = compute_loss(model, X, targets, E, loss_config(cfg))
    if not torch.isfinite(breakdown.total):
        ids = [[e.clip_id for e in ex.entries] for ex in batch]
        raise NumericError(f"non-finite loss at step {state.step}; batch clips: {json.dumps(ids)}")
    opt.zero_grad(set_to_none=True)
    breakdown.total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
    rate = lr_at(state.step, cfg) if lr is None else lr
    for group in opt.param_groups:
        group["lr"] = rate
    opt.step()
    record = {"step": state.step, "lr": rate, "grad_norm": float(grad_norm)}
    record.update(breakdown.as_log())
    state.step += 1
    return state, breakdown, record


def validate(model, val_set, cfg):
    """Mean image-query loss over ``val_set`` (+ mean total noise activation for NIT)."""
    if not val_set:
        raise InvalidInputError("validation set is empty")
    was_training = model.training
    model.eval()
    total, act = 0.0, 0.0
    loss_cfg = loss_config(cfg)
    try:
        with torch.no_grad():
            for start in range(0, len(val_set), 8):
                chunk = val_set[start:start + 8]
                X, targets, E = collate(chunk, model)
                if model.variant == "clipsep_nit":
                    Q, N = model.forward_nit(X, E)
                    nit, _ = losses.nit_loss(Q, N, targets, X, loss_cfg.clamp_eps)
                    value = nit + loss_cfg.lambda_ * losses.noise_reg(N, loss_cfg.gamma)
                    act += float(losses.noise_activation(N).sum())
                elif model.variant == "pit":
                    value, _ = losses.pit_loss(model.forward_pit(X), targets, X, loss_cfg.clamp_eps)
                else:
                    value = losses.clipsep_loss(model.forward_clipsep(X, E), targets, X, loss_cfg.clamp_eps)
                total += float(value.sum())
    finally:
        model.train(was_training)
    metrics = {"val_loss": total / len(val_set)}
    if model.variant == "clipsep_nit":
        metrics["total_noise_activation"] = act / len(val_set)
    return metrics


def build_validation_set(entries, cfg, bank, loader=None, class_index=None):
    modality = "label" if cfg.variant == "labelsep" else ("image" if cfg.variant != "pit" else None)
    val = data.split_entries(entries, "val") or data.split_entries(entries, "train")
    return data.sample_batch(
        val, cfg.val_size, 2 if len(val) >= 2 else 1, seed=cfg.seed + 1_000_003, step=0,
        bank=bank if modality == "image" else None, crop_len=cfg.crop_len, modality=modality,
        loader=loader, class_index=class_index,
    )


# -- state serialization -------------------------------------------------------


def save_state(path, state, train_cfg, extra_meta=None):
    tensors = model_tensors(state.model)
    opt_state = state.optimizer.state_dict()
    for idx, slots in opt_state["state"].items():
        for key, value in slots.items():
            tensors[f"optim/{idx}/{key}"] = value.detach().cpu().numpy()
    meta = {
        "step": state.step,
        "seed": state.seed,
        "best_val": state.best_val if np.isfinite(state.best_val) else None,
        "best_path": state.best_path,
        "train_config": asdict(train_cfg),
    }
    meta.update(extra_meta or {})
    write_container(path, {"config": state.model.config.to_dict(), "meta": meta}, tensors)


def load_state(path, train_cfg):
    header, tensors = read_container(path)
    model = build_model(SeparatorConfig.from_dict(header["config"]))
    load_state_into(model, tensors)
    opt = make_optimizer(model, train_cfg)
    opt_state = opt.state_dict()
    slots = {}
    for name, arr in tensors.items():
        if name.startswith("optim/"):
            _, idx, key = name.split("/")
            slots.setdefault(int(idx), {})[key] = torch.from_numpy(arr)
    opt_state["state"] = slots
    opt.load_state_dict(opt_state)
    meta = header["meta"]
    best = meta.get("best_val")
    state = TrainState(model, opt, meta["step"], meta["seed"],
                       float("inf") if best is None else best, meta.get("best_path"))
    return state


def parameter_hash(model):
    digest = hashlib.sha256()
    for name, arr in sorted(model_tensors(model).items()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


# -- driver ---------------------------------------------------------------------


def fit(train_cfg, model_cfg, entries, bank, out_dir, resume=None, stop_at=None, progress=None):
    """Run (or resume) training, writing logs and checkpoints under ``out_dir``.

    Writes ``train_log.jsonl`` (one line per step), ``val_log.jsonl``,
    ``last.ckpt``, ``best.ckpt`` and ``config.json``.  ``stop_at`` ends the run
    early at that step (used for interrupted-run tests).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    loader = data.AudioCache()
    train_entries = data.split_entries(entries, "train")
    class_index = data.class_index_for(entries) if train_cfg.variant == "labelsep" else None
    if train_cfg.variant == "labelsep" and model_cfg.num_classes < len(class_index):
        model_cfg = replace(model_cfg, num_classes=len(class_index))
    if model_cfg.variant != train_cfg.variant:
        model_cfg = replace(model_cfg, variant=train_cfg.variant)

    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump({"train": asdict(train_cfg), "model": model_cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if resume is not None:
        state = load_state(resume, train_cfg)
    else:
        state = init_state(train_cfg, model_cfg)
    val_set = build_validation_set(entries, train_cfg, bank, loader, class_index)

    log_path = out / "train_log.jsonl"
    kept = []
    if resume is not None and log_path.exists():
        kept = log_path.read_text(encoding="utf-8").splitlines()[: state.step]
    val_path = out / "val_log.jsonl"
    val_kept = []
    if resume is not None and val_path.exists():
        val_kept = [
            line for line in val_path.read_text(encoding="utf-8").splitlines()
            if json.loads(line)["step"] <= state.step
        ]
    end = train_cfg.steps if stop_at is None else min(stop_at, train_cfg.steps)
    t0 = time.time()
    with open(log_path, "w", encoding="utf-8") as log_fh, open(val_path, "w", encoding="utf-8") as val_fh:
        for line in kept:
            log_fh.write(line + "\n")
        for line in val_kept:
            val_fh.write(line + "\n")
        while state.step < end:
            modality = modality_for(state.step, train_cfg)
            batch = data.sample_batch(
                train_entries, train_cfg.batch_size, model_cfg.n, train_cfg.seed, state.step,
                bank=bank if modality in ("image", "text") else None, crop_len=train_cfg.crop_len,
                modality=modality, loader=loader, gain_range=train_cfg.gain_range,
                class_index=class_index,
            )
            state, _, record = train_step(state, batch, train_cfg)
            log_fh.write(json.dumps(record) + "\n")
            if state.step % train_cfg.validate_every == 0 or state.step == train_cfg.steps:
                metrics = validate(state.model, val_set, train_cfg)
                ckpt = out / f"step_{state.step:07d}.ckpt"
                if metrics["val_loss"] < state.best_val:
                    state.best_val = metrics["val_loss"]
                    state.best_path = str(ckpt.name)
                save_state(ckpt, state, train_cfg)
                if state.best_path == ckpt.name:
                    save_state(out / "best.ckpt", state, train_cfg)
                val_fh.write(json.dumps(dict(metrics, step=state.step)) + "\n")
                val_fh.flush()
                log.info("step %d val %s (%.1fs)", state.step, metrics, time.time() - t0)
            if progress is not None:
                progress(state, record)
    save_state(out / "last.ckpt", state, train_cfg)
    return state
