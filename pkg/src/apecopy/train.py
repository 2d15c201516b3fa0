"""Losses, optimizer, learning-rate schedule and the training loop.

The objective has three parts: the post-editing negative log-likelihood,
a mean-squared-error pull between the CopyNet copy mass and the LCS copy
labels, and a binary cross-entropy on the predictor scores.  They combine
as ``(1 - alpha) * (nll + lambda * copy) + alpha * pred``; disabled
components contribute exactly zero.

Batch normalisation: the likelihood is averaged per gold token, the copy
and predictor terms per mt token, so the weights transfer across batch
sizes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import labeling, tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Batch, Vocab, batch_iter, build_vocab
from .errors import ConfigError, ContractError
from .model import ApeModel, ForwardTrace
from .tensor import Tensor


@dataclass
class LossWeights:
    alpha: float = 0.9
    lam: float = 1.0


@dataclass
class LossTerms:
    ape: Tensor
    copy: object  # Tensor, or 0.0 when the component is off
    pred: object
    combined: Tensor


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_ape(trace: ForwardTrace, batch: Batch, floor: float = 1e-9) -> Tensor:
    """Negative log-likelihood of the gold post-edit, averaged per token."""
    dtype = trace.p_final.dtype
    p_gold = T.gather_last(trace.p_final, batch.targets)
    mask = Tensor(batch.target_mask.astype(dtype))
    count = batch.target_mask.sum()
    logp = T.log(T.maximum(p_gold, floor))
    return T.tsum(logp * mask) * (-1.0 / count)


def loss_copy(copy_mass: Tensor, labels, mask=None) -> Tensor:
    """Mean squared error between copy labels and accumulated copy mass."""
    labels = np.asarray(labels, dtype=copy_mass.dtype)
    if labels.shape != copy_mass.shape:
        raise ContractError(f"labels shape {labels.shape} != copy mass shape {copy_mass.shape}")
    diff = copy_mass - Tensor(labels)
    sq = diff * diff
    if mask is None:
        return T.tmean(sq)
    m = np.asarray(mask)
    return T.tsum(sq * Tensor(m.astype(copy_mass.dtype))) * (1.0 / m.sum())


def loss_pred(s: Tensor, labels, mask=None, eps: float = 1e-9) -> Tensor:
    """Binary cross-entropy of copy scores against labels, summed over tokens."""
    labels = np.asarray(labels, dtype=s.dtype)
    if labels.shape != s.shape:
        raise ContractError(f"labels shape {labels.shape} != score shape {s.shape}")
    pos = T.log(T.maximum(s, eps)) * Tensor(labels)
    neg = T.log(T.maximum(1.0 - s, eps)) * Tensor(1.0 - labels)
    total = pos + neg
    if mask is not None:
        total = total * Tensor(np.asarray(mask).astype(s.dtype))
    return T.tsum(total) * -1.0


def loss_all(l_ape, l_copy, l_pred, weights: LossWeights):
    """(1 - alpha) * (L_ape + lambda * L_copy) + alpha * L_pred.

    Works on floats and tensors alike; pass 0.0 for a disabled component.
    """
    return (1.0 - weights.alpha) * (l_ape + weights.lam * l_copy) + weights.alpha * l_pred


def compute_losses(
    trace: ForwardTrace,
    batch: Batch,
    weights: LossWeights,
    floor: float = 1e-9,
    use_copy: bool = True,
) -> LossTerms:
    """The three raw losses for one batch plus their weighted combination.

    Per-mt-token normalisation is applied to the copy and predictor terms
    here (the op-level functions keep the per-sentence equation forms).
    Disabled components enter as exact zeros; ``use_copy=False`` drops the
    copy-label pull (the joint-training switch) even when CopyNet runs.
    """
    ape = loss_ape(trace, batch, floor)
    n_mt = batch.mt_mask.sum()
    copy = 0.0
    if use_copy and trace.copy_mass is not None:
        copy = loss_copy(trace.copy_mass, batch.labels, batch.mt_mask)
    pred = 0.0
    if trace.s is not None:
        pred = loss_pred(trace.s, batch.labels, batch.mt_mask) * (1.0 / n_mt)
    return LossTerms(ape, copy, pred, loss_all(ape, copy, pred, weights))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def lr_schedule(step: int, d: int, warmup: int) -> float:
    """Inverse-square-root decay with a linear warmup ramp."""
    if step < 1:
        raise ContractError("schedule steps start at 1")
    return d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def for_model(cls, model: ApeModel, beta1=0.9, beta2=0.98, eps=1e-9) -> "OptimizerState":
        state = cls(beta1=beta1, beta2=beta2, eps=eps)
        for name, p in model.parameter_items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update; a missing gradient counts as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif np.isnan(g).any():
            raise FloatingPointError(f"NaN gradient in {name!r} at optimizer step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - (lr / bias1) * m / (np.sqrt(v / bias2) + state.eps)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(factor, dtype=p.grad.dtype)
    return norm


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ApeModel
    vocab: Vocab
    metrics: list
    state: OptimizerState


def ensure_labels(triplets) -> None:
    for t in triplets:
        if t.labels is None:
            t.labels = labeling.lcs_labels(t.mt, t.pe)


def batch_prediction_accuracy(trace: ForwardTrace, batch: Batch) -> float:
    if trace.s is None:
        return float("nan")
    predicted = trace.s.data >= 0.5
    hits = ((predicted == (batch.labels == 1)) & batch.mt_mask).sum()
    return float(hits / batch.mt_mask.sum())


def batch_token_accuracy(trace: ForwardTrace, batch: Batch) -> float:
    choice = trace.p_final.data.argmax(axis=-1)
    hits = ((choice == batch.targets) & batch.target_mask).sum()
    return float(hits / batch.target_mask.sum())


def train_loop(
    triplets,
    run: RunConfig,
    *,
    vocab: Optional[Vocab] = None,
    out_dir=None,
    resume_from=None,
    log=None,
) -> TrainResult:
    """Deterministic teacher-forced training under a fixed step budget.

    Checkpoints carry parameters, Adam moments and the step counter, so a
    resumed run reproduces the uninterrupted trajectory bit for bit (the
    batch schedule is a pure function of seed and epoch).
    """
    run.validate()
    ensure_labels(triplets)
    if vocab is None:
        vocab = build_vocab(triplets)
    cfg = run.model
    if cfg.vocab_size == 0:
        cfg.vocab_size = len(vocab)
    elif cfg.vocab_size != len(vocab):
        raise ConfigError(f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
    tcfg = run.train
    weights = LossWeights(tcfg.alpha, tcfg.lam)

    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model = _model_from_checkpoint(ckpt)
        state = _optimizer_from_checkpoint(ckpt, model, tcfg)
        start_step = state.step
    else:
        model = ApeModel(cfg, seed=run.seed)
        state = OptimizerState.for_model(model, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    params = model.parameter_items()
    use_copy = model.config.joint_training

    metrics: list = []
    step = 0
    epoch = 0
    while step < tcfg.steps:
        for batch in batch_iter(triplets, vocab, tcfg.token_budget, run.seed, epoch):
            step += 1
            if step > tcfg.steps:
                break
            if step <= start_step:
                continue
            rng = np.random.default_rng([run.seed, 7, step]) if cfg.dropout > 0 else None
            trace = model.forward_teacher_forced(batch, rng=rng)
            terms = compute_losses(trace, batch, weights, tcfg.prob_floor, use_copy=use_copy)
            for _, p in params:
                p.zero_grad()
            T.backward(terms.combined)
            clip_global_norm(params, tcfg.clip_norm)
            lr = tcfg.lr_scale * lr_schedule(step, cfg.d, tcfg.warmup)
            adam_step(params, state, lr)

            if step % tcfg.log_interval == 0 or step == tcfg.steps:
                record = {
                    "step": step,
                    "l_ape": _value(terms.ape),
                    "l_copy": _value(terms.copy),
                    "l_pred": _value(terms.pred),
                    "l_all": _value(terms.combined),
                    "pred_acc": batch_prediction_accuracy(trace, batch),
                    "tok_acc": batch_token_accuracy(trace, batch),
                    "lr": lr,
                }
                metrics.append(record)
                if log:
                    log(record)
            if out_dir and tcfg.checkpoint_interval and step % tcfg.checkpoint_interval == 0:
                _save(out_dir, model, state, run.seed, step)
        epoch += 1

    path = _save(out_dir, model, state, run.seed, state.step) if out_dir else None
    if out_dir:
        with open(Path(out_dir) / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for record in metrics:
                fh.write(json.dumps(record) + "\n")
        vocab.save(Path(out_dir) / "vocab.txt")
    return TrainResult(model, vocab, metrics, state)


def _value(term) -> float:
    return float(term.item()) if isinstance(term, Tensor) else float(term)


def _save(out_dir, model: ApeModel, state: OptimizerState, seed: int, step: int):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = {name: t.data for name, t in model.parameter_items()}
    for name in state.m:
        tensors[f"opt.m.{name}"] = state.m[name]
        tensors[f"opt.v.{name}"] = state.v[name]
    path = out_dir / "checkpoint.apc"
    save_checkpoint(path, model.config, tensors, meta={"step": step, "seed": seed})
    return path


def _model_from_checkpoint(ckpt: Checkpoint) -> ApeModel:
    from .checkpoint import restore_model

    return restore_model(ckpt, ApeModel)


def _optimizer_from_checkpoint(ckpt: Checkpoint, model: ApeModel, tcfg) -> OptimizerState:
    state = OptimizerState.for_model(model, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    state.step = int(ckpt.meta.get("step", 0))
    for name in state.m:
        m_key, v_key = f"opt.m.{name}", f"opt.v.{name}"
        if m_key in ckpt.tensors:
            state.m[name] = ckpt.tensors[m_key].astype(state.m[name].dtype)
            state.v[name] = ckpt.tensors[v_key].astype(state.v[name].dtype)
    return state
