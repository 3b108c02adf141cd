"""Optimiser, schedules, the training step and the pretraining loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import TrainConfig
from .data import (
    AssembledBatch,
    AugmentConfig,
    ImageDataset,
    assemble_batch,
    augment_pair,
    gen_shape_arrangement,
    load_cifar10,
    load_dataset,
)
from .losses import LossBundle, aux_loss, contrastive_ce
from .model import (
    Params,
    ViTConfig,
    cls_output,
    ema_update,
    encode,
    heads_forward,
    init_params,
    make_teacher,
    zero_grads,
)
from .rng import derive_stream, sample_corruption_plan, sample_sparsity
from .tensor import Tensor, debug_mode, no_grad

log = logging.getLogger(__name__)

TEST_SAMPLE_OFFSET = 1 << 32


class NonFiniteGradientError(FloatingPointError):
    """A gradient contains NaN/Inf; names the parameter."""


class TrainingDivergedError(FloatingPointError):
    """The loss became non-finite; carries the last good checkpoint path."""

    def __init__(self, message: str, last_checkpoint: Optional[str] = None):
        super().__init__(message if last_checkpoint is None else f"{message} (last good checkpoint: {last_checkpoint})")
        self.last_checkpoint = last_checkpoint


# -- optimiser ------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Params,
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.05,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW update in place: bias-corrected moments, decoupled weight decay.

    Parameters without ``requires_grad`` (frozen) or without a gradient this
    step are left untouched.
    """
    b1, b2 = betas
    trainable = [(n, p) for n, p in params.items() if p.requires_grad and p.grad is not None]
    for name, p in trainable:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter '{name}'")
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in trainable:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# -- schedules --------------------------------------------------------------------

def lr_schedule(step: int, total: int, warmup: int, lr_base: float, batch_multiplier: float = 1.0) -> float:
    """Linear warmup from 0, cosine decay to 0 at ``total``; scaled by the batch multiplier."""
    peak = lr_base * batch_multiplier
    if step < warmup:
        return peak * step / warmup
    span = max(total - warmup, 1)
    frac = min(max((step - warmup) / span, 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def ema_momentum_schedule(step: int, total: int, m_base: float) -> float:
    """Cosine increase of the teacher momentum from ``m_base`` to 1."""
    if not 0.0 < m_base <= 1.0:
        raise ValueError("m_base must lie in (0, 1]")
    frac = min(max(step / max(total, 1), 0.0), 1.0)
    return 1.0 - (1.0 - m_base) * (math.cos(math.pi * frac) + 1.0) / 2.0


# -- state / records ----------------------------------------------------------------

@dataclass
class TrainState:
    student: Params
    teacher: Optional[Params]
    optim: AdamWState
    vit: ViTConfig


def init_train_state(cfg: TrainConfig) -> TrainState:
    student = init_params(cfg.vit, derive_stream(cfg.master_seed, "init"))
    if cfg.loss_variant == "dilemma" and 0.0 < cfg.theta < 1.0:
        # start the mismatch head at the label prior; from a zero bias the backbone absorbs the prior
        # as a shared token component and token diversity collapses before any per-token cue is found
        student["aux_head.bias"].data[:] = np.log(cfg.theta / (1.0 - cfg.theta))
    teacher = make_teacher(student) if cfg.mode == "teacher-student" else None
    return TrainState(student, teacher, AdamWState(), cfg.vit)


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    sparsity_drawn: float
    batch_size: int
    loss_union: float
    loss_dilemma: Optional[float]
    loss_contrastive: float
    md_accuracy: Optional[float]
    lr: float
    ema_m: Optional[float]
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def deterministic_fields(self) -> dict:
        out = asdict(self)
        out.pop("wall_ms")
        return out


# -- losses over an assembled batch ---------------------------------------------------

def compute_losses(
    student: Params,
    teacher: Optional[Params],
    vit: ViTConfig,
    batch: AssembledBatch,
    cfg: TrainConfig,
) -> LossBundle:
    """Forward every encoder pass in ``batch`` and combine the losses.

    Teacher passes run without gradient tracking. The auxiliary (mismatch)
    term is averaged over student passes and left out of the union on dense
    iterations or when lambda is 0.
    """
    simclr = cfg.mode == "simclr"
    student_outs = [encode(student, vit, sb) for sb in batch.students]
    student_emb = [
        heads_forward(student, vit, cls_output(o), is_student=True, use_predictor=not simclr) for o in student_outs
    ]
    teacher_emb = []
    if batch.teachers:
        if teacher is None:
            raise ValueError("batch has teacher passes but no teacher parameters")
        with no_grad():
            teacher_emb = [
                heads_forward(teacher, vit, cls_output(encode(teacher, vit, tb)), is_student=False)
                for tb in batch.teachers
            ]

    contrastive = None
    for s_idx, kind, t_idx in batch.pairs:
        target = teacher_emb[t_idx] if kind == "teacher" else student_emb[t_idx]
        term = contrastive_ce(student_emb[s_idx], target, cfg.tau)
        contrastive = term if contrastive is None else contrastive + term

    aux_terms, correct = [], []
    for out, sb in zip(student_outs, batch.students):
        if sb.aux_mask.sum() == 0:
            continue
        loss, corr = aux_loss(cfg.loss_variant, student, out, sb.aux_labels, sb.aux_mask)
        aux_terms.append(loss)
        if corr is not None:
            correct.append(corr[sb.aux_mask.astype(bool)])
    dilemma = None
    for term in aux_terms:
        dilemma = term if dilemma is None else dilemma + term
    if dilemma is not None and len(aux_terms) > 1:
        dilemma = dilemma * (1.0 / len(aux_terms))

    active = dilemma is not None and not batch.is_dense and cfg.lambda_dilemma > 0
    union = contrastive + dilemma * cfg.lambda_dilemma if active else contrastive
    md_acc = float(np.concatenate(correct).mean()) if correct else float("nan")
    if dilemma is None:
        dilemma = Tensor(np.array(np.nan, dtype=contrastive.dtype))
    return LossBundle(dilemma, contrastive, union, md_acc, active)


def _optional(x: float) -> Optional[float]:
    return None if x is None or not math.isfinite(x) else float(x)


def train_step(
    state: TrainState,
    batch: AssembledBatch,
    cfg: TrainConfig,
    *,
    lr: float,
    ema_m: Optional[float],
    iteration: int = 0,
    epoch: int = 0,
    last_checkpoint: Optional[str] = None,
) -> MetricsRecord:
    """Forward, backward, AdamW update and teacher EMA for one iteration."""
    start = time.perf_counter()
    zero_grads(state.student)
    with debug_mode(cfg.debug):
        bundle = compute_losses(state.student, state.teacher, state.vit, batch, cfg)
    union = bundle.union.item()
    if not math.isfinite(union):
        raise TrainingDivergedError(f"non-finite loss at iteration {iteration}", last_checkpoint)
    bundle.union.backward()
    adamw_step(state.student, state.optim, lr, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    if state.teacher is not None and ema_m is not None:
        ema_update(state.teacher, state.student, ema_m)
    zero_grads(state.student)
    return MetricsRecord(
        iteration=iteration,
        epoch=epoch,
        sparsity_drawn=batch.sparsity,
        batch_size=batch.batch_size,
        loss_union=union,
        loss_dilemma=_optional(bundle.dilemma.item()),
        loss_contrastive=bundle.contrastive.item(),
        md_accuracy=_optional(bundle.md_accuracy),
        lr=lr,
        ema_m=ema_m if state.teacher is not None else None,
        wall_ms=(time.perf_counter() - start) * 1e3,
    )


# -- iteration planning and batch building ---------------------------------------------

@dataclass
class IterationPlan:
    epoch: int
    index_in_epoch: int
    sparsity: float
    multiplier: int
    sample_indices: np.ndarray


def plan_iterations(cfg: TrainConfig, n_samples: int) -> list[IterationPlan]:
    """Shuffle each epoch and cut it into batches of base_batch x drawn multiplier.

    A trailing chunk of fewer than 2 samples is dropped (contrastive needs 2).
    """
    plans: list[IterationPlan] = []
    for epoch in range(cfg.epochs):
        order = derive_stream(cfg.master_seed, "shuffle", epoch).gen.permutation(n_samples)
        pos, k = 0, 0
        while pos < n_samples:
            sparsity, mult = sample_sparsity(cfg.schedule, derive_stream(cfg.master_seed, "schedule", epoch, k))
            idx = order[pos:pos + cfg.base_batch * mult]
            pos += len(idx)
            if len(idx) < 2:
                break
            plans.append(IterationPlan(epoch, k, sparsity, mult, idx))
            k += 1
    return plans


def build_batch(cfg: TrainConfig, dataset: ImageDataset, it: IterationPlan, aug: Optional[AugmentConfig] = None) -> AssembledBatch:
    aug = cfg.aug if aug is None else aug
    n = cfg.vit.n_positions
    pairs, plans, second, flips = [], [], [], []
    for i in it.sample_indices:
        i = int(i)
        pairs.append(augment_pair(dataset.images[i], derive_stream(cfg.master_seed, "aug", it.epoch, i), aug))
        stream = derive_stream(cfg.master_seed, "corrupt", it.epoch, i)
        plans.append(sample_corruption_plan(n, it.sparsity, cfg.theta, stream))
        second.append(sample_corruption_plan(n, it.sparsity, cfg.theta, stream))
        flips.append(derive_stream(cfg.master_seed, "flip", it.epoch, i))
    return assemble_batch(
        pairs,
        plans,
        patch_size=cfg.vit.patch_size,
        variant=cfg.loss_variant,
        mode=cfg.mode,
        symmetric=cfg.symmetric,
        second_plans=second,
        flip_rngs=flips if cfg.loss_variant == "flip" else None,
    )


# -- datasets ----------------------------------------------------------------------------

def load_datasets(cfg: TrainConfig) -> tuple[ImageDataset, ImageDataset]:
    d = cfg.data
    if d.source == "synthetic":
        common = dict(grid=cfg.vit.grid, n_classes=d.n_classes, tile_size=cfg.vit.patch_size, motif=d.motif, noise=d.noise)
        train = gen_shape_arrangement(d.synth_seed, d.n_per_class, **common)
        test = gen_shape_arrangement(d.synth_seed, d.test_per_class, sample_offset=TEST_SAMPLE_OFFSET, **common)
        return train, test
    if d.source == "cifar10":
        return load_cifar10(d.path)
    train = load_dataset(Path(d.path) / "train.dlma")
    test = load_dataset(Path(d.path) / "test.dlma")
    return train, test


# -- full run -------------------------------------------------------------------------------

@dataclass
class RunResult:
    state: TrainState
    records: list[MetricsRecord]
    checkpoint: Optional[Path]


def run_pretraining(
    cfg: TrainConfig,
    out_dir=None,
    dataset: Optional[ImageDataset] = None,
    max_iterations: Optional[int] = None,
) -> RunResult:
    """Epoch loop with one sparsity draw per iteration.

    Writes ``resolved.cfg``, ``metrics.jsonl`` (one record per iteration) and
    checkpoints into ``out_dir`` when given.
    """
    from .checkpoint import save_checkpoint

    if dataset is None:
        dataset, _ = load_datasets(cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.cfg").write_text(cfg.to_text())
        metrics_fh = open(out / "metrics.jsonl", "w")

    state = init_train_state(cfg)
    iterations = plan_iterations(cfg, len(dataset))
    if max_iterations is not None:
        iterations = iterations[:max_iterations]
    total = len(iterations)
    warmup = int(round(cfg.warmup_epochs * total / cfg.epochs))
    records: list[MetricsRecord] = []
    last_ckpt: Optional[str] = None
    try:
        for step, it in enumerate(iterations):
            batch = build_batch(cfg, dataset, it)
            lr = lr_schedule(step, total, warmup, cfg.lr_base, it.multiplier)
            ema_m = ema_momentum_schedule(step, total, cfg.ema_momentum_base) if state.teacher is not None else None
            rec = train_step(state, batch, cfg, lr=lr, ema_m=ema_m, iteration=step, epoch=it.epoch, last_checkpoint=last_ckpt)
            records.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(rec.to_json() + "\n")
                metrics_fh.flush()
            epoch_done = step + 1 == total or iterations[step + 1].epoch != it.epoch
            if epoch_done:
                log.info("epoch %d done: union=%.4f md_acc=%s", it.epoch, rec.loss_union, rec.md_accuracy)
                if out is not None and cfg.checkpoint_every and (it.epoch + 1) % cfg.checkpoint_every == 0:
                    path = out / f"checkpoint_epoch{it.epoch + 1:03d}.dlck"
                    save_checkpoint(path, state, cfg, step + 1)
                    last_ckpt = str(path)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    final = None
    if out is not None:
        final = out / "final.dlck"
        save_checkpoint(final, state, cfg, total)
    return RunResult(state, records, final)


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- gradient check of the full union loss on a toy model -----------------------------------

def toy_config(variant: str = "dilemma", theta: float = 0.25, head_norm: str = "none") -> TrainConfig:
    """Tiny model for gradient checks. Batch norm is off by default: over two
    samples it maps every feature to +-1, so head gradients vanish exactly."""
    vit = ViTConfig(
        image_size=8, patch_size=2, token_dim=8, depth=1, heads=2, mlp_ratio=2,
        head_hidden_dim=8, proj_dim=4, patch_embed_frozen=False, head_norm=head_norm,
    )
    return TrainConfig(
        base_batch=2, epochs=1, symmetric=False, loss_variant=variant, vit=vit, theta=theta,
        schedule=_single_entry(0.5, 1),
    )


def _single_entry(ratio: float, mult: int):
    from .rng import SparsitySchedule

    return SparsitySchedule(((ratio, mult),))


def toy_batch(cfg: TrainConfig, seed: int = 0, sparsity: float = 0.5, n: int = 2) -> AssembledBatch:
    gen = np.random.default_rng(seed)
    images = gen.uniform(0, 1, size=(n, cfg.vit.image_size, cfg.vit.image_size, 3)).astype(np.float32)
    images[1::2] = 1.0 - images[1::2] ** 4  # keep neighbouring samples far apart
    ds = ImageDataset(images, np.zeros(n))
    it = IterationPlan(0, 0, sparsity, 1, np.arange(n))
    return build_batch(cfg, ds, it)


def toy_union_gradient_errors(
    seed: int = 0, h: float = 1e-5, variant: str = "dilemma", n_samples: int = 2, head_norm: str = "none"
) -> dict[str, float]:
    """Finite-difference error of d(union)/d(param) for every student parameter.

    Two samples by default, N=16, float64. The teacher is a perturbed copy so
    the contrastive targets differ from the student's own embeddings.
    """
    from .gradcheck import finite_diff_check
    from .tensor import precision

    cfg = toy_config(variant, head_norm=head_norm)
    with precision(np.float64):
        state = init_train_state(cfg)
        gen = np.random.default_rng(seed + 1)
        for p in state.student.values():
            p.data += gen.normal(0, 0.5, size=p.shape)  # move off the zero-init aux head
        teacher = {k: Tensor(v.data + gen.normal(0, 0.5, size=v.shape)) for k, v in state.teacher.items()}
        batch = toy_batch(cfg, seed, n=n_samples)
        errors = {}
        for name, param in state.student.items():
            def f(x, name=name):
                params = dict(state.student)
                params[name] = x
                return compute_losses(params, teacher, cfg.vit, batch, cfg).union

            errors[name] = finite_diff_check(f, param.data, h)
    return errors
