"""Vision transformer with corruptible positional embeddings.

Parameters live in flat ``dict[str, Tensor]`` trees (``"blocks.0.attn.qkv.weight"``
etc.) so student and teacher copies, EMA updates and checkpoints all work on
plain name -> array maps. Linear weights are stored as (in, out).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .data import TokenBatch
from .rng import ConfigError, RngStream
from .tensor import Tensor, get_default_dtype

Params = dict[str, Tensor]

STUDENT_ONLY_PREFIXES = ("pred_head.", "aux_head.")


class PlanError(IndexError):
    """A positional index falls outside the positional table."""


class StructureError(ValueError):
    """Two parameter trees do not line up."""


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    token_dim: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    head_hidden_dim: int = 256
    proj_dim: int = 64
    pos_embedding_kind: str = "learned"  # learned | sinusoidal
    pos_init: str = "normal"  # learned table start: normal (std 0.02) | sincos
    patch_embed_frozen: bool = True
    gelu_exact: bool = False
    head_norm: str = "batch"  # batch | none
    aux_outputs: int = 1  # 1 for binary variants, n_positions for position targets
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.token_dim % self.heads:
            raise ConfigError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.proj_dim < 1:
            raise ConfigError("proj_dim must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.pos_embedding_kind not in ("learned", "sinusoidal"):
            raise ConfigError(f"unknown pos_embedding_kind '{self.pos_embedding_kind}'")
        if self.pos_init not in ("normal", "sincos"):
            raise ConfigError(f"unknown pos_init '{self.pos_init}'")
        if self.head_norm not in ("batch", "none"):
            raise ConfigError(f"unknown head_norm '{self.head_norm}'")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_positions(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def mlp_dim(self) -> int:
        return self.token_dim * self.mlp_ratio


def expected_param_count(cfg: ViTConfig, student: bool = True) -> int:
    """Trainable-or-frozen scalar count from config arithmetic (fixed sin-cos table excluded)."""
    d, hh, g, m = cfg.token_dim, cfg.head_hidden_dim, cfg.proj_dim, cfg.mlp_dim
    total = cfg.patch_dim * d + d + d  # patch embed + cls
    if cfg.pos_embedding_kind == "learned":
        total += cfg.n_positions * d
    block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d)
    total += cfg.depth * block + 2 * d
    # with batch norm: no bias before a norm, gamma/beta after both hidden layers
    extra = 4 * hh if cfg.head_norm == "batch" else 2 * hh + g
    total += d * hh + hh * hh + hh * g + extra
    if student:
        total += g * hh + hh * hh + hh * g + g + (4 * hh if cfg.head_norm == "batch" else 2 * hh)
        total += d * cfg.aux_outputs + cfg.aux_outputs
    return total


def count_params(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def sincos_table(cfg: ViTConfig) -> np.ndarray:
    """Fixed 2-D sin-cos embedding, one row per grid position.

    For grid cell (r, c) with frequencies w_k = 10000^(-k/(D/4)), k < D/4, the
    row is [sin(r w), cos(r w), sin(c w), cos(c w)]; every row therefore has
    squared norm D/2.
    """
    d = cfg.token_dim
    if d % 4:
        raise ConfigError("sinusoidal embeddings need token_dim divisible by 4")
    q = d // 4
    omega = 1.0 / 10000 ** (np.arange(q) / q)
    rows, cols = np.divmod(np.arange(cfg.n_positions), cfg.grid)
    ar = rows[:, None] * omega[None]
    ac = cols[:, None] * omega[None]
    return np.concatenate([np.sin(ar), np.cos(ar), np.sin(ac), np.cos(ac)], axis=1)


def _trunc_normal(gen: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _xavier_uniform(gen: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (n_in + n_out))
    return gen.uniform(-bound, bound, size=(n_in, n_out))


def init_params(cfg: ViTConfig, rng: RngStream) -> Params:
    """Student parameters: Xavier-uniform linear weights, zero biases, truncated-normal
    CLS and position rows, zero auxiliary head."""
    gen = rng.gen
    dtype = get_default_dtype()
    d, m, hh, g = cfg.token_dim, cfg.mlp_dim, cfg.head_hidden_dim, cfg.proj_dim
    raw: dict[str, np.ndarray] = {}

    def linear(name, n_in, n_out, zero=False, bias=True):
        raw[f"{name}.weight"] = np.zeros((n_in, n_out)) if zero else _xavier_uniform(gen, n_in, n_out)
        if bias:
            raw[f"{name}.bias"] = np.zeros(n_out)

    def norm(name, width=d):
        raw[f"{name}.gamma"] = np.ones(width)
        raw[f"{name}.beta"] = np.zeros(width)

    linear("patch_embed", cfg.patch_dim, d)
    raw["cls_token"] = _trunc_normal(gen, (d,))
    if cfg.pos_embedding_kind == "learned":
        raw["pos_embed"] = sincos_table(cfg) if cfg.pos_init == "sincos" else _trunc_normal(gen, (cfg.n_positions, d))
    for i in range(cfg.depth):
        norm(f"blocks.{i}.norm1")
        linear(f"blocks.{i}.attn.qkv", d, 3 * d)
        linear(f"blocks.{i}.attn.proj", d, d)
        norm(f"blocks.{i}.norm2")
        linear(f"blocks.{i}.mlp.fc1", d, m)
        linear(f"blocks.{i}.mlp.fc2", m, d)
    norm("final_norm")
    bn = cfg.head_norm == "batch"
    for head, n_in in (("proj_head", d), ("pred_head", g)):
        linear(f"{head}.fc1", n_in, hh, bias=not bn)
        if bn:
            norm(f"{head}.bn1", hh)
        linear(f"{head}.fc2", hh, hh, bias=not bn)
        if bn:
            norm(f"{head}.bn2", hh)
        linear(f"{head}.fc3", hh, g, bias=not bn or head == "pred_head")
    linear("aux_head", d, cfg.aux_outputs, zero=True)

    params = {}
    for name, value in raw.items():
        frozen = cfg.patch_embed_frozen and name.startswith("patch_embed.")
        params[name] = Tensor(value.astype(dtype), requires_grad=not frozen)
    return params


def make_teacher(student: Params) -> Params:
    """Exact, non-trainable copy of the student minus its student-only heads."""
    return {
        k: Tensor(v.data.copy(), requires_grad=False)
        for k, v in student.items()
        if not k.startswith(STUDENT_ONLY_PREFIXES)
    }


def positional_table(params: Params, cfg: ViTConfig) -> Tensor:
    """(N + 1, D) table whose row 0 is the all-zero 'no location' embedding."""
    if cfg.pos_embedding_kind == "learned":
        zero = Tensor(np.zeros((1, cfg.token_dim), dtype=params["pos_embed"].dtype))
        return ops.concat([zero, params["pos_embed"]], axis=0)
    dtype = params["cls_token"].dtype
    table = np.concatenate([np.zeros((1, cfg.token_dim)), sincos_table(cfg)]).astype(dtype)
    return Tensor(table)


def embed_tokens(params: Params, cfg: ViTConfig, tiles: np.ndarray, positions: np.ndarray, strip_positions: bool = False) -> Tensor:
    """patch_embed(tile) + pos_table[position] per token, CLS prepended at index 0.

    ``strip_positions`` zeroes every positional contribution (bag-of-features input).
    """
    b, t, f = tiles.shape
    if f != cfg.patch_dim:
        raise ValueError(f"tile width {f} != patch_dim {cfg.patch_dim}")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (b, t):
        raise PlanError(f"positions shape {positions.shape} != tokens {(b, t)}")
    if positions.size and (positions.min() < 0 or positions.max() > cfg.n_positions):
        raise PlanError(f"position index outside [0, {cfg.n_positions}]")
    dtype = params["cls_token"].dtype
    x = ops.linear(Tensor(tiles.astype(dtype, copy=False)), params["patch_embed.weight"], params["patch_embed.bias"])
    if not strip_positions:
        x = x + ops.take_rows(positional_table(params, cfg), positions)
    cls = ops.broadcast_to(ops.reshape(params["cls_token"], (1, 1, cfg.token_dim)), (b, 1, cfg.token_dim))
    return ops.concat([cls, x], axis=1)


def attention(x: Tensor, params: Params, prefix: str, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    qkv = ops.linear(x, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = ops.transpose(ops.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    out = ops.matmul(ops.softmax(scores, axis=-1), v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return ops.linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def encoder_forward(params: Params, cfg: ViTConfig, seq: Tensor) -> Tensor:
    """Pre-norm transformer blocks then final norm. Output index 0 is the CLS token."""
    x = seq
    approx = not cfg.gelu_exact
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        h = ops.layer_norm(x, params[f"{p}.norm1.gamma"], params[f"{p}.norm1.beta"], cfg.ln_eps)
        x = x + attention(h, params, f"{p}.attn", cfg.heads)
        h = ops.layer_norm(x, params[f"{p}.norm2.gamma"], params[f"{p}.norm2.beta"], cfg.ln_eps)
        h = ops.gelu(ops.linear(h, params[f"{p}.mlp.fc1.weight"], params[f"{p}.mlp.fc1.bias"]), approx)
        x = x + ops.linear(h, params[f"{p}.mlp.fc2.weight"], params[f"{p}.mlp.fc2.bias"])
    return ops.layer_norm(x, params["final_norm.gamma"], params["final_norm.beta"], cfg.ln_eps)


def encode(params: Params, cfg: ViTConfig, batch: TokenBatch, strip_positions: bool = False) -> Tensor:
    return encoder_forward(params, cfg, embed_tokens(params, cfg, batch.tiles, batch.positions, strip_positions))


def _mlp3(x: Tensor, params: Params, head: str, approx: bool) -> Tensor:
    """Three linear layers with GELU between them.

    With batch norm, each hidden linear is followed by a batch norm and the
    projection head ends in an affine-free batch norm.
    """
    bn = f"{head}.bn1.gamma" in params
    for i in (1, 2):
        x = ops.linear(x, params[f"{head}.fc{i}.weight"], params.get(f"{head}.fc{i}.bias"))
        if bn:
            x = ops.batch_norm(x, params[f"{head}.bn{i}.gamma"], params[f"{head}.bn{i}.beta"])
        x = ops.gelu(x, approx)
    x = ops.linear(x, params[f"{head}.fc3.weight"], params.get(f"{head}.fc3.bias"))
    if bn and head == "proj_head":
        x = ops.batch_norm(x)
    return x


def heads_forward(params: Params, cfg: ViTConfig, cls_out: Tensor, is_student: bool, use_predictor: Optional[bool] = None) -> Tensor:
    """L2-normalised contrastive embedding of the CLS output.

    The student path applies projection then prediction heads, the teacher
    path projection only. ``use_predictor=False`` drops the predictor on the
    student (SimCLR mode).
    """
    approx = not cfg.gelu_exact
    z = _mlp3(cls_out, params, "proj_head", approx)
    if use_predictor is None:
        use_predictor = is_student
    if use_predictor:
        if "pred_head.fc1.weight" not in params:
            raise StructureError("predictor head requested on a tree without one")
        z = _mlp3(z, params, "pred_head", approx)
    return ops.l2_normalize(z, axis=-1)


def cls_output(token_outs: Tensor) -> Tensor:
    return token_outs[:, 0, :]


def aux_logits(params: Params, token_outs: Tensor) -> Tensor:
    """Per-token outputs of the auxiliary head on non-CLS tokens: (B, T, aux_outputs)."""
    if "aux_head.weight" not in params:
        raise StructureError("auxiliary head missing: token logits need the student tree")
    return ops.linear(token_outs[:, 1:, :], params["aux_head.weight"], params["aux_head.bias"])


def dilemma_logits(params: Params, token_outs: Tensor) -> Tensor:
    """One mismatch logit per kept token (CLS excluded): (B, T)."""
    logits = aux_logits(params, token_outs)
    if logits.shape[-1] != 1:
        raise StructureError("dilemma logits need a single-output auxiliary head")
    return ops.reshape(logits, logits.shape[:-1])


def ema_update(teacher: Params, student: Params, momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place, for every teacher entry."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum {momentum} outside [0, 1]")
    for name, t in teacher.items():
        s = student.get(name)
        if s is None or s.shape != t.shape:
            raise StructureError(f"teacher entry '{name}' has no matching student parameter")
    for name, t in teacher.items():
        s = student[name].data
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            t.data[...] = s
        else:
            t.data *= momentum
            t.data += (1.0 - momentum) * s


def params_digest(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None
