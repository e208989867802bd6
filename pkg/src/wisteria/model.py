"""Model assembly: config validation, the layer stack, variants, forward.

Stack: embedding (no positional encoding), num_gcmb GCMB blocks, then
BiMamba+gated-MLP middle layers, then one attention layer, then an untied
linear head. Each layer group carries a residual connection; padding rows
are re-zeroed after the embedding and every layer so no pad content can
leak into valid positions (convs and scans read neighborhoods).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import (AttentionParams, GCMBParams, GatedMLPParams, attention,
                     dilation_schedule, gated_mlp, gcmb_block, init_attention,
                     init_gated_mlp, init_gcmb)
from .errors import ConfigError, DataError
from .ssm import BiMambaParams, bimamba, init_bimamba, trunc_normal
from .tensor import Tensor

VARIANTS = ("full", "no_fourier", "no_gcmb", "no_gcmb_no_gmlp")
ATTN_MODES = ("fope", "rope", "none")


@dataclass
class ModelConfig:
    vocab: int = 7
    dim: int = 64
    num_layers: int = 12
    num_gcmb: int = 5
    dilation_base: int = 3
    kernel_size: int = 9
    heads: int = 16
    attn_mode: str = "fope"
    variant: str = "full"
    train_len: int = 256
    state_dim: int = 16
    expand: int = 2
    conv_width: int = 4
    n_harmonics: int = 4
    theta: float = 10000.0
    gmlp_expand: int = 4
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if not 0 <= self.num_gcmb <= self.num_layers - 1:
            raise ConfigError(
                f"num_gcmb must satisfy 0 <= num_gcmb <= num_layers-1, "
                f"got num_gcmb={self.num_gcmb} with num_layers={self.num_layers}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 2 != 0:
            raise ConfigError(
                f"d_head must be even: dim {self.dim} / heads {self.heads} = {self.dim // self.heads}"
            )
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.dilation_base < 1:
            raise ConfigError(f"dilation_base must be >= 1, got {self.dilation_base}")
        if self.train_len < 2:
            raise ConfigError(f"train_len must be >= 2, got {self.train_len}")
        if self.attn_mode not in ATTN_MODES:
            raise ConfigError(f"attn_mode must be one of {ATTN_MODES}, got {self.attn_mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("state_dim", "expand", "conv_width", "n_harmonics", "gmlp_expand"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        return self


@dataclass
class MiddleLayer:
    """BiMamba feeding a gated MLP: y = gated_mlp(x + bimamba(x))."""

    bimamba: BiMambaParams
    gmlp: GatedMLPParams

    def params(self):
        for name, t in self.bimamba.params():
            yield f"bimamba.{name}", t
        for name, t in self.gmlp.params():
            yield f"gmlp.{name}", t


@dataclass
class BareLayer:
    """BiMamba only, normed: y = x + layernorm(bimamba(x))."""

    bimamba: BiMambaParams
    ln_scale: Tensor
    ln_shift: Tensor

    def params(self):
        for name, t in self.bimamba.params():
            yield f"bimamba.{name}", t
        yield "ln_scale", self.ln_scale
        yield "ln_shift", self.ln_shift


class Model:
    def __init__(self, cfg: ModelConfig, embedding: Tensor, layers: list,
                 head_w: Tensor, head_b: Tensor):
        self.cfg = cfg
        self.embedding = embedding
        self.layers = layers  # list of (kind, params)
        self.head_w = head_w
        self.head_b = head_b

    # -- parameter registry ------------------------------------------------

    def params(self):
        yield "embedding", self.embedding
        for i, (kind, p) in enumerate(self.layers):
            for name, t in p.params():
                yield f"layers.{i}.{kind}.{name}", t
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def no_decay_names(self) -> set:
        """Norm scales/shifts and biases are exempt from weight decay."""
        out = set()
        for name, _ in self.params():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_b") or leaf in ("b1", "b2", "ln_scale", "ln_shift"):
                out.add(name)
        return out

    def num_params(self) -> int:
        return sum(t.data.size for _, t in self.params())

    def layer_kinds(self) -> list:
        return [kind for kind, _ in self.layers]

    def zero_grads(self) -> None:
        for _, t in self.params():
            t.grad = None

    # -- forward -----------------------------------------------------------

    def _remask(self, h: Tensor, valid: np.ndarray | None) -> Tensor:
        if valid is None:
            return h
        return T.mul(h, Tensor(valid[..., None].astype(np.float64)))

    def hidden(self, ids: np.ndarray, valid_mask: np.ndarray | None = None) -> Tensor:
        """Final pre-head hidden states [B?, L, D]."""
        ids = np.asarray(ids)
        h = self._remask(T.embedding(self.embedding, ids), valid_mask)
        for kind, p in self.layers:
            if kind == "gcmb":
                h = T.add(h, gcmb_block(h, p, valid_mask))
            elif kind == "middle":
                h = gated_mlp(T.add(h, bimamba(h, p.bimamba, valid_mask)), p.gmlp)
            elif kind == "bare":
                h = T.add(h, T.layernorm(bimamba(h, p.bimamba, valid_mask),
                                         p.ln_scale, p.ln_shift))
            elif kind == "attn":
                h = T.add(h, attention(h, p, valid_mask))
            else:  # pragma: no cover - construction bug
                raise ConfigError(f"unknown layer kind {kind!r}")
            h = self._remask(h, valid_mask)
        return h

    def forward(self, ids: np.ndarray, valid_mask: np.ndarray | None = None) -> Tensor:
        h = self.hidden(ids, valid_mask)
        return T.add(T.matmul(h, self.head_w), self.head_b)

    def extract_embeddings(self, ids: np.ndarray, valid_mask: np.ndarray | None = None) -> np.ndarray:
        """Masked mean of final hidden states over valid positions: [B, D]."""
        ids = np.atleast_2d(np.asarray(ids))
        if valid_mask is None:
            from .data import PAD_ID

            valid_mask = ids != PAD_ID
        else:
            valid_mask = np.atleast_2d(np.asarray(valid_mask)).astype(bool)
        counts = valid_mask.sum(axis=1)
        if (counts == 0).any():
            bad = int(np.argmin(counts))
            raise DataError(f"all-padding sequence at batch row {bad}")
        with T.no_grad():
            h = self.hidden(ids, valid_mask).data
        pooled = (h * valid_mask[..., None]).sum(axis=1) / counts[:, None]
        return pooled


def build_model(cfg: ModelConfig) -> Model:
    """Deterministic construction: same cfg (incl. seed) gives bit-identical params."""
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))

    def p(arr):
        return Tensor(arr, requires_grad=True)

    embedding = p(trunc_normal(rng, (cfg.vocab, cfg.dim)))
    layers: list = []

    n_gcmb = 0 if cfg.variant in ("no_gcmb", "no_gcmb_no_gmlp") else cfg.num_gcmb
    has_attn = cfg.variant != "no_fourier" and cfg.attn_mode != "none"
    n_middle = cfg.num_layers - n_gcmb - (1 if has_attn else 0)

    if n_gcmb > 0:
        sched = dilation_schedule(cfg.dilation_base, n_gcmb)
        for i in range(n_gcmb):
            dil_a = sched[i]
            dil_b = max(1, dil_a // cfg.dilation_base)
            layers.append(("gcmb", init_gcmb(rng, cfg.dim, cfg.kernel_size, dil_a, dil_b,
                                             cfg.expand, cfg.state_dim, cfg.conv_width)))
    for _ in range(n_middle):
        if cfg.variant == "no_gcmb_no_gmlp":
            layers.append(("bare", BareLayer(
                bimamba=init_bimamba(rng, cfg.dim, cfg.expand, cfg.state_dim, cfg.conv_width),
                ln_scale=p(np.ones(cfg.dim)),
                ln_shift=p(np.zeros(cfg.dim)),
            )))
        else:
            layers.append(("middle", MiddleLayer(
                bimamba=init_bimamba(rng, cfg.dim, cfg.expand, cfg.state_dim, cfg.conv_width),
                gmlp=init_gated_mlp(rng, cfg.dim, cfg.gmlp_expand * cfg.dim),
            )))
    if has_attn:
        layers.append(("attn", init_attention(rng, cfg.dim, cfg.heads, cfg.attn_mode,
                                              cfg.train_len, cfg.n_harmonics, cfg.theta)))

    head_w = p(trunc_normal(rng, (cfg.dim, cfg.vocab)))
    head_b = p(np.zeros(cfg.vocab))
    return Model(cfg, embedding, layers, head_w, head_b)


def build_variant(cfg: ModelConfig, variant: str) -> Model:
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return build_model(replace(cfg, variant=variant))
