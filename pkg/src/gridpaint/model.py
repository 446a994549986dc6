"""Compact cross-modal transformer over grid cells and caption tokens.

Sequence layout is grid cells first, then CLS, words, EOS (padded). The grid
side embeds either discrete cluster ids or continuous features; masked
positions are swapped for learned MASK embeddings before encoding, so the
encoder never sees masked content. Heads are two-layer (affine, GeLU, layer
norm, affine) with the visual heads sharing their first layer; final affines
start at zero so untrained logits are exactly uniform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenes import MASK, TEXT_VOCAB_SIZE
from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    scale,
    sigmoid,
    slice_axis1,
    softmax,
    transpose,
    where_mask,
)


@dataclass
class ModelConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    text_vocab: int = TEXT_VOCAB_SIZE
    visual_vocab: int = 32
    grid_n: int = 4
    feature_dim: int = 16
    max_text_len: int = 16
    architecture: str = "single_stream"  # or "two_stream"
    visual_mode: str = "discrete"  # or "continuous"
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.architecture not in ("single_stream", "two_stream"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.visual_mode not in ("discrete", "continuous"):
            raise ValueError(f"unknown visual_mode {self.visual_mode!r}")

    @property
    def grid_cells(self) -> int:
        return self.grid_n * self.grid_n


@dataclass
class EncoderOutputs:
    h_grid: Tensor  # (B, T, d_model)
    h_text: Tensor  # (B, L-1, d_model): w_1 .. EOS and padding
    h_cls: Tensor   # (B, d_model)


class CrossModalModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._build(rng)

    # -- parameters ---------------------------------------------------------

    def _param(self, name, shape, rng, std=0.02, zero=False, one=False):
        if zero:
            data = np.zeros(shape, dtype=np.float32)
        elif one:
            data = np.ones(shape, dtype=np.float32)
        else:
            data = rng.normal(0.0, std, shape).astype(np.float32)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def _build_block(self, prefix, rng):
        d = self.config.d_model
        for nm in ("q", "k", "v", "o"):
            self._param(f"{prefix}.{nm}_w", (d, d), rng)
            self._param(f"{prefix}.{nm}_b", (d,), rng, zero=True)
        self._param(f"{prefix}.ln1_g", (d,), rng, one=True)
        self._param(f"{prefix}.ln1_b", (d,), rng, zero=True)
        self._param(f"{prefix}.ffn_w1", (d, 4 * d), rng)
        self._param(f"{prefix}.ffn_b1", (4 * d,), rng, zero=True)
        self._param(f"{prefix}.ffn_w2", (4 * d, d), rng)
        self._param(f"{prefix}.ffn_b2", (d,), rng, zero=True)
        self._param(f"{prefix}.ln2_g", (d,), rng, one=True)
        self._param(f"{prefix}.ln2_b", (d,), rng, zero=True)

    def _build(self, rng):
        cfg = self.config
        d = cfg.d_model
        self._param("text.tok", (cfg.text_vocab, d), rng)
        self._param("text.pos", (cfg.max_text_len, d), rng)
        self._param("text.ln_g", (d,), rng, one=True)
        self._param("text.ln_b", (d,), rng, zero=True)

        self._param("grid.tok", (cfg.visual_vocab, d), rng)
        self._param("grid.proj_w", (cfg.feature_dim, d), rng)
        self._param("grid.proj_b", (d,), rng, zero=True)
        self._param("grid.pos", (cfg.grid_cells, d), rng)
        self._param("grid.mask_vec", (d,), rng)
        self._param("grid.ln_g", (d,), rng, one=True)
        self._param("grid.ln_b", (d,), rng, zero=True)

        if cfg.architecture == "single_stream":
            for i in range(cfg.layers):
                self._build_block(f"enc{i}", rng)
        else:
            for i in range(cfg.layers):
                self._build_block(f"text{i}", rng)
                self._build_block(f"grid{i}", rng)
            for i in range(cfg.layers):
                self._build_block(f"xtext{i}", rng)
                self._build_block(f"xgrid{i}", rng)

        # visual head: first layer shared between cluster-id and regression
        self._param("vis.w1", (d, d), rng)
        self._param("vis.b1", (d,), rng, zero=True)
        self._param("vis.ln_g", (d,), rng, one=True)
        self._param("vis.ln_b", (d,), rng, zero=True)
        self._param("vis.ccc_w", (d, cfg.visual_vocab), rng, zero=True)
        self._param("vis.ccc_b", (cfg.visual_vocab,), rng, zero=True)
        self._param("vis.mvfr_w", (d, cfg.feature_dim), rng, zero=True)
        self._param("vis.mvfr_b", (cfg.feature_dim,), rng, zero=True)

        self._param("mlm.w1", (d, d), rng)
        self._param("mlm.b1", (d,), rng, zero=True)
        self._param("mlm.ln_g", (d,), rng, one=True)
        self._param("mlm.ln_b", (d,), rng, zero=True)
        self._param("mlm.out_w", (d, cfg.text_vocab), rng, zero=True)
        self._param("mlm.out_b", (cfg.text_vocab,), rng, zero=True)

        self._param("itm.w1", (d, d), rng)
        self._param("itm.b1", (d,), rng, zero=True)
        self._param("itm.ln_g", (d,), rng, one=True)
        self._param("itm.ln_b", (d,), rng, zero=True)
        self._param("itm.out_w", (d, 1), rng, zero=True)
        self._param("itm.out_b", (1,), rng, zero=True)

    def parameters(self):
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, tensors: dict):
        for name, p in self.params.items():
            arr = tensors[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = np.array(arr, dtype=np.float32)

    # -- embedding ----------------------------------------------------------

    def embed_text(self, tokens: np.ndarray, text_mask=None) -> Tensor:
        """(B, L) token ids -> (B, L, d); masked ids become the MASK token."""
        p = self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if text_mask is not None:
            tokens = np.where(np.asarray(text_mask, bool), MASK, tokens)
        e = embedding(p["text.tok"], tokens)
        pos = embedding(p["text.pos"], np.arange(tokens.shape[1]))
        return layer_norm(add(e, pos), p["text.ln_g"], p["text.ln_b"])

    def embed_grid(self, ids_or_features, grid_mask=None) -> Tensor:
        """Discrete: (B, T) cluster ids; continuous: (B, T, feature_dim)."""
        p = self.params
        cfg = self.config
        if cfg.visual_mode == "discrete":
            ids = np.asarray(ids_or_features, dtype=np.int64)
            e = embedding(p["grid.tok"], ids)
        else:
            feats = np.asarray(ids_or_features, dtype=np.float32)
            if feats.shape[-1] != cfg.feature_dim:
                raise ValueError("feature dim mismatch")
            e = linear(Tensor(feats), p["grid.proj_w"], p["grid.proj_b"])
        if grid_mask is not None:
            m = np.asarray(grid_mask, bool)[..., None]
            e = where_mask(m, p["grid.mask_vec"], e)
        pos = embedding(p["grid.pos"], np.arange(e.data.shape[1]))
        return layer_norm(add(e, pos), p["grid.ln_g"], p["grid.ln_b"])

    # -- transformer blocks -------------------------------------------------

    def _mha(self, prefix, x: Tensor, kv: Tensor, training, rng) -> Tensor:
        p = self.params
        cfg = self.config
        B, S, D = x.data.shape
        Skv = kv.data.shape[1]
        h, dh = cfg.heads, D // cfg.heads

        def split(t, s):
            return transpose(reshape(t, (B, s, h, dh)), (0, 2, 1, 3))

        q = split(linear(x, p[f"{prefix}.q_w"], p[f"{prefix}.q_b"]), S)
        k = split(linear(kv, p[f"{prefix}.k_w"], p[f"{prefix}.k_b"]), Skv)
        v = split(linear(kv, p[f"{prefix}.v_w"], p[f"{prefix}.v_b"]), Skv)
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = softmax(scores, axis=-1)
        if training and cfg.dropout > 0:
            attn = dropout(attn, cfg.dropout, rng)
        ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (B, S, D))
        out = linear(ctx, p[f"{prefix}.o_w"], p[f"{prefix}.o_b"])
        if training and cfg.dropout > 0:
            out = dropout(out, cfg.dropout, rng)
        return out

    def _ffn(self, prefix, x: Tensor, training, rng) -> Tensor:
        p = self.params
        h = gelu(linear(x, p[f"{prefix}.ffn_w1"], p[f"{prefix}.ffn_b1"]))
        h = linear(h, p[f"{prefix}.ffn_w2"], p[f"{prefix}.ffn_b2"])
        if training and self.config.dropout > 0:
            h = dropout(h, self.config.dropout, rng)
        return h

    def _block(self, prefix, x: Tensor, kv: Tensor, training, rng) -> Tensor:
        p = self.params
        a = self._mha(prefix, x, kv, training, rng)
        x = layer_norm(add(x, a), p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
        f = self._ffn(prefix, x, training, rng)
        return layer_norm(add(x, f), p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])

    def encode(self, grid_inputs, text_tokens, grid_mask=None, text_mask=None,
               training=False, rng=None) -> EncoderOutputs:
        """Bidirectional encoding of [grid cells, CLS, w_1.., EOS, pad]."""
        cfg = self.config
        if training and cfg.dropout > 0 and rng is None:
            raise ValueError("training forward needs an rng for dropout")
        g = self.embed_grid(grid_inputs, grid_mask)
        t = self.embed_text(text_tokens, text_mask)
        T = cfg.grid_cells
        if cfg.architecture == "single_stream":
            x = concat([g, t], axis=1)
            for i in range(cfg.layers):
                x = self._block(f"enc{i}", x, x, training, rng)
            h_grid = self._slice(x, 0, T)
            h_cls = reshape(self._slice(x, T, T + 1), (x.data.shape[0], cfg.d_model))
            h_text = self._slice(x, T + 1, x.data.shape[1])
        else:
            for i in range(cfg.layers):
                g = self._block(f"grid{i}", g, g, training, rng)
                t = self._block(f"text{i}", t, t, training, rng)
            for i in range(cfg.layers):
                g2 = self._block(f"xgrid{i}", g, t, training, rng)
                t2 = self._block(f"xtext{i}", t, g, training, rng)
                g, t = g2, t2
            h_grid = g
            h_cls = reshape(self._slice(t, 0, 1), (t.data.shape[0], cfg.d_model))
            h_text = self._slice(t, 1, t.data.shape[1])
        return EncoderOutputs(h_grid=h_grid, h_text=h_text, h_cls=h_cls)

    @staticmethod
    def _slice(x, a, b):
        return slice_axis1(x, a, b)

    # -- heads ---------------------------------------------------------------

    def _head(self, x, w1, b1, ln_g, ln_b, w2, b2) -> Tensor:
        p = self.params
        h = gelu(linear(x, p[w1], p[b1]))
        h = layer_norm(h, p[ln_g], p[ln_b])
        return linear(h, p[w2], p[b2])

    def ccc_logits(self, h_grid: Tensor) -> Tensor:
        """(.., d) -> (.., visual_vocab) cluster-id logits."""
        return self._head(h_grid, "vis.w1", "vis.b1", "vis.ln_g", "vis.ln_b",
                          "vis.ccc_w", "vis.ccc_b")

    def mvfr_regress(self, h_grid: Tensor) -> Tensor:
        """(.., d) -> (.., feature_dim) regressed raw features."""
        return self._head(h_grid, "vis.w1", "vis.b1", "vis.ln_g", "vis.ln_b",
                          "vis.mvfr_w", "vis.mvfr_b")

    def mlm_logits(self, h_text: Tensor) -> Tensor:
        return self._head(h_text, "mlm.w1", "mlm.b1", "mlm.ln_g", "mlm.ln_b",
                          "mlm.out_w", "mlm.out_b")

    def itm_logit(self, h_cls: Tensor) -> Tensor:
        return self._head(h_cls, "itm.w1", "itm.b1", "itm.ln_g", "itm.ln_b",
                          "itm.out_w", "itm.out_b")

    def itm_score(self, h_cls: Tensor) -> Tensor:
        """Probability in [0, 1] that the caption matches the grid."""
        return sigmoid(self.itm_logit(h_cls))
