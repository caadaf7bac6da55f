"""Decoder-style transformer over [image patches | instruction | action slots].

Pre-LayerNorm blocks with learned absolute positions. The same trunk serves
both regimes; only the attention mask and the content of the D action slots
differ. In joint mode the slots hold D learned query vectors; in causal mode
slot t holds the embedding of the previous action token (teacher-forced
during training, model-emitted during decoding) with the first learned query
vector acting as the begin-of-action marker in slot 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, StateError
from .masks import AttentionMask, SequenceLayout
from .tensor import Tensor


@dataclass(frozen=True)
class PolicyConfig:
    """Architecture hyperparameters and vocabulary layout.

    The vocabulary is [0, text_vocab_size) for text followed by a disjoint
    range of action_bins tokens per action dimension, so token accuracy can
    isolate per-dimension errors.
    """

    model_dim: int = 48
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 96
    text_vocab_size: int = 8
    action_bins: int = 64
    action_dims: int = 7
    max_seq_len: int = 32
    mask_mode: str = "joint"
    joint_full_bidirectional: bool = False
    gelu_exact: bool = False
    seed: int = 0
    vocab_size: int = 0  # 0 -> text_vocab_size + action_dims * action_bins

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by "
                f"n_heads {self.n_heads}"
            )
        if self.action_dims < 1:
            raise ConfigError("action_dims must be >= 1")
        if self.action_bins < 2:
            raise ConfigError("action_bins must be >= 2")
        if self.mask_mode not in ("causal", "joint"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        needed = self.text_vocab_size + self.action_dims * self.action_bins
        if self.vocab_size == 0:
            object.__setattr__(self, "vocab_size", needed)
        elif self.vocab_size < needed:
            raise ConfigError(
                f"vocab_size {self.vocab_size} < text_vocab_size + "
                f"action_dims * action_bins = {needed}"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def action_token_range(self, dim: int) -> tuple[int, int]:
        """Half-open vocab id range reserved for action dimension `dim`."""
        if not 0 <= dim < self.action_dims:
            raise ConfigError(f"action dim {dim} outside [0, {self.action_dims})")
        lo = self.text_vocab_size + dim * self.action_bins
        return lo, lo + self.action_bins

    def to_kv(self) -> dict[str, str]:
        return {
            "model_dim": str(self.model_dim),
            "n_layers": str(self.n_layers),
            "n_heads": str(self.n_heads),
            "mlp_hidden": str(self.mlp_hidden),
            "text_vocab_size": str(self.text_vocab_size),
            "action_bins": str(self.action_bins),
            "action_dims": str(self.action_dims),
            "max_seq_len": str(self.max_seq_len),
            "mask_mode": self.mask_mode,
            "joint_full_bidirectional": str(self.joint_full_bidirectional).lower(),
            "gelu_exact": str(self.gelu_exact).lower(),
            "seed": str(self.seed),
            "vocab_size": str(self.vocab_size),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "PolicyConfig":
        def b(s):
            return s == "true"

        return cls(
            model_dim=int(kv["model_dim"]),
            n_layers=int(kv["n_layers"]),
            n_heads=int(kv["n_heads"]),
            mlp_hidden=int(kv["mlp_hidden"]),
            text_vocab_size=int(kv["text_vocab_size"]),
            action_bins=int(kv["action_bins"]),
            action_dims=int(kv["action_dims"]),
            max_seq_len=int(kv["max_seq_len"]),
            mask_mode=kv["mask_mode"],
            joint_full_bidirectional=b(kv["joint_full_bidirectional"]),
            gelu_exact=b(kv["gelu_exact"]),
            seed=int(kv["seed"]),
            vocab_size=int(kv["vocab_size"]),
        )


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_up: Tensor
    b_up: Tensor
    w_down: Tensor
    b_down: Tensor


@dataclass
class PolicyParams:
    config: PolicyConfig
    token_table: Tensor  # (V, d)
    pos_table: Tensor  # (max_seq_len, d)
    layers: list[LayerParams]
    ln_f_g: Tensor
    ln_f_b: Tensor
    w_head: Tensor  # (d, V)
    b_head: Tensor
    action_queries: Tensor  # (D, d)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [
            ("policy.token_table", self.token_table),
            ("policy.pos_table", self.pos_table),
        ]
        for i, lp in enumerate(self.layers):
            for fname in ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o",
                          "ln2_g", "ln2_b", "w_up", "b_up", "w_down", "b_down"):
                out.append((f"policy.layer{i}.{fname}", getattr(lp, fname)))
        out += [
            ("policy.ln_f_g", self.ln_f_g),
            ("policy.ln_f_b", self.ln_f_b),
            ("policy.w_head", self.w_head),
            ("policy.b_head", self.b_head),
            ("policy.action_queries", self.action_queries),
        ]
        return out


EMBED_STD = 0.02


def init_params(cfg: PolicyConfig, dtype=np.float64) -> PolicyParams:
    """Deterministic init from cfg.seed: 1/sqrt(fan_in) weights, small-normal
    embeddings, unit LayerNorm gains."""
    rng = np.random.default_rng(cfg.seed)
    d, v = cfg.model_dim, cfg.vocab_size

    def emb(n):
        return T.parameter(rng.normal(0.0, EMBED_STD, size=(n, d)).astype(dtype))

    def linear(nin, nout, bias=True):
        w = T.parameter(
            rng.normal(0.0, 1.0 / math.sqrt(nin), size=(nin, nout)).astype(dtype)
        )
        if not bias:
            return w
        return w, T.parameter(np.zeros(nout, dtype=dtype))

    def ln():
        return (T.parameter(np.ones(d, dtype=dtype)),
                T.parameter(np.zeros(d, dtype=dtype)))

    token_table = emb(v)
    pos_table = emb(cfg.max_seq_len)
    layers = []
    for _ in range(cfg.n_layers):
        ln1_g, ln1_b = ln()
        w_q = linear(d, d, bias=False)
        w_k = linear(d, d, bias=False)
        w_v = linear(d, d, bias=False)
        w_o = linear(d, d, bias=False)
        ln2_g, ln2_b = ln()
        w_up, b_up = linear(d, cfg.mlp_hidden)
        w_down, b_down = linear(cfg.mlp_hidden, d)
        layers.append(LayerParams(ln1_g, ln1_b, w_q, w_k, w_v, w_o,
                                  ln2_g, ln2_b, w_up, b_up, w_down, b_down))
    ln_f_g, ln_f_b = ln()
    w_head, b_head = linear(d, v)
    action_queries = emb(cfg.action_dims)
    return PolicyParams(cfg, token_table, pos_table, layers,
                        ln_f_g, ln_f_b, w_head, b_head, action_queries)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _attention(lp: LayerParams, x_ln: Tensor, allow: np.ndarray,
               n_heads: int) -> Tensor:
    """Multi-head self-attention over (T, d) rows under an allow-matrix."""
    d = x_ln.shape[1]
    dh = d // n_heads
    q = T.matmul(x_ln, lp.w_q)
    k = T.matmul(x_ln, lp.w_k)
    v = T.matmul(x_ln, lp.w_v)
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        q_h = T.slice_cols(q, lo, hi)
        k_h = T.slice_cols(k, lo, hi)
        v_h = T.slice_cols(v, lo, hi)
        scores = T.scale(T.matmul(q_h, T.transpose(k_h)), 1.0 / math.sqrt(dh))
        att = T.masked_softmax_rows(scores, allow)
        heads.append(T.matmul(att, v_h))
    merged = heads[0] if n_heads == 1 else T.concat(heads, axis=1)
    return T.matmul(merged, lp.w_o)


def _mlp(lp: LayerParams, x_ln: Tensor, exact_gelu: bool) -> Tensor:
    up = T.add_bias(T.matmul(x_ln, lp.w_up), lp.b_up)
    return T.add_bias(T.matmul(T.gelu(up, exact=exact_gelu), lp.w_down),
                      lp.b_down)


def trunk(params: PolicyParams, embeddings: Tensor, allow: np.ndarray) -> Tensor:
    """Shared backbone: blocks plus final LayerNorm, head applied separately."""
    cfg = params.config
    h = embeddings
    for lp in params.layers:
        h = T.add(h, _attention(lp, T.layer_norm(h, lp.ln1_g, lp.ln1_b),
                                allow, cfg.n_heads))
        h = T.add(h, _mlp(lp, T.layer_norm(h, lp.ln2_g, lp.ln2_b),
                          cfg.gelu_exact))
    return T.layer_norm(h, params.ln_f_g, params.ln_f_b)


def lm_head(params: PolicyParams, hidden: Tensor) -> Tensor:
    return T.add_bias(T.matmul(hidden, params.w_head), params.b_head)


def forward(params: PolicyParams, embeddings: Tensor,
            mask: AttentionMask) -> Tensor:
    """Full trunk + head over a (T, d) embedding sequence -> (T, V) logits."""
    t = embeddings.shape[0]
    if t > params.config.max_seq_len:
        raise ConfigError(
            f"sequence length {t} exceeds max_seq_len "
            f"{params.config.max_seq_len}"
        )
    if mask.size != t:
        raise ShapeError(f"mask size {mask.size} != sequence length {t}")
    return lm_head(params, trunk(params, embeddings, mask.allow))


class KVCache:
    """Stored per-layer keys/values for already-processed positions."""

    def __init__(self, n_layers: int, dtype=np.float64):
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers
        self.positions = 0
        self.dtype = dtype

    @classmethod
    def empty(cls, params: PolicyParams, dtype=np.float64) -> "KVCache":
        return cls(params.config.n_layers, dtype=dtype)


def forward_cached(params: PolicyParams, new_embeddings: Tensor,
                   cache: KVCache, allow_rows: np.ndarray,
                   want_logits: bool = True) -> tuple[Tensor | None, KVCache]:
    """Process only the new positions, reusing cached K/V for prior ones.

    `allow_rows` holds the mask rows of the new positions over the full
    (cached + new) key range. Produces logits identical to an uncached
    forward over the whole sequence under a causal mask (within float
    round-off); set `want_logits=False` for cache-priming passes whose
    logits would be discarded.
    """
    cfg = params.config
    if len(cache.k) != cfg.n_layers:
        raise StateError(
            f"cache has {len(cache.k)} layers, config has {cfg.n_layers}"
        )
    n_new = new_embeddings.shape[0]
    total = cache.positions + n_new
    if total > cfg.max_seq_len:
        raise ConfigError(
            f"cache positions {cache.positions} + new {n_new} exceed "
            f"max_seq_len {cfg.max_seq_len}"
        )
    if allow_rows.shape != (n_new, total):
        raise ShapeError(
            f"allow_rows shape {allow_rows.shape} != ({n_new}, {total})"
        )
    dh = cfg.head_dim
    h = new_embeddings
    for li, lp in enumerate(params.layers):
        x_ln = T.layer_norm(h, lp.ln1_g, lp.ln1_b)
        q = T.matmul(x_ln, lp.w_q)
        k_new = T.matmul(x_ln, lp.w_k)
        v_new = T.matmul(x_ln, lp.w_v)
        if cache.k[li] is None:
            k_all, v_all = k_new, v_new
        else:
            k_all = T.concat([T.constant(cache.k[li]), k_new], axis=0)
            v_all = T.concat([T.constant(cache.v[li]), v_new], axis=0)
        heads = []
        for hd in range(cfg.n_heads):
            lo, hi = hd * dh, (hd + 1) * dh
            scores = T.scale(
                T.matmul(T.slice_cols(q, lo, hi),
                         T.transpose(T.slice_cols(k_all, lo, hi))),
                1.0 / math.sqrt(dh),
            )
            att = T.masked_softmax_rows(scores, allow_rows)
            heads.append(T.matmul(att, T.slice_cols(v_all, lo, hi)))
        merged = heads[0] if cfg.n_heads == 1 else T.concat(heads, axis=1)
        h = T.add(h, T.matmul(merged, lp.w_o))
        h = T.add(h, _mlp(lp, T.layer_norm(h, lp.ln2_g, lp.ln2_b),
                          cfg.gelu_exact))
        cache.k[li] = np.ascontiguousarray(k_all.data)
        cache.v[li] = np.ascontiguousarray(v_all.data)
    cache.positions = total
    hidden = T.layer_norm(h, params.ln_f_g, params.ln_f_b)
    if not want_logits:
        return None, cache
    return lm_head(params, hidden), cache


# ---------------------------------------------------------------------------
# Sequence assembly
# ---------------------------------------------------------------------------


def assemble_sequence(params: PolicyParams, img_emb: Tensor,
                      instruction_tokens: list[int],
                      slot_embs: Tensor) -> tuple[Tensor, SequenceLayout]:
    """Concatenate [image patches | instruction | action slots], add positions.

    `slot_embs` is the (D, d) content of the action slots; callers pick
    learned queries (joint) or shifted token embeddings (causal).
    """
    cfg = params.config
    if slot_embs.shape != (cfg.action_dims, cfg.model_dim):
        raise ShapeError(
            f"slot embeddings shape {slot_embs.shape} != "
            f"({cfg.action_dims}, {cfg.model_dim})"
        )
    n_patches = img_emb.shape[0]
    prefix_len = n_patches + len(instruction_tokens)
    layout = SequenceLayout(prefix_len=prefix_len, action_len=cfg.action_dims)
    if layout.total > cfg.max_seq_len:
        raise ConfigError(
            f"sequence length {layout.total} exceeds max_seq_len "
            f"{cfg.max_seq_len}"
        )
    parts = [img_emb]
    if instruction_tokens:
        parts.append(T.gather_rows(params.token_table, instruction_tokens))
    parts.append(slot_embs)
    emb = T.concat(parts, axis=0)
    pos = T.slice_rows(params.pos_table, 0, layout.total)
    return T.add(emb, pos), layout


def joint_slots(params: PolicyParams) -> Tensor:
    """All D learned query vectors, the joint-mode slot content."""
    return T.gather_rows(params.action_queries,
                         list(range(params.config.action_dims)))


def causal_slots(params: PolicyParams, prev_tokens: list[int]) -> Tensor:
    """Causal-mode slot content: begin-of-action marker then shifted tokens.

    `prev_tokens` are the first D-1 action tokens (ground truth when teacher
    forcing, model output when decoding).
    """
    d_dims = params.config.action_dims
    if len(prev_tokens) != d_dims - 1:
        raise ShapeError(
            f"causal slots need {d_dims - 1} previous tokens, "
            f"got {len(prev_tokens)}"
        )
    start = T.gather_rows(params.action_queries, [0])
    if not prev_tokens:
        return start
    shifted = T.gather_rows(params.token_table, prev_tokens)
    return T.concat([start, shifted], axis=0)


def action_argmax(cfg: PolicyConfig, logits_rows: np.ndarray,
                  restrict: bool = True) -> list[int]:
    """Greedy action tokens from (D, V) logit rows, one row per slot.

    With `restrict` (the default) slot t's argmax is taken over dimension
    t's reserved vocab range, guaranteeing a detokenizable output.
    """
    if logits_rows.shape != (cfg.action_dims, cfg.vocab_size):
        raise ShapeError(
            f"expected ({cfg.action_dims}, {cfg.vocab_size}) logit rows, "
            f"got {logits_rows.shape}"
        )
    tokens = []
    for dim in range(cfg.action_dims):
        if restrict:
            lo, hi = cfg.action_token_range(dim)
            tokens.append(lo + int(np.argmax(logits_rows[dim, lo:hi])))
        else:
            tokens.append(int(np.argmax(logits_rows[dim])))
    return tokens


@dataclass
class Model:
    """Full trainable bundle: visual encoder plus transformer policy."""

    config: PolicyConfig
    encoder: "EncoderParams"
    policy: PolicyParams

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.encoder.named_params() + self.policy.named_params()

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def astype(self, dtype) -> "Model":
        """Copy of the bundle with every parameter cast to `dtype`.

        Used by the bench path to run in float32; one run never mixes
        precisions.
        """
        from .encoder import EncoderParams

        def cast(t: Tensor) -> Tensor:
            return Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)

        enc = self.encoder
        encoder = EncoderParams(
            patch_size=enc.patch_size,
            w_a=cast(enc.w_a), b_a=cast(enc.b_a),
            w_b=cast(enc.w_b), b_b=cast(enc.b_b),
            w_proj=cast(enc.w_proj), b_proj=cast(enc.b_proj),
        )
        names = ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o",
                 "ln2_g", "ln2_b", "w_up", "b_up", "w_down", "b_down")
        layers = [
            LayerParams(*[cast(getattr(lp, n)) for n in names])
            for lp in self.policy.layers
        ]
        policy = PolicyParams(
            config=self.config,
            token_table=cast(self.policy.token_table),
            pos_table=cast(self.policy.pos_table),
            layers=layers,
            ln_f_g=cast(self.policy.ln_f_g),
            ln_f_b=cast(self.policy.ln_f_b),
            w_head=cast(self.policy.w_head),
            b_head=cast(self.policy.b_head),
            action_queries=cast(self.policy.action_queries),
        )
        return Model(config=self.config, encoder=encoder, policy=policy)


def init_model(cfg: PolicyConfig, patch_size: int, feat_a: int, feat_b: int,
               dtype=np.float64) -> Model:
    """Encoder and policy initialized from decorrelated streams of cfg.seed."""
    from .encoder import init_encoder_params

    enc_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    enc = init_encoder_params(enc_rng, patch_size, feat_a, feat_b,
                              cfg.model_dim, dtype=dtype)
    pol = init_params(cfg, dtype=dtype)
    return Model(config=cfg, encoder=enc, policy=pol)
