"""Small pre-norm transformer encoder pair with hand-written backward passes.

The model keeps every trainable tensor in a flat named dict (the manifest).
Two encoder stacks live side by side under the ``men.`` and ``cand.`` prefixes
(or a single shared ``enc.`` stack when tied), plus task heads under ``head.``:
the mention projection, the span scorer vectors, and the BIO tagging head.

Everything runs in float64; gradients are exact and are verified against
central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf

from .corpus import CLS_ID, SEP_ID

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

MENTION_PREFIX = "men."
CANDIDATE_PREFIX = "cand."
SHARED_PREFIX = "enc."


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 512
    vocab_size: int = 0
    seed: int = 0
    tie_encoders: bool = False

    def validate(self) -> None:
        if min(self.hidden_dim, self.num_layers, self.num_heads, self.ffn_dim) < 1:
            raise ValueError("all encoder dimensions must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_seq_len < 3:
            raise ValueError("max_seq_len must be >= 3")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")


@dataclass
class ModelParams:
    """All trainable tensors, keyed by a stable named manifest."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    def manifest(self) -> tuple[str, ...]:
        return tuple(self.tensors)

    @property
    def mention_prefix(self) -> str:
        return SHARED_PREFIX if self.config.tie_encoders else MENTION_PREFIX

    @property
    def candidate_prefix(self) -> str:
        return SHARED_PREFIX if self.config.tie_encoders else CANDIDATE_PREFIX

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _encoder_tensor_specs(cfg: EncoderConfig, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    specs: list[tuple[str, tuple[int, ...]]] = [
        (f"{prefix}tok_emb", (cfg.vocab_size, d)),
        (f"{prefix}pos_emb", (cfg.max_seq_len, d)),
    ]
    for layer in range(cfg.num_layers):
        p = f"{prefix}layer{layer}."
        specs += [
            (f"{p}ln1.g", (d,)),
            (f"{p}ln1.b", (d,)),
            (f"{p}attn.wq", (d, d)),
            (f"{p}attn.bq", (d,)),
            (f"{p}attn.wk", (d, d)),
            (f"{p}attn.bk", (d,)),
            (f"{p}attn.wv", (d, d)),
            (f"{p}attn.bv", (d,)),
            (f"{p}attn.wo", (d, d)),
            (f"{p}attn.bo", (d,)),
            (f"{p}ln2.g", (d,)),
            (f"{p}ln2.b", (d,)),
            (f"{p}ffn.w1", (d, f)),
            (f"{p}ffn.b1", (f,)),
            (f"{p}ffn.w2", (f, d)),
            (f"{p}ffn.b2", (d,)),
        ]
    specs += [(f"{prefix}ln_f.g", (d,)), (f"{prefix}ln_f.b", (d,))]
    return specs


def _head_tensor_specs(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.hidden_dim
    return [
        ("head.proj.w", (d, 2 * d)),
        ("head.proj.b", (d,)),
        ("head.span.ws", (d,)),
        ("head.span.we", (d,)),
        ("head.span.wm", (d,)),
        ("head.bio.w", (3, d)),
        ("head.bio.b", (3,)),
    ]


def tensor_specs(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    if cfg.tie_encoders:
        specs = _encoder_tensor_specs(cfg, SHARED_PREFIX)
    else:
        specs = _encoder_tensor_specs(cfg, MENTION_PREFIX) + _encoder_tensor_specs(
            cfg, CANDIDATE_PREFIX
        )
    return specs + _head_tensor_specs(cfg)


def init_params(cfg: EncoderConfig, init_std: float = 0.02) -> ModelParams:
    """Draw weights from a scaled normal; normalization gains 1, biases 0.

    Bit-deterministic for a given (cfg, cfg.seed).
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_specs(cfg):
        if name.endswith((".g",)):
            tensors[name] = np.ones(shape)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) or name.endswith(
            "proj.b"
        ):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, init_std, size=shape)
    return ModelParams(config=cfg, tensors=tensors)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors.items()}


def mark_tokens(content_ids: "list[int] | np.ndarray") -> np.ndarray:
    """Wrap content token ids with the sequence-start/end markers."""
    return np.concatenate(([CLS_ID], np.asarray(content_ids, dtype=np.int64), [SEP_ID]))


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _ln_backward(dy: np.ndarray, g: np.ndarray, state) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv = state
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def encoder_forward(
    params: ModelParams,
    prefix: str,
    ids: np.ndarray,
    key_mask: np.ndarray | None = None,
    need_cache: bool = False,
):
    """Run one encoder stack over a (B, T) id batch.

    ``key_mask`` marks real tokens (True); masked positions are invisible to
    attention everywhere, so each sequence's output is independent of padding
    and of every other sequence in the batch.  Returns (h, cache) where h is
    (B, T, d); cache is None unless ``need_cache``.
    """
    cfg = params.config
    t = params.tensors
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    _, seq_len = ids.shape
    if seq_len > cfg.max_seq_len:
        raise ValueError(
            f"sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}"
        )
    x = t[f"{prefix}tok_emb"][ids] + t[f"{prefix}pos_emb"][:seq_len]
    heads = cfg.num_heads
    scale = 1.0 / np.sqrt(cfg.hidden_dim // heads)
    layers = []
    for layer in range(cfg.num_layers):
        p = f"{prefix}layer{layer}."
        x_in = x
        a, ln1_state = _ln_forward(x_in, t[f"{p}ln1.g"], t[f"{p}ln1.b"])
        q = _split_heads(a @ t[f"{p}attn.wq"] + t[f"{p}attn.bq"], heads)
        k = _split_heads(a @ t[f"{p}attn.wk"] + t[f"{p}attn.bk"], heads)
        v = _split_heads(a @ t[f"{p}attn.wv"] + t[f"{p}attn.bv"], heads)
        scores = np.einsum("bhtd,bhsd->bhts", q, k) * scale
        if key_mask is not None:
            scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
        probs = _softmax(scores)
        concat = _merge_heads(np.einsum("bhts,bhsd->bhtd", probs, v))
        attn_out = concat @ t[f"{p}attn.wo"] + t[f"{p}attn.bo"]
        x_mid = x_in + attn_out
        f, ln2_state = _ln_forward(x_mid, t[f"{p}ln2.g"], t[f"{p}ln2.b"])
        z1 = f @ t[f"{p}ffn.w1"] + t[f"{p}ffn.b1"]
        gz = _gelu(z1)
        x = x_mid + gz @ t[f"{p}ffn.w2"] + t[f"{p}ffn.b2"]
        if need_cache:
            layers.append(
                {
                    "a": a,
                    "ln1": ln1_state,
                    "q": q,
                    "k": k,
                    "v": v,
                    "probs": probs,
                    "concat": concat,
                    "ln2": ln2_state,
                    "f": f,
                    "z1": z1,
                    "gz": gz,
                }
            )
    h, lnf_state = _ln_forward(x, t[f"{prefix}ln_f.g"], t[f"{prefix}ln_f.b"])
    cache = None
    if need_cache:
        cache = {"ids": ids, "layers": layers, "ln_f": lnf_state, "seq_len": seq_len}
    return h, cache


def encoder_backward(
    params: ModelParams,
    prefix: str,
    cache: dict,
    dh: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for one `encoder_forward` call.

    ``dh`` is the loss gradient w.r.t. the (B, T, d) output states.
    """
    cfg = params.config
    t = params.tensors
    ids = cache["ids"]
    seq_len = cache["seq_len"]
    heads = cfg.num_heads
    scale = 1.0 / np.sqrt(cfg.hidden_dim // heads)

    dx, dg, db = _ln_backward(dh, t[f"{prefix}ln_f.g"], cache["ln_f"])
    grads[f"{prefix}ln_f.g"] += dg
    grads[f"{prefix}ln_f.b"] += db

    for layer in reversed(range(cfg.num_layers)):
        p = f"{prefix}layer{layer}."
        c = cache["layers"][layer]
        # FFN sub-block: x = x_mid + gelu(f @ w1 + b1) @ w2 + b2
        dffn_out = dx
        grads[f"{p}ffn.w2"] += np.einsum("btf,btd->fd", c["gz"], dffn_out)
        grads[f"{p}ffn.b2"] += dffn_out.sum(axis=(0, 1))
        dgz = dffn_out @ t[f"{p}ffn.w2"].T
        dz1 = dgz * _gelu_grad(c["z1"])
        grads[f"{p}ffn.w1"] += np.einsum("btd,btf->df", c["f"], dz1)
        grads[f"{p}ffn.b1"] += dz1.sum(axis=(0, 1))
        df = dz1 @ t[f"{p}ffn.w1"].T
        dx_mid_ln, dg, db = _ln_backward(df, t[f"{p}ln2.g"], c["ln2"])
        grads[f"{p}ln2.g"] += dg
        grads[f"{p}ln2.b"] += db
        dx_mid = dx + dx_mid_ln
        # Attention sub-block: x_mid = x_in + concat @ wo + bo
        dattn_out = dx_mid
        grads[f"{p}attn.wo"] += np.einsum("btd,bte->de", c["concat"], dattn_out)
        grads[f"{p}attn.bo"] += dattn_out.sum(axis=(0, 1))
        dconcat = _split_heads(dattn_out @ t[f"{p}attn.wo"].T, heads)
        dprobs = np.einsum("bhtd,bhsd->bhts", dconcat, c["v"])
        dv = np.einsum("bhts,bhtd->bhsd", c["probs"], dconcat)
        dscores = c["probs"] * (
            dprobs - (dprobs * c["probs"]).sum(axis=-1, keepdims=True)
        )
        dq = np.einsum("bhts,bhsd->bhtd", dscores, c["k"]) * scale
        dk = np.einsum("bhts,bhtd->bhsd", dscores, c["q"]) * scale
        dq, dk, dv = (_merge_heads(x) for x in (dq, dk, dv))
        a = c["a"]
        grads[f"{p}attn.wq"] += np.einsum("btd,bte->de", a, dq)
        grads[f"{p}attn.bq"] += dq.sum(axis=(0, 1))
        grads[f"{p}attn.wk"] += np.einsum("btd,bte->de", a, dk)
        grads[f"{p}attn.bk"] += dk.sum(axis=(0, 1))
        grads[f"{p}attn.wv"] += np.einsum("btd,bte->de", a, dv)
        grads[f"{p}attn.bv"] += dv.sum(axis=(0, 1))
        da = dq @ t[f"{p}attn.wq"].T + dk @ t[f"{p}attn.wk"].T + dv @ t[f"{p}attn.wv"].T
        dx_in_ln, dg, db = _ln_backward(da, t[f"{p}ln1.g"], c["ln1"])
        grads[f"{p}ln1.g"] += dg
        grads[f"{p}ln1.b"] += db
        dx = dx_mid + dx_in_ln

    np.add.at(grads[f"{prefix}tok_emb"], ids, dx)
    grads[f"{prefix}pos_emb"][:seq_len] += dx.sum(axis=0)


def encode_sequence(
    params: ModelParams, token_ids: "list[int] | np.ndarray", encoder: str = "mention"
) -> np.ndarray:
    """Encode a single marked sequence; returns the (T, d) final-layer states."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 2:
        raise ValueError("expected a 1-D sequence of at least 2 token ids")
    if ids[0] != CLS_ID or ids[-1] != SEP_ID:
        raise ValueError("sequence must start with the start marker and end with the end marker")
    prefix = params.mention_prefix if encoder == "mention" else params.candidate_prefix
    h, _ = encoder_forward(params, prefix, ids[None, :])
    return h[0]


def encode_entity(params: ModelParams, token_ids: "list[int] | np.ndarray") -> np.ndarray:
    """Entity vector: the final-layer state at the sequence-start position."""
    return encode_sequence(params, token_ids, encoder="candidate")[0]


def spawn_config(cfg: EncoderConfig, vocab_size: int, seed: int | None = None) -> EncoderConfig:
    """Fill in corpus-dependent fields of a config template."""
    return replace(cfg, vocab_size=vocab_size, seed=cfg.seed if seed is None else seed)
