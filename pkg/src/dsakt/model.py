"""DSAKT forward and backward passes on top of :mod:`dsakt.nnkernel`.

Parameters live in a plain ``dict[str, np.ndarray]`` whose key order is the
inventory order from :func:`param_shapes`. All batched functions take token
arrays of shape ``[B, k]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import nnkernel as nk
from .datastore import EncodedWindow

STAGES = ("encoder_self", "decoder_self", "decoder_cross")
MHA_WEIGHTS = ("Wq", "Wk", "Wv", "Wo")


@dataclass(frozen=True)
class ModelConfig:
    e: int
    k: int
    d: int
    h: int
    d_ff: int | None = None
    n_blocks: int = 1
    dropout_rate: float = 0.0
    scale_full_d: bool = False

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", self.d)
        for name in ("e", "k", "d", "h", "d_ff", "n_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.h:
            raise ValueError(f"head count {self.h} does not divide d={self.d}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d // self.h

    @property
    def attn_scale(self) -> float:
        return 1.0 / np.sqrt(self.d if self.scale_full_d else self.head_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass; arrays keep the batch axis first.

    ``attention[stage][block]`` has shape ``[B, h, k, k]``.
    """

    interaction_stream: np.ndarray
    exercise_stream: np.ndarray
    encoder_output: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    attention: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def item(self, i: int) -> "ForwardTrace":
        return ForwardTrace(
            self.interaction_stream[i],
            self.exercise_stream[i],
            self.encoder_output[i],
            self.logits[i],
            self.probs[i],
            {st: [w[i] for w in ws] for st, ws in self.attention.items()},
        )


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, d, f = config.e, config.d, config.d_ff
    shapes = {
        "interaction_embedding": (2 * e + 1, d),
        "exercise_embedding": (e + 1, d),
        "interaction_proj": (d, d),
        "exercise_proj": (d, d),
    }

    def mha(prefix):
        for w in MHA_WEIGHTS:
            shapes[f"{prefix}.mha.{w}"] = (d, d)

    def ffn(prefix):
        shapes[f"{prefix}.ffn.W1"] = (d, f)
        shapes[f"{prefix}.ffn.b1"] = (f,)
        shapes[f"{prefix}.ffn.W2"] = (f, d)
        shapes[f"{prefix}.ffn.b2"] = (d,)

    def norms(prefix, n):
        for i in range(1, n + 1):
            shapes[f"{prefix}.ln{i}.gamma"] = (d,)
            shapes[f"{prefix}.ln{i}.beta"] = (d,)

    for b in range(config.n_blocks):
        mha(f"encoder.{b}")
        ffn(f"encoder.{b}")
        norms(f"encoder.{b}", 2)
    for b in range(config.n_blocks):
        # one attention weight set serves both decoder attention stages
        mha(f"decoder.{b}")
        ffn(f"decoder.{b}")
        norms(f"decoder.{b}", 3)
    shapes["head.W"] = (d, 1)
    shapes["head.b"] = (1,)
    return shapes


def param_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Embeddings ~ N(0, std=d**-0.5), matrices Glorot-uniform, biases 0, norms (1, 0)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("_embedding"):
            value = rng.normal(0.0, config.d**-0.5, size=shape)
        elif leaf == "gamma":
            value = np.ones(shape)
        elif leaf in ("beta", "b", "b1", "b2"):
            value = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        params[name] = value.astype(dtype)
    return params


def cast_params(params, dtype):
    return {name: v.astype(dtype) for name, v in params.items()}


# ---------------------------------------------------------------------------
# fixed tables


@lru_cache(maxsize=32)
def _position_table(k: int, d: int) -> np.ndarray:
    i = np.arange(1, k + 1, dtype=np.float64)[:, None]
    j = np.arange(1, d + 1)
    expo = np.where(j % 2 == 0, j, j - 1) / d
    angle = i / np.power(10000.0, expo)[None, :]
    table = np.where(j % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table


def positional_table(k: int, d: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoid table, 1-based: even column j -> sin(i/10000^(j/d)), odd j -> cos(i/10000^((j-1)/d))."""
    if k < 1 or d < 1:
        raise ValueError("k and d must be >= 1")
    return _position_table(k, d).astype(dtype)


def causal_mask(k: int) -> np.ndarray:
    """``mask[t, s] = 1`` iff ``s <= t``."""
    return np.tril(np.ones((k, k), dtype=np.int8))


# ---------------------------------------------------------------------------
# building blocks


def _check_tokens(tokens, upper, what):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() > upper):
        raise ValueError(f"{what} tokens must lie in [0, {upper}]")
    return tokens


def _embed(tokens, table, proj, pos):
    raw = table[tokens] + pos
    return raw @ proj, raw


def embed_interactions(tokens, params, position_table):
    """``(I_hat[tokens] + P) @ W_I``."""
    table = params["interaction_embedding"]
    tokens = _check_tokens(tokens, table.shape[0] - 1, "interaction")
    pos = position_table.astype(table.dtype)
    return _embed(tokens, table, params["interaction_proj"], pos)[0]


def embed_exercises(tokens, params, position_table):
    """``(E_hat[tokens] + P) @ W_E``."""
    table = params["exercise_embedding"]
    tokens = _check_tokens(tokens, table.shape[0] - 1, "query")
    pos = position_table.astype(table.dtype)
    return _embed(tokens, table, params["exercise_proj"], pos)[0]


def _split_heads(x, h):
    B, k, d = x.shape
    return x.reshape(B, k, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, k, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, k, h * dh)


def multi_head(x_query, x_keyvalue, weights, mask, h, scale=None):
    """Masked multi-head attention on ``[B, k, d]`` inputs.

    ``weights`` maps ``Wq, Wk, Wv, Wo`` to ``[d, d]`` arrays. Returns
    ``(output, attention, cache)`` with attention of shape ``[B, h, k, k]``.
    """
    d = x_query.shape[-1]
    if scale is None:
        scale = 1.0 / np.sqrt(d // h)
    Wq, Wk, Wv, Wo = (weights[n] for n in MHA_WEIGHTS)
    Q = _split_heads(x_query @ Wq, h)
    K = _split_heads(x_keyvalue @ Wk, h)
    V = _split_heads(x_keyvalue @ Wv, h)
    scores = (Q @ K.transpose(0, 1, 3, 2)) * Q.dtype.type(scale)
    attn = nk.softmax_masked(scores, mask)
    heads = _merge_heads(attn @ V)
    out = heads @ Wo
    cache = (x_query, x_keyvalue, Q, K, V, attn, heads, scale, h)
    return out, attn, cache


def multi_head_backward(dout, weights, cache):
    """Return ``(dx_query, dx_keyvalue, dweights)``."""
    x_q, x_kv, Q, K, V, attn, heads, scale, h = cache
    Wq, Wk, Wv, Wo = (weights[n] for n in MHA_WEIGHTS)
    dheads, dWo, _ = nk.linear_backward(dout, heads, Wo, has_bias=False)
    dA = _split_heads(dheads, h)
    dattn = dA @ V.transpose(0, 1, 3, 2)
    dV = attn.transpose(0, 1, 3, 2) @ dA
    dscores = nk.softmax_backward(dattn, attn) * Q.dtype.type(scale)
    dQ = dscores @ K
    dK = dscores.transpose(0, 1, 3, 2) @ Q
    dxq, dWq, _ = nk.linear_backward(_merge_heads(dQ), x_q, Wq, has_bias=False)
    dxk, dWk, _ = nk.linear_backward(_merge_heads(dK), x_kv, Wk, has_bias=False)
    dxv, dWv, _ = nk.linear_backward(_merge_heads(dV), x_kv, Wv, has_bias=False)
    return dxq, dxk + dxv, {"Wq": dWq, "Wk": dWk, "Wv": dWv, "Wo": dWo}


def _ffn(x, p, prefix):
    pre = nk.linear(x, p[f"{prefix}.W1"], p[f"{prefix}.b1"])
    hid = nk.relu(pre)
    return nk.linear(hid, p[f"{prefix}.W2"], p[f"{prefix}.b2"]), (x, pre, hid)


def _ffn_backward(dout, p, prefix, cache, grads):
    x, pre, hid = cache
    dhid, dW2, db2 = nk.linear_backward(dout, hid, p[f"{prefix}.W2"])
    dpre = nk.relu_backward(dhid, pre)
    dx, dW1, db1 = nk.linear_backward(dpre, x, p[f"{prefix}.W1"])
    _acc(grads, f"{prefix}.W1", dW1)
    _acc(grads, f"{prefix}.b1", db1)
    _acc(grads, f"{prefix}.W2", dW2)
    _acc(grads, f"{prefix}.b2", db2)
    return dx


def _acc(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def _mha_weights(p, prefix):
    return {n: p[f"{prefix}.mha.{n}"] for n in MHA_WEIGHTS}


def _residual_norm(x, sub, p, ln, rate, rng):
    sub, keep = nk.dropout(sub, rate, rng)
    y, cache = nk.layer_norm(x + sub, p[f"{ln}.gamma"], p[f"{ln}.beta"])
    return y, (keep, cache)


def _residual_norm_backward(dy, p, ln, cache, grads):
    """Return ``(d_residual_input, d_sublayer_output)``."""
    keep, ln_cache = cache
    dsum, dgamma, dbeta = nk.layer_norm_backward(dy, p[f"{ln}.gamma"], ln_cache)
    _acc(grads, f"{ln}.gamma", dgamma)
    _acc(grads, f"{ln}.beta", dbeta)
    return dsum, nk.dropout_backward(dsum, keep)


# ---------------------------------------------------------------------------
# encoder / decoder


def encoder_block(x, p, b, config, mask, rng=None):
    pre = f"encoder.{b}"
    w = _mha_weights(p, pre)
    a, attn, c_mha = multi_head(x, x, w, mask, config.h, config.attn_scale)
    y, c1 = _residual_norm(x, a, p, f"{pre}.ln1", config.dropout_rate, rng)
    f, c_ffn = _ffn(y, p, f"{pre}.ffn")
    z, c2 = _residual_norm(y, f, p, f"{pre}.ln2", config.dropout_rate, rng)
    return z, attn, (c_mha, c1, c_ffn, c2)


def encoder_block_backward(dz, p, b, cache, grads):
    pre = f"encoder.{b}"
    c_mha, c1, c_ffn, c2 = cache
    dy, df = _residual_norm_backward(dz, p, f"{pre}.ln2", c2, grads)
    dy = dy + _ffn_backward(df, p, f"{pre}.ffn", c_ffn, grads)
    dx, da = _residual_norm_backward(dy, p, f"{pre}.ln1", c1, grads)
    w = _mha_weights(p, pre)
    dxq, dxkv, dw = multi_head_backward(da, w, c_mha)
    for n in MHA_WEIGHTS:
        _acc(grads, f"{pre}.mha.{n}", dw[n])
    return dx + dxq + dxkv


def decoder_block(x, memory, p, b, config, mask, rng=None):
    """Self-attention over the query stream, then attention onto ``memory``
    with the same weights, then the feed-forward sub-layer."""
    pre = f"decoder.{b}"
    w = _mha_weights(p, pre)
    a1, attn_self, c_self = multi_head(x, x, w, mask, config.h, config.attn_scale)
    y, c1 = _residual_norm(x, a1, p, f"{pre}.ln1", config.dropout_rate, rng)
    a2, attn_cross, c_cross = multi_head(y, memory, w, mask, config.h, config.attn_scale)
    z, c2 = _residual_norm(y, a2, p, f"{pre}.ln2", config.dropout_rate, rng)
    f, c_ffn = _ffn(z, p, f"{pre}.ffn")
    out, c3 = _residual_norm(z, f, p, f"{pre}.ln3", config.dropout_rate, rng)
    return out, (attn_self, attn_cross), (c_self, c1, c_cross, c2, c_ffn, c3)


def decoder_block_backward(dout, p, b, cache, grads):
    """Return ``(dx, dmemory)``; both attention stages add into the one weight set."""
    pre = f"decoder.{b}"
    c_self, c1, c_cross, c2, c_ffn, c3 = cache
    w = _mha_weights(p, pre)
    dz, df = _residual_norm_backward(dout, p, f"{pre}.ln3", c3, grads)
    dz = dz + _ffn_backward(df, p, f"{pre}.ffn", c_ffn, grads)
    dy, da2 = _residual_norm_backward(dz, p, f"{pre}.ln2", c2, grads)
    dyq, dmem, dw_cross = multi_head_backward(da2, w, c_cross)
    dy = dy + dyq
    dx, da1 = _residual_norm_backward(dy, p, f"{pre}.ln1", c1, grads)
    dxq, dxkv, dw_self = multi_head_backward(da1, w, c_self)
    for n in MHA_WEIGHTS:
        _acc(grads, f"{pre}.mha.{n}", dw_self[n] + dw_cross[n])
    return dx + dxq + dxkv, dmem


def encode(interaction_stream, params, config, rng=None):
    """Run the encoder stack on ``[B, k, d]``; returns ``(T, attentions, caches)``."""
    mask = causal_mask(interaction_stream.shape[1])
    x, attns, caches = interaction_stream, [], []
    for b in range(config.n_blocks):
        x, attn, c = encoder_block(x, params, b, config, mask, rng)
        attns.append(attn)
        caches.append(c)
    return x, attns, caches


def decode(exercise_stream, memory, params, config, rng=None):
    """Decoder stack plus prediction head; returns ``(logits, attentions, caches)``."""
    mask = causal_mask(exercise_stream.shape[1])
    x, attns, caches = exercise_stream, [], []
    for b in range(config.n_blocks):
        x, attn, c = decoder_block(x, memory, params, b, config, mask, rng)
        attns.append(attn)
        caches.append(c)
    logits = nk.linear(x, params["head.W"], params["head.b"])[..., 0]
    return logits, attns, caches + [x]


# ---------------------------------------------------------------------------
# full model


def forward_batch(params, config: ModelConfig, interaction_tokens, query_tokens, rng=None):
    """Batched forward pass. Returns ``(probs, trace, cache)``; ``cache`` feeds :func:`backward`.

    ``rng`` enables dropout (training only); leave it None for inference.
    """
    itok = np.atleast_2d(np.asarray(interaction_tokens))
    qtok = np.atleast_2d(np.asarray(query_tokens))
    if itok.shape[1] != config.k or qtok.shape != itok.shape:
        raise ValueError(f"token arrays must have shape [B, {config.k}], got {itok.shape} and {qtok.shape}")
    _check_tokens(itok, 2 * config.e, "interaction")
    _check_tokens(qtok, config.e, "query")
    dtype = params["interaction_embedding"].dtype
    pos = positional_table(config.k, config.d, dtype)

    I_stream, I_raw = _embed(itok, params["interaction_embedding"], params["interaction_proj"], pos)
    E_stream, E_raw = _embed(qtok, params["exercise_embedding"], params["exercise_proj"], pos)
    memory, enc_attn, enc_caches = encode(I_stream, params, config, rng)
    logits, dec_attn, dec_caches = decode(E_stream, memory, params, config, rng)
    probs = nk.sigmoid(logits)

    trace = ForwardTrace(
        I_stream,
        E_stream,
        memory,
        logits,
        probs,
        {
            "encoder_self": enc_attn,
            "decoder_self": [a[0] for a in dec_attn],
            "decoder_cross": [a[1] for a in dec_attn],
        },
    )
    cache = (itok, qtok, I_raw, E_raw, enc_caches, dec_caches)
    return probs, trace, cache


def forward(window: EncodedWindow, params, config: ModelConfig):
    """Single-window forward pass: returns ``(probs[k], ForwardTrace)``."""
    probs, trace, _ = forward_batch(
        params, config, window.interaction_tokens[None], window.query_tokens[None]
    )
    return probs[0], trace.item(0)


def backward(dlogits, params, config: ModelConfig, cache) -> dict[str, np.ndarray]:
    """Gradients of every parameter given ``dL/dlogits`` of shape ``[B, k]``."""
    itok, qtok, I_raw, E_raw, enc_caches, dec_caches = cache
    grads: dict[str, np.ndarray] = {}

    x_last = dec_caches[-1]
    dx, dW, db = nk.linear_backward(dlogits[..., None], x_last, params["head.W"])
    grads["head.W"], grads["head.b"] = dW, db

    dmemory = np.zeros_like(x_last)
    for b in reversed(range(config.n_blocks)):
        dx, dmem = decoder_block_backward(dx, params, b, dec_caches[b], grads)
        dmemory = dmemory + dmem
    dE_stream = dx

    dx = dmemory
    for b in reversed(range(config.n_blocks)):
        dx = encoder_block_backward(dx, params, b, enc_caches[b], grads)
    dI_stream = dx

    for stream_grad, raw, tokens, table, proj in (
        (dI_stream, I_raw, itok, "interaction_embedding", "interaction_proj"),
        (dE_stream, E_raw, qtok, "exercise_embedding", "exercise_proj"),
    ):
        draw, dproj, _ = nk.linear_backward(stream_grad, raw, params[proj], has_bias=False)
        grads[proj] = dproj
        dtable = np.zeros_like(params[table])
        np.add.at(dtable, tokens.reshape(-1), draw.reshape(-1, draw.shape[-1]))
        grads[table] = dtable

    return {name: grads[name] for name in params}


def loss_and_grad(params, config: ModelConfig, batch, rng=None):
    """Masked mean BCE over a stacked batch and its gradients.

    ``batch`` is ``(interaction_tokens, query_tokens, targets, valid_mask)``.
    Returns ``(loss, grads, probs)``.
    """
    itok, qtok, targets, valid = batch
    probs, _, cache = forward_batch(params, config, itok, qtok, rng)
    loss = nk.bce_masked(probs, targets, valid)
    dlogits = nk.bce_logits_backward(probs, targets, valid)
    return loss, backward(dlogits, params, config, cache), probs
