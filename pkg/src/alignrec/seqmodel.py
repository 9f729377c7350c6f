"""A small decoder-only transformer in numpy with hand-written reverse-mode gradients.

Pre-norm blocks (LayerNorm -> causal multi-head attention -> residual,
LayerNorm -> GELU MLP -> residual), learned absolute position embeddings and an
untied output projection.  Everything runs in float64.

Loss is the mean next-token cross-entropy over label positions only: for a
batch ``tokens[b, t]`` with ``mask[b, t]`` true, token ``t`` is a target and is
predicted from the hidden state at ``t - 1``.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ._util import rng_for
from .errors import DataError, NumericalError

log = logging.getLogger(__name__)

_LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int = 256
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.0
    seed: int = 0
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if min(self.vocab_size, self.context_len, self.model_dim, self.n_layers,
               self.n_heads, self.ff_dim) < 1:
            raise ValueError("model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in checkpoint order."""
    d, f, v = cfg.model_dim, cfg.ff_dim, cfg.vocab_size
    shapes = {"tok_emb": (v, d), "pos_emb": (cfg.context_len, d)}
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_o": (d, d), p + "attn.b_o": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, f), p + "mlp.b1": (f,),
            p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,)})
    if not cfg.tie_embeddings:
        shapes["head.w"] = (d, v)
    shapes["head.b"] = (v,)
    return shapes


def _sinusoids(length, dim):
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10_000.0) * (np.arange(0, dim, 2) / dim))
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return out


@dataclass
class Params:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> Params:
        return Params(self.config, {k: v.copy() for k, v in self.arrays.items()})

    @property
    def head_w(self) -> np.ndarray:
        return self.arrays["tok_emb"].T if self.config.tie_embeddings else self.arrays["head.w"]

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def checksum(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name in param_shapes(self.config):
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def init_params(cfg: ModelConfig) -> Params:
    """Gaussian init (std 0.02, residual projections scaled by 1/sqrt(2 * n_layers)).

    Position embeddings start from scaled sinusoids and are trained like everything else.
    """
    rng = rng_for(cfg.seed, "init")
    std = 0.02
    out_std = std / np.sqrt(2 * cfg.n_layers)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".g",)):
            arrays[name] = np.ones(shape)
        elif name.endswith((".b", "b_qkv", "b_o", "b1", "b2")) or name == "head.b":
            arrays[name] = np.zeros(shape)
        elif name == "pos_emb":
            arrays[name] = std * np.sqrt(2.0) * _sinusoids(*shape)
        elif name.endswith(("w_o", "w2")):
            arrays[name] = rng.normal(0.0, out_std, shape)
        else:
            arrays[name] = rng.normal(0.0, std, shape)
    return Params(cfg, arrays)


# -- building blocks ----------------------------------------------------------

def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layernorm_back(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _causal_mask(seq):
    return np.triu(np.ones((seq, seq), dtype=bool), k=1)


def _attention(h, w_qkv, b_qkv, w_o, b_o, n_heads):
    bsz, seq, d = h.shape
    dh = d // n_heads
    qkv = h @ w_qkv + b_qkv
    q, k, v = (qkv[..., i * d:(i + 1) * d].reshape(bsz, seq, n_heads, dh).transpose(0, 2, 1, 3)
               for i in range(3))
    scale = 1.0 / np.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores = np.where(_causal_mask(seq), -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, d)
    out = ctx @ w_o + b_o
    return out, (h, q, k, v, p, ctx, scale)


def _attention_back(dout, cache, w_qkv, w_o, n_heads):
    h, q, k, v, p, ctx, scale = cache
    bsz, seq, d = h.shape
    dh = d // n_heads
    d_wo = ctx.reshape(-1, d).T @ dout.reshape(-1, d)
    d_bo = dout.reshape(-1, d).sum(axis=0)
    dctx = (dout @ w_o.T).reshape(bsz, seq, n_heads, dh).transpose(0, 2, 1, 3)
    dp = dctx @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ dctx
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.concatenate([x.transpose(0, 2, 1, 3).reshape(bsz, seq, d) for x in (dq, dk, dv)],
                          axis=-1)
    d_wqkv = h.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
    d_bqkv = dqkv.reshape(-1, 3 * d).sum(axis=0)
    dh_in = dqkv @ w_qkv.T
    return dh_in, d_wqkv, d_bqkv, d_wo, d_bo


def _check_ids(params, tokens):
    cfg = params.config
    if tokens.shape[-1] > cfg.context_len:
        raise DataError(f"sequence length {tokens.shape[-1]} exceeds context {cfg.context_len}")
    if tokens.shape[-1] == 0:
        raise DataError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DataError("token id outside vocabulary")


def _trunk(params, tokens, *, dropout_rng=None):
    """Embeddings and transformer blocks; returns final pre-norm hidden states and caches."""
    cfg = params.config
    a = params.arrays
    seq = tokens.shape[1]
    x = a["tok_emb"][tokens] + a["pos_emb"][:seq]
    caches = []
    keep = 1.0 - cfg.dropout

    def drop(y):
        if dropout_rng is None or cfg.dropout == 0.0:
            return y, None
        m = (dropout_rng.random(y.shape) < keep) / keep
        return y * m, m

    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        h, ln1 = _layernorm(x, a[p + "ln1.g"], a[p + "ln1.b"])
        att, att_cache = _attention(h, a[p + "attn.w_qkv"], a[p + "attn.b_qkv"],
                                    a[p + "attn.w_o"], a[p + "attn.b_o"], cfg.n_heads)
        att, m1 = drop(att)
        x = x + att
        h2, ln2 = _layernorm(x, a[p + "ln2.g"], a[p + "ln2.b"])
        u = h2 @ a[p + "mlp.w1"] + a[p + "mlp.b1"]
        g, t = _gelu(u)
        mlp = g @ a[p + "mlp.w2"] + a[p + "mlp.b2"]
        mlp, m2 = drop(mlp)
        x = x + mlp
        caches.append((ln1, att_cache, m1, ln2, h2, u, t, g, m2))
    return x, caches


def _trunk_back(params, tokens, dx, caches, grads):
    cfg = params.config
    a = params.arrays
    d = cfg.model_dim
    for layer in reversed(range(cfg.n_layers)):
        p = f"layers.{layer}."
        ln1, att_cache, m1, ln2, h2, u, t, g, m2 = caches[layer]
        dmlp = dx if m2 is None else dx * m2
        grads[p + "mlp.w2"] += g.reshape(-1, g.shape[-1]).T @ dmlp.reshape(-1, d)
        grads[p + "mlp.b2"] += dmlp.reshape(-1, d).sum(axis=0)
        dg = dmlp @ a[p + "mlp.w2"].T
        du = _gelu_back(dg, u, t)
        grads[p + "mlp.w1"] += h2.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        grads[p + "mlp.b1"] += du.reshape(-1, du.shape[-1]).sum(axis=0)
        dh2 = du @ a[p + "mlp.w1"].T
        dx_ln, dgam, dbet = _layernorm_back(dh2, ln2)
        grads[p + "ln2.g"] += dgam
        grads[p + "ln2.b"] += dbet
        dx = dx + dx_ln

        datt = dx if m1 is None else dx * m1
        dh, d_wqkv, d_bqkv, d_wo, d_bo = _attention_back(
            datt, att_cache, a[p + "attn.w_qkv"], a[p + "attn.w_o"], cfg.n_heads)
        grads[p + "attn.w_qkv"] += d_wqkv
        grads[p + "attn.b_qkv"] += d_bqkv
        grads[p + "attn.w_o"] += d_wo
        grads[p + "attn.b_o"] += d_bo
        dx_ln, dgam, dbet = _layernorm_back(dh, ln1)
        grads[p + "ln1.g"] += dgam
        grads[p + "ln1.b"] += dbet
        dx = dx + dx_ln

    seq = tokens.shape[1]
    grads["pos_emb"][:seq] += dx.sum(axis=0)
    np.add.at(grads["tok_emb"], tokens.ravel(), dx.reshape(-1, d))


def _head(params, hidden):
    a = params.arrays
    h, cache = _layernorm(hidden, a["ln_f.g"], a["ln_f.b"])
    return h @ params.head_w + a["head.b"], (h, cache)


# -- public API -----------------------------------------------------------------

def forward_batch(params: Params, tokens) -> np.ndarray:
    """Logits ``[batch, seq, vocab]``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    _check_ids(params, tokens)
    hidden, _ = _trunk(params, tokens)
    logits, _ = _head(params, hidden)
    return logits


def forward(params: Params, token_ids) -> np.ndarray:
    """Logits ``[seq, vocab]`` for one sequence; row t depends on ids[0..t] only."""
    return forward_batch(params, np.asarray(token_ids, dtype=np.int64)[None, :])[0]


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def next_token_logprobs(params: Params, prefix_ids) -> np.ndarray:
    prefix = np.asarray(prefix_ids, dtype=np.int64)
    if prefix.size == 0:
        raise DataError("prefix must be non-empty")
    return log_softmax(forward(params, prefix)[-1])


def last_token_logprobs(params: Params, tokens) -> np.ndarray:
    """Next-token log-probs for a batch of equal-length sequences, ``[batch, vocab]``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    _check_ids(params, tokens)
    hidden, _ = _trunk(params, tokens)
    logits, _ = _head(params, hidden[:, -1:, :])
    return log_softmax(logits[:, 0, :])


@dataclass
class Batch:
    tokens: np.ndarray  # [batch, seq] int
    mask: np.ndarray  # [batch, seq] bool, True where tokens[b, t] is a label

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        self.mask = np.atleast_2d(np.asarray(self.mask, dtype=bool))
        if self.tokens.shape != self.mask.shape:
            raise DataError("tokens and mask shapes differ")
        if self.mask[:, 0].any():
            raise DataError("position 0 cannot be a label (nothing precedes it)")

    @classmethod
    def from_examples(cls, examples, pad_id: int = 0) -> Batch:
        seqs = [list(ex.input_ids) + list(ex.label_ids) for ex in examples]
        width = max(len(s) for s in seqs)
        tokens = np.full((len(seqs), width), pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=bool)
        for row, (ex, seq) in enumerate(zip(examples, seqs)):
            tokens[row, :len(seq)] = seq
            mask[row, len(ex.input_ids):len(seq)] = True
        return cls(tokens, mask)


def _loss_and_cache(params, batch, dropout_rng=None):
    _check_ids(params, batch.tokens)
    if not batch.mask.any():
        raise DataError("loss needs at least one masked (label) position")
    hidden, caches = _trunk(params, batch.tokens, dropout_rng=dropout_rng)
    rows, cols = np.nonzero(batch.mask)
    selected = hidden[rows, cols - 1]
    logits, head_cache = _head(params, selected)
    logp = log_softmax(logits)
    targets = batch.tokens[rows, cols]
    loss = -logp[np.arange(len(rows)), targets].mean()
    return loss, (hidden, caches, rows, cols, logp, targets, head_cache)


def loss(params: Params, batch: Batch) -> float:
    """Mean negative log-likelihood over label positions."""
    return float(_loss_and_cache(params, batch)[0])


def loss_and_grads(params: Params, batch: Batch, dropout_rng=None
                   ) -> tuple[float, dict[str, np.ndarray]]:
    value, (hidden, caches, rows, cols, logp, targets, (h_f, ln_f)) = _loss_and_cache(
        params, batch, dropout_rng)
    a = params.arrays
    grads = {k: np.zeros_like(v) for k, v in a.items()}
    m = len(rows)
    dlogits = np.exp(logp)
    dlogits[np.arange(m), targets] -= 1.0
    dlogits /= m
    d_head_w = h_f.T @ dlogits
    if params.config.tie_embeddings:
        grads["tok_emb"] += d_head_w.T
    else:
        grads["head.w"] += d_head_w
    grads["head.b"] += dlogits.sum(axis=0)
    dsel, dg, db = _layernorm_back(dlogits @ params.head_w.T, ln_f)
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db
    dhidden = np.zeros_like(hidden)
    np.add.at(dhidden, (rows, cols - 1), dsel)
    _trunk_back(params, batch.tokens, dhidden, caches, grads)
    return float(value), grads


def backward(params: Params, batch: Batch) -> dict[str, np.ndarray]:
    """Gradient of ``loss(params, batch)`` with respect to every parameter."""
    return loss_and_grads(params, batch)[1]


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    grad_clip: float | None = 1.0
    warmup_steps: int = 0
    # "constant" or "cosine" (decays to 10% of the peak rate)
    schedule: str = "constant"
    log_every: int = 0


@dataclass
class TrainResult:
    params: Params
    losses: list[float] = field(default_factory=list)


def _lr_at(step, s: TrainSettings):
    lr = s.learning_rate
    if s.warmup_steps and step < s.warmup_steps:
        return lr * (step + 1) / s.warmup_steps
    if s.schedule == "cosine":
        span = max(s.steps - s.warmup_steps, 1)
        frac = (step - s.warmup_steps) / span
        return lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * frac)))
    return lr


def train(corpus, config: ModelConfig, settings: TrainSettings = TrainSettings(), *,
          pad_id: int = 0, params: Params | None = None) -> TrainResult:
    """Adam on mean label cross-entropy with seeded, epoch-wise shuffled mini-batches."""
    examples = list(corpus)
    if not examples:
        raise DataError("corpus is empty")
    too_long = [len(ex.input_ids) + len(ex.label_ids) for ex in examples]
    if max(too_long) > config.context_len:
        raise DataError(f"example of length {max(too_long)} exceeds context {config.context_len}")
    params = init_params(config) if params is None else params.copy()
    a = params.arrays
    m = {k: np.zeros_like(v) for k, v in a.items()}
    v = {k: np.zeros_like(x) for k, x in a.items()}
    rng = rng_for(settings.seed, "batches")
    drop_rng = rng_for(settings.seed, "dropout") if config.dropout > 0 else None
    order, cursor = rng.permutation(len(examples)), 0
    losses = []
    b1, b2 = settings.beta1, settings.beta2
    for step in range(settings.steps):
        if cursor + settings.batch_size > len(order):
            order, cursor = rng.permutation(len(examples)), 0
        idx = order[cursor:cursor + settings.batch_size]
        cursor += settings.batch_size
        batch = Batch.from_examples([examples[i] for i in idx], pad_id)
        value, grads = loss_and_grads(params, batch, drop_rng)
        if not np.isfinite(value):
            raise NumericalError(f"loss became non-finite at step {step}")
        if settings.grad_clip:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > settings.grad_clip:
                for g in grads.values():
                    g *= settings.grad_clip / norm
        lr = _lr_at(step, settings)
        t = step + 1
        for name, g in grads.items():
            m[name] = b1 * m[name] + (1 - b1) * g
            v[name] = b2 * v[name] + (1 - b2) * g * g
            mhat = m[name] / (1 - b1 ** t)
            vhat = v[name] / (1 - b2 ** t)
            a[name] -= lr * mhat / (np.sqrt(vhat) + settings.eps)
        losses.append(value)
        if settings.log_every and (step % settings.log_every == 0 or step == settings.steps - 1):
            log.info("step %d loss %.4f", step, value)
    for name, arr in a.items():
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"parameter {name} became non-finite")
    return TrainResult(params, losses)


# -- checkpoints ------------------------------------------------------------------

_MAGIC = b"ALIGNREC-CKPT 1\n"


def save_checkpoint(params: Params, path) -> None:
    """Header line of JSON config, then each parameter as raw little-endian float64.

    Parameters are written in ``param_shapes(config)`` order.
    """
    header = json.dumps(asdict(params.config), sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header)
        for name in param_shapes(params.config):
            fh.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Params:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        config = ModelConfig(**json.loads(fh.readline()))
        body = fh.read()
    stream = io.BytesIO(body)
    arrays = {}
    for name, shape in param_shapes(config).items():
        count = int(np.prod(shape))
        raw = stream.read(8 * count)
        if len(raw) != 8 * count:
            raise DataError(f"{path}: truncated at parameter {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if stream.read(1):
        raise DataError(f"{path}: trailing bytes after last parameter")
    return Params(config, arrays)
