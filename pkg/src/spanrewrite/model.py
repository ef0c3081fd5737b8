"""Tiny encoder-decoder transformer with exact gradients.

T5-style simplifications: pre-norm residual blocks, scale-only RMS
normalization (no bias, no centering), a learned relative-position bias per
head over clamped distances, ReLU feed-forward, and tied input/output
embeddings. Everything is float64 numpy; gradients are derived by hand.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

NEG_INF = -1e30
EPS = 1e-6
# tied-embedding init std is EMBED_INIT / sqrt(d_model): small enough for
# near-uniform initial logits, large enough to memorize quickly under Adam
EMBED_INIT = 0.625


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_rel_distance: int = 8
    dropout: float = 0.0
    max_decode_len: int = 64
    pad_id: int = 0
    bos_id: int = 2
    eos_id: int = 3

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_rel_distance", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, R = cfg.d_model, cfg.d_ff, cfg.max_rel_distance
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (cfg.vocab_size, d),
        "enc.rel_bias": (cfg.n_heads, 2 * R + 1),
        "dec.rel_bias": (cfg.n_heads, 2 * R + 1),
    }
    for l in range(cfg.n_layers):
        p = f"enc.{l}."
        shapes[p + "ln1"] = (d,)
        for w in "qkvo":
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "ln2"] = (d,)
        shapes[p + "ff.wi"] = (d, f)
        shapes[p + "ff.wo"] = (f, d)
    shapes["enc.ln_f"] = (d,)
    for l in range(cfg.n_layers):
        p = f"dec.{l}."
        shapes[p + "ln1"] = (d,)
        for w in "qkvo":
            shapes[p + "self." + w] = (d, d)
        shapes[p + "ln2"] = (d,)
        for w in "qkvo":
            shapes[p + "cross." + w] = (d, d)
        shapes[p + "ln3"] = (d,)
        shapes[p + "ff.wi"] = (d, f)
        shapes[p + "ff.wo"] = (f, d)
    shapes["dec.ln_f"] = (d,)
    return shapes


def n_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    d, f, L = cfg.d_model, cfg.d_ff, cfg.n_layers
    rel = 2 * cfg.n_heads * (2 * cfg.max_rel_distance + 1)
    enc = L * (4 * d * d + 2 * d * f + 2 * d) + d
    dec = L * (8 * d * d + 2 * d * f + 3 * d) + d
    return cfg.vocab_size * d + rel + enc + dec


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.d_model
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "embed":
            params[name] = rng.normal(0.0, EMBED_INIT / math.sqrt(d), shape)
        elif name.endswith("rel_bias"):
            params[name] = rng.normal(0.0, 0.1, shape)
        elif len(shape) == 1:
            params[name] = np.ones(shape)
        else:
            params[name] = rng.normal(0.0, shape[0] ** -0.5, shape)
    return params


# ---------------------------------------------------------------------------
# building blocks (forward returns (out, cache); backward returns input grads)


def _rms_fwd(x, g):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + EPS)
    xh = x / r
    return xh * g, (xh, r)


def _rms_bwd(dy, g, cache, grads, name):
    xh, r = cache
    grads[name] += (dy * xh).reshape(-1, xh.shape[-1]).sum(axis=0)
    dxh = dy * g
    return (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True)) / r


def _rel_index(tq: int, tk: int, R: int, offset: int = 0) -> np.ndarray:
    i = np.arange(tq)[:, None] + offset
    j = np.arange(tk)[None, :]
    return np.clip(j - i, -R, R) + R


def _split(x, H):
    B, T, d = x.shape
    return x.reshape(B, T, H, d // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _attn_fwd(params, prefix, xq, xkv, H, bias, allow):
    Wq, Wk, Wv, Wo = (params[prefix + w] for w in "qkvo")
    q = _split(xq @ Wq, H)
    k = _split(xkv @ Wk, H)
    v = _split(xkv @ Wv, H)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    if bias is not None:
        s = s + bias
    s = np.where(allow, s, NEG_INF)
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    ctx = _merge(a @ v)
    return ctx @ Wo, (xq, xkv, q, k, v, a, ctx, scale)


def _attn_bwd(dout, params, prefix, cache, grads, H):
    xq, xkv, q, k, v, a, ctx, scale = cache
    Wq, Wk, Wv, Wo = (params[prefix + w] for w in "qkvo")
    d = xq.shape[-1]
    grads[prefix + "o"] += ctx.reshape(-1, d).T @ dout.reshape(-1, d)
    dctx = _split(dout @ Wo.T, H)
    da = dctx @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ dctx
    ds = a * (da - np.sum(da * a, axis=-1, keepdims=True))
    dbias = ds.sum(axis=0)
    ds = ds * scale
    dq = _merge(ds @ k)
    dk = _merge(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge(dv)
    grads[prefix + "q"] += xq.reshape(-1, d).T @ dq.reshape(-1, d)
    grads[prefix + "k"] += xkv.reshape(-1, d).T @ dk.reshape(-1, d)
    grads[prefix + "v"] += xkv.reshape(-1, d).T @ dv.reshape(-1, d)
    dxq = dq @ Wq.T
    dxkv = dk @ Wk.T + dv @ Wv.T
    return dxq, dxkv, dbias


def _ff_fwd(params, prefix, x):
    h = x @ params[prefix + "wi"]
    hr = np.maximum(h, 0.0)
    return hr @ params[prefix + "wo"], (x, h, hr)


def _ff_bwd(dout, params, prefix, cache, grads):
    x, h, hr = cache
    d, f = params[prefix + "wi"].shape
    grads[prefix + "wo"] += hr.reshape(-1, f).T @ dout.reshape(-1, d)
    dh = (dout @ params[prefix + "wo"].T) * (h > 0)
    grads[prefix + "wi"] += x.reshape(-1, d).T @ dh.reshape(-1, f)
    return dh @ params[prefix + "wi"].T


def _dropout(x, p, rng):
    if rng is None or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep, keep


def _bias_grad(dbias, idx, width):
    # scatter per-position bias gradients back onto the distance table
    H = dbias.shape[0]
    flat = idx.ravel()
    return np.stack([np.bincount(flat, weights=dbias[h].ravel(), minlength=width) for h in range(H)])


# ---------------------------------------------------------------------------
# full network


def _is_batch(ids) -> bool:
    if isinstance(ids, np.ndarray):
        return ids.ndim == 2
    return bool(len(ids)) and isinstance(ids[0], (list, tuple, np.ndarray))


def _as_batch(ids, pad_id):
    if isinstance(ids, np.ndarray) and ids.ndim == 2:
        return ids.astype(np.int64), ids != pad_id
    if _is_batch(ids):
        return pad_batch(ids, pad_id)
    arr = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    return arr, np.ones(arr.shape, dtype=bool)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    T = max(1, max(len(s) for s in seqs))
    out = np.full((len(seqs), T), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        valid[i, : len(s)] = True
    return out, valid


def _encode(params, cfg, src, src_valid, rng=None):
    H, R = cfg.n_heads, cfg.max_rel_distance
    emb_mult = math.sqrt(cfg.d_model)
    x = params["embed"][src] * emb_mult
    S = src.shape[1]
    idx = _rel_index(S, S, R)
    bias = params["enc.rel_bias"][:, idx][None]
    allow = src_valid[:, None, None, :]
    caches = []
    for l in range(cfg.n_layers):
        p = f"enc.{l}."
        h1, c1 = _rms_fwd(x, params[p + "ln1"])
        a, ca = _attn_fwd(params, p + "attn.", h1, h1, H, bias, allow)
        a, m1 = _dropout(a, cfg.dropout, rng)
        x = x + a
        h2, c2 = _rms_fwd(x, params[p + "ln2"])
        f, cf = _ff_fwd(params, p + "ff.", h2)
        f, m2 = _dropout(f, cfg.dropout, rng)
        x = x + f
        caches.append((c1, ca, m1, c2, cf, m2))
    out, cfin = _rms_fwd(x, params["enc.ln_f"])
    return out, (src, idx, caches, cfin)


def _decode_stack(params, cfg, tgt_in, tgt_valid, enc_out, src_valid, rng=None):
    H, R = cfg.n_heads, cfg.max_rel_distance
    emb_mult = math.sqrt(cfg.d_model)
    x = params["embed"][tgt_in] * emb_mult
    T = tgt_in.shape[1]
    idx = _rel_index(T, T, R)
    bias = params["dec.rel_bias"][:, idx][None]
    causal = np.tril(np.ones((T, T), dtype=bool))
    self_allow = causal[None, None] & tgt_valid[:, None, None, :]
    cross_allow = src_valid[:, None, None, :]
    caches = []
    for l in range(cfg.n_layers):
        p = f"dec.{l}."
        h1, c1 = _rms_fwd(x, params[p + "ln1"])
        a, ca = _attn_fwd(params, p + "self.", h1, h1, H, bias, self_allow)
        a, m1 = _dropout(a, cfg.dropout, rng)
        x = x + a
        h2, c2 = _rms_fwd(x, params[p + "ln2"])
        c, cc = _attn_fwd(params, p + "cross.", h2, enc_out, H, None, cross_allow)
        c, m2 = _dropout(c, cfg.dropout, rng)
        x = x + c
        h3, c3 = _rms_fwd(x, params[p + "ln3"])
        f, cf = _ff_fwd(params, p + "ff.", h3)
        f, m3 = _dropout(f, cfg.dropout, rng)
        x = x + f
        caches.append((c1, ca, m1, c2, cc, m2, c3, cf, m3))
    out, cfin = _rms_fwd(x, params["dec.ln_f"])
    logits = out @ params["embed"].T
    return logits, (tgt_in, idx, caches, cfin, out)


def forward(params, cfg: ModelConfig, source_ids, target_ids_in, rng=None) -> np.ndarray:
    """Logits for every decoder input position.

    Accepts a single sequence pair (returns ``[T, V]``) or padded batches
    (returns ``[B, T, V]``).
    """
    single = not _is_batch(source_ids)
    src, src_valid = _as_batch(source_ids, cfg.pad_id)
    tgt, tgt_valid = _as_batch(target_ids_in, cfg.pad_id)
    _check_ids(src, cfg)
    _check_ids(tgt, cfg)
    if src.shape[0] != tgt.shape[0]:
        raise ValueError("source and target batch sizes differ")
    if tgt.shape[1] == 0:
        raise ValueError("target must be nonempty")
    enc, _ = _encode(params, cfg, src, src_valid, rng)
    logits, _ = _decode_stack(params, cfg, tgt, tgt_valid, enc, src_valid, rng)
    return logits[0] if single else logits


def _check_ids(ids, cfg):
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id outside the vocabulary")


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], cfg: ModelConfig):
    """Pad (source, target) pairs into teacher-forcing arrays.

    Decoder input is ``<bos> target`` and labels are ``target <eos>``. Pairs
    with an empty target are dropped.
    """
    kept = [(s, t) for s, t in pairs if len(t) > 0]
    if not kept:
        raise ValueError("empty batch")
    src, src_valid = pad_batch([s for s, _ in kept], cfg.pad_id)
    dec_in, tgt_valid = pad_batch([[cfg.bos_id, *t] for _, t in kept], cfg.pad_id)
    labels, _ = pad_batch([[*t, cfg.eos_id] for _, t in kept], cfg.pad_id)
    return src, src_valid, dec_in, tgt_valid, labels


def loss_and_grad(params, cfg: ModelConfig, pairs, rng=None, need_grad: bool = True):
    """Mean token cross-entropy over non-pad label positions, and its exact gradient."""
    src, src_valid, dec_in, tgt_valid, labels = make_batch(pairs, cfg)
    _check_ids(src, cfg)
    _check_ids(dec_in, cfg)
    enc, ecache = _encode(params, cfg, src, src_valid, rng)
    logits, dcache = _decode_stack(params, cfg, dec_in, tgt_valid, enc, src_valid, rng)
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n_tok = tgt_valid.sum()
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked[tgt_valid])) / n_tok
    if not need_grad:
        return loss, None
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, labels[..., None], np.take_along_axis(dlogits, labels[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (tgt_valid / n_tok)[..., None]
    return loss, _backward(params, cfg, dlogits, src_valid, ecache, dcache)


def _backward(params, cfg, dlogits, src_valid, ecache, dcache):
    H, R = cfg.n_heads, cfg.max_rel_distance
    width = 2 * R + 1
    emb_mult = math.sqrt(cfg.d_model)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    V, d = params["embed"].shape

    tgt_in, didx, dcaches, dfin, dec_out = dcache
    grads["embed"] += dlogits.reshape(-1, V).T @ dec_out.reshape(-1, d)
    dx = _rms_bwd(dlogits @ params["embed"], params["dec.ln_f"], dfin, grads, "dec.ln_f")
    denc = 0.0
    dbias_dec = 0.0
    for l in reversed(range(cfg.n_layers)):
        p = f"dec.{l}."
        c1, ca, m1, c2, cc, m2, c3, cf, m3 = dcaches[l]
        df = dx if m3 is None else dx * m3
        dh3 = _ff_bwd(df, params, p + "ff.", cf, grads)
        dx = dx + _rms_bwd(dh3, params[p + "ln3"], c3, grads, p + "ln3")
        dc = dx if m2 is None else dx * m2
        dh2, de, _ = _attn_bwd(dc, params, p + "cross.", cc, grads, H)
        denc = denc + de
        dx = dx + _rms_bwd(dh2, params[p + "ln2"], c2, grads, p + "ln2")
        da = dx if m1 is None else dx * m1
        dq, dkv, db = _attn_bwd(da, params, p + "self.", ca, grads, H)
        dbias_dec = dbias_dec + db
        dx = dx + _rms_bwd(dq + dkv, params[p + "ln1"], c1, grads, p + "ln1")
    grads["dec.rel_bias"] += _bias_grad(dbias_dec, didx, width)
    np.add.at(grads["embed"], tgt_in, dx * emb_mult)

    src, eidx, ecaches, efin = ecache
    dx = _rms_bwd(denc, params["enc.ln_f"], efin, grads, "enc.ln_f")
    dbias_enc = 0.0
    for l in reversed(range(cfg.n_layers)):
        p = f"enc.{l}."
        c1, ca, m1, c2, cf, m2 = ecaches[l]
        df = dx if m2 is None else dx * m2
        dh2 = _ff_bwd(df, params, p + "ff.", cf, grads)
        dx = dx + _rms_bwd(dh2, params[p + "ln2"], c2, grads, p + "ln2")
        da = dx if m1 is None else dx * m1
        dq, dkv, db = _attn_bwd(da, params, p + "attn.", ca, grads, H)
        dbias_enc = dbias_enc + db
        dx = dx + _rms_bwd(dq + dkv, params[p + "ln1"], c1, grads, p + "ln1")
    grads["enc.rel_bias"] += _bias_grad(dbias_enc, eidx, width)
    np.add.at(grads["embed"], src, dx * emb_mult)
    return grads


def loss(params, cfg: ModelConfig, pairs) -> float:
    return loss_and_grad(params, cfg, pairs, need_grad=False)[0]


# ---------------------------------------------------------------------------
# decoding


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


StepFn = Callable[[int, np.ndarray, list[int]], int]


def decode_batch(
    params,
    cfg: ModelConfig,
    sources: Sequence[Sequence[int]],
    choose: StepFn,
    max_len: int | None = None,
) -> list[list[int]]:
    """Autoregressive decoding for a batch of sources.

    ``choose(row, probs, prefix)`` picks the next token for ``row`` from the
    softmax over the vocabulary; a row stops at ``<eos>`` or ``max_len``
    tokens (default ``cfg.max_decode_len``). Returned sequences exclude
    ``<bos>`` and ``<eos>``.
    """
    max_len = cfg.max_decode_len if max_len is None else max_len
    if not len(sources):
        return []
    src, src_valid = pad_batch(sources, cfg.pad_id)
    _check_ids(src, cfg)
    enc, _ = _encode(params, cfg, src, src_valid)
    B = len(sources)
    outs: list[list[int]] = [[] for _ in range(B)]
    active = list(range(B))
    prefix = np.full((B, max_len + 1), cfg.pad_id, dtype=np.int64)
    prefix[:, 0] = cfg.bos_id
    for t in range(max_len):
        if not active:
            break
        rows = np.array(active)
        dec_in = prefix[rows, : t + 1]
        logits, _ = _decode_stack(
            params, cfg, dec_in, np.ones(dec_in.shape, dtype=bool), enc[rows], src_valid[rows]
        )
        probs = softmax(logits[:, -1, :])
        still = []
        for r, row in enumerate(active):
            tok = int(choose(row, probs[r], outs[row]))
            if tok == cfg.eos_id:
                continue
            outs[row].append(tok)
            prefix[row, t + 1] = tok
            still.append(row)
        active = still
    return outs


def _cap(cfg, max_len):
    return cfg.max_decode_len if max_len is None else min(max_len, cfg.max_decode_len)


def greedy_batch(params, cfg, sources, max_len=None) -> list[list[int]]:
    max_len = _cap(cfg, max_len)
    return decode_batch(params, cfg, sources, lambda row, p, pre: int(np.argmax(p)), max_len)


def decode_greedy(params, cfg: ModelConfig, source_ids, max_len=None) -> list[int]:
    return greedy_batch(params, cfg, [list(source_ids)], max_len)[0]


def decode_nucleus(params, cfg: ModelConfig, source_ids, p: float, rng, max_len=None) -> list[int]:
    from .generators import nucleus_sample

    max_len = _cap(cfg, max_len)
    return decode_batch(
        params, cfg, [list(source_ids)], lambda row, probs, pre: nucleus_sample(probs, p, rng)[0], max_len
    )[0]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None


_MAGIC = b"SSRCKPT1"


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """JSON header (config, tensor table, step, RNG state) then raw little-endian float64 tensors."""
    tensors = [("param", k, v) for k, v in ckpt.params.items()]
    tensors += [("optim", k, v) for k, v in ckpt.optimizer.items()]
    table = []
    offset = 0
    for kind, name, arr in tensors:
        table.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": asdict(ckpt.config),
        "tensors": table,
        "step": ckpt.step,
        "meta": ckpt.meta,
        "rng_state": ckpt.rng_state,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for _, _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    params, optim = {}, {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"]).astype(np.float64)
        (params if t["kind"] == "param" else optim)[t["name"]] = arr
    return Checkpoint(
        ModelConfig(**header["config"]),
        params,
        header["step"],
        header["meta"],
        optim,
        header["rng_state"],
    )
