"""Toy BLIPv2-shaped stack: patch encoder, query-former bridge, causal LM.

Three named parameter partitions (vision_encoder / qformer / lm) with
atomic freezing policies. The query-former holds K learned query vectors;
generated explanations can be fed back as extra text rows, either forwarded
to the decoder (explicit) or only mixed into the K rows via attention
(implicit). The decoder is prefix-length agnostic: token positions are
numbered from the first token, not from the start of the stream.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import text as textmod
from .autodiff import Tensor, concat, embed_rows, gelu, narrow, no_grad, tile0
from .nncore import ParamTensor, attention, layer_norm, linear

CHECKPOINT_MAGIC = b"RVSE"
CHECKPOINT_VERSION = 1
PARTITIONS = ("vision_encoder", "qformer", "lm")
FREEZING_POLICIES = {
    "finetune": {"vision_encoder": True, "qformer": True, "lm": False},
    "selftrain": {"vision_encoder": False, "qformer": True, "lm": False},
}


@dataclass
class ModelConfig:
    vocab_size: int
    k_queries: int = 8
    d_model: int = 64
    patch: int = 8
    image_size: int = 32
    enc_layers: int = 2
    qf_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_gen: int = 24
    beams: int = 1
    max_positions: int = 96
    init_std: float = 0.08  # attention needs a non-vanishing logit scale to bootstrap at this width

    def validate(self) -> None:
        if self.k_queries < 1:
            raise ValueError("k_queries must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.image_size % self.patch != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch
        return side * side

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ModelParams:
    """Named parameter store partitioned into vision_encoder / qformer / lm."""

    def __init__(self):
        self.params: dict[str, ParamTensor] = {}
        self.partitions: dict[str, list[str]] = {p: [] for p in PARTITIONS}

    def add(self, partition: str, name: str, data) -> ParamTensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = ParamTensor(name, data)
        self.params[name] = p
        self.partitions[partition].append(name)
        return p

    def __getitem__(self, name: str) -> ParamTensor:
        return self.params[name]

    def all(self):
        return [self.params[n] for n in sorted(self.params)]

    def in_partition(self, partition: str):
        return [self.params[n] for n in self.partitions[partition]]

    def trainable(self):
        return [p for p in self.all() if p.trainable]

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def partition_of(self, name: str) -> str:
        for part, names in self.partitions.items():
            if name in names:
                return part
        raise KeyError(name)

    def partition_hash(self, partition: str) -> str:
        h = hashlib.sha256()
        for name in sorted(self.partitions[partition]):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f4").tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for part in PARTITIONS:
            for name in self.partitions[part]:
                p = out.add(part, name, self.params[name].data.copy())
                p.trainable = self.params[name].trainable
        return out


def set_freezing(params: ModelParams, policy: str) -> ModelParams:
    """Apply a partition-level trainable policy; values are untouched."""
    if policy not in FREEZING_POLICIES:
        raise ValueError(f"unknown freezing policy {policy!r}; expected one of {sorted(FREEZING_POLICIES)}")
    for partition, flag in FREEZING_POLICIES[policy].items():
        for p in params.in_partition(partition):
            p.trainable = flag
    return params


def _add_block(params: ModelParams, partition: str, prefix: str, d: int, ffn_mult: int, rng, cross: bool, std: float = 0.08) -> None:
    def w(shape):
        return rng.normal(0.0, std, size=shape)

    stacks = ["self_attn", "cross_attn"] if cross else ["attn"]
    n_ln = 1
    for stack in stacks:
        params.add(partition, f"{prefix}.ln{n_ln}.g", np.ones(d))
        params.add(partition, f"{prefix}.ln{n_ln}.b", np.zeros(d))
        n_ln += 1
        for mat in ("wq", "wk", "wv", "wo"):
            params.add(partition, f"{prefix}.{stack}.{mat}", w((d, d)))
        for vec in ("bq", "bk", "bv", "bo"):
            params.add(partition, f"{prefix}.{stack}.{vec}", np.zeros(d))
    params.add(partition, f"{prefix}.ln{n_ln}.g", np.ones(d))
    params.add(partition, f"{prefix}.ln{n_ln}.b", np.zeros(d))
    params.add(partition, f"{prefix}.ffn.w1", w((d, ffn_mult * d)))
    params.add(partition, f"{prefix}.ffn.b1", np.zeros(ffn_mult * d))
    params.add(partition, f"{prefix}.ffn.w2", w((ffn_mult * d, d)))
    params.add(partition, f"{prefix}.ffn.b2", np.zeros(d))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, v = cfg.d_model, cfg.vocab_size
    std = cfg.init_std
    params = ModelParams()

    patch_dim = cfg.patch * cfg.patch * 3
    params.add("vision_encoder", "vision.patch_embed.w", rng.normal(0.0, std, size=(patch_dim, d)))
    params.add("vision_encoder", "vision.patch_embed.b", np.zeros(d))
    params.add("vision_encoder", "vision.pos", rng.normal(0.0, std, size=(cfg.n_patches, d)))
    for i in range(cfg.enc_layers):
        _add_block(params, "vision_encoder", f"vision.l{i}", d, cfg.ffn_mult, rng, cross=False, std=std)
    params.add("vision_encoder", "vision.ln_out.g", np.ones(d))
    params.add("vision_encoder", "vision.ln_out.b", np.zeros(d))

    params.add("qformer", "qformer.queries", rng.normal(0.0, std, size=(cfg.k_queries, d)))
    params.add("qformer", "qformer.text_embed", rng.normal(0.0, std, size=(v, d)))
    params.add("qformer", "qformer.seg", rng.normal(0.0, std, size=(2, d)))
    for i in range(cfg.qf_layers):
        _add_block(params, "qformer", f"qformer.l{i}", d, cfg.ffn_mult, rng, cross=True, std=std)
    params.add("qformer", "qformer.ln_out.g", np.ones(d))
    params.add("qformer", "qformer.ln_out.b", np.zeros(d))
    params.add("qformer", "qformer.out_proj.w", rng.normal(0.0, std, size=(d, d)))
    params.add("qformer", "qformer.out_proj.b", np.zeros(d))

    params.add("lm", "lm.tok_embed", rng.normal(0.0, std, size=(v, d)))
    params.add("lm", "lm.pos", rng.normal(0.0, std, size=(cfg.max_positions, d)))
    for i in range(cfg.dec_layers):
        _add_block(params, "lm", f"lm.l{i}", d, cfg.ffn_mult, rng, cross=False, std=std)
    params.add("lm", "lm.ln_f.g", np.ones(d))
    params.add("lm", "lm.ln_f.b", np.zeros(d))
    params.add("lm", "lm.head.w", rng.normal(0.0, std, size=(d, v)))
    params.add("lm", "lm.head.b", np.zeros(v))
    return params


# -- forward passes ----------------------------------------------------------

def _attn_sublayer(x: Tensor, params: ModelParams, prefix: str, heads: int, mask=None, kv: Tensor | None = None):
    kv = x if kv is None else kv
    q = linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = linear(kv, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = linear(kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    out, weights = attention(q, k, v, heads, mask=mask)
    return linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"]), weights


def _ffn(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = gelu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _ln(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Row-major patch grid, each patch flattened; pixels scaled to [-1, 1]."""
    h, w, c = image.shape
    gh, gw = h // patch, w // patch
    x = image.astype(np.float64) / 127.5 - 1.0
    return x.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)


def encode_image(image: np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Patchify -> embed -> encoder blocks -> (P, d_model) features."""
    if image.shape != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"image shape {image.shape} does not match config {(cfg.image_size, cfg.image_size, 3)}")
    rows = Tensor(patchify(image, cfg.patch))
    x = linear(rows, params["vision.patch_embed.w"], params["vision.patch_embed.b"])
    x = x + params["vision.pos"].tensor
    for i in range(cfg.enc_layers):
        pre = f"vision.l{i}"
        a, _ = _attn_sublayer(_ln(x, params, f"{pre}.ln1"), params, f"{pre}.attn", cfg.heads)
        x = x + a
        x = x + _ffn(_ln(x, params, f"{pre}.ln2"), params, f"{pre}.ffn")
    return _ln(x, params, "vision.ln_out")


@dataclass
class ImageQueries:
    """Projected query rows for the decoder plus the cross-attention weights.

    `rows` has K rows in implicit mode (and at step 0), K+L in explicit mode
    when L explanation tokens were fed back. `cross_attn` is the last
    query-former layer's attention over image patches, shape
    (heads, input rows, P).
    """

    rows: Tensor
    cross_attn: Tensor
    n_queries: int
    mode: str
    truncated: bool = False


def qformer_forward(
    feats: Tensor,
    explanation_ids,
    params: ModelParams,
    cfg: ModelConfig,
    mode: str = "explicit",
) -> ImageQueries:
    """Mix the K learned queries (and optional explanation tokens) with image features."""
    if mode not in ("explicit", "implicit"):
        raise ValueError(f"unknown qformer mode {mode!r}")
    k = cfg.k_queries
    queries = params["qformer.queries"].tensor + embed_rows(params["qformer.seg"].tensor, [0] * k)
    truncated = False
    if explanation_ids:
        ids = list(explanation_ids)
        if len(ids) > cfg.max_gen:
            ids = ids[: cfg.max_gen]
            truncated = True
        text_rows = embed_rows(params["qformer.text_embed"].tensor, ids) + embed_rows(
            params["qformer.seg"].tensor, [1] * len(ids)
        )
        x = concat([queries, text_rows], axis=0)
    else:
        x = queries
    cross_weights = None
    for i in range(cfg.qf_layers):
        pre = f"qformer.l{i}"
        a, _ = _attn_sublayer(_ln(x, params, f"{pre}.ln1"), params, f"{pre}.self_attn", cfg.heads)
        x = x + a
        a, cross_weights = _attn_sublayer(
            _ln(x, params, f"{pre}.ln2"), params, f"{pre}.cross_attn", cfg.heads, kv=feats
        )
        x = x + a
        x = x + _ffn(_ln(x, params, f"{pre}.ln3"), params, f"{pre}.ffn")
    x = _ln(x, params, "qformer.ln_out")
    if mode == "implicit":
        x = narrow(x, 0, 0, k)
    rows = linear(x, params["qformer.out_proj.w"], params["qformer.out_proj.b"])
    return ImageQueries(rows=rows, cross_attn=cross_weights, n_queries=k, mode=mode, truncated=truncated)


def encode_image_batch(images, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Stacked encoder features (B, P, d_model) for same-size images."""
    from .autodiff import default_dtype

    rows = Tensor(np.stack([patchify(im, cfg.patch) for im in images]).astype(default_dtype()))
    x = linear(rows, params["vision.patch_embed.w"], params["vision.patch_embed.b"])
    x = x + params["vision.pos"].tensor
    for i in range(cfg.enc_layers):
        pre = f"vision.l{i}"
        a, _ = _attn_sublayer(_ln(x, params, f"{pre}.ln1"), params, f"{pre}.attn", cfg.heads)
        x = x + a
        x = x + _ffn(_ln(x, params, f"{pre}.ln2"), params, f"{pre}.ffn")
    return _ln(x, params, "vision.ln_out")


def qformer_forward_batch(
    feats: Tensor,
    explanation_ids,
    params: ModelParams,
    cfg: ModelConfig,
    mode: str = "explicit",
) -> Tensor:
    """Batched query rows (B, R, d) for training; explanation id rows must
    share one length (shape bucketing upstream guarantees it)."""
    if mode not in ("explicit", "implicit"):
        raise ValueError(f"unknown qformer mode {mode!r}")
    b = feats.shape[0]
    k = cfg.k_queries
    queries = params["qformer.queries"].tensor + embed_rows(params["qformer.seg"].tensor, [0] * k)
    x = tile0(queries, b)
    if explanation_ids is not None:
        ids = np.asarray(explanation_ids, dtype=np.int64)
        if ids.shape[1] > cfg.max_gen:
            ids = ids[:, : cfg.max_gen]
        text_rows = embed_rows(params["qformer.text_embed"].tensor, ids) + embed_rows(
            params["qformer.seg"].tensor, np.ones(ids.shape[1], dtype=np.int64)
        )
        x = concat([x, text_rows], axis=1)
    for i in range(cfg.qf_layers):
        pre = f"qformer.l{i}"
        a, _ = _attn_sublayer(_ln(x, params, f"{pre}.ln1"), params, f"{pre}.self_attn", cfg.heads)
        x = x + a
        a, _ = _attn_sublayer(_ln(x, params, f"{pre}.ln2"), params, f"{pre}.cross_attn", cfg.heads, kv=feats)
        x = x + a
        x = x + _ffn(_ln(x, params, f"{pre}.ln3"), params, f"{pre}.ffn")
    x = _ln(x, params, "qformer.ln_out")
    if mode == "implicit":
        x = narrow(x, 1, 0, k)
    return linear(x, params["qformer.out_proj.w"], params["qformer.out_proj.b"])


def lm_logits_batch(prefix_rows: Tensor | None, token_ids, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Batched decoder logits (B, S, V); token id rows share one length."""
    ids = np.asarray(token_ids, dtype=np.int64)
    n_tok = ids.shape[1]
    if n_tok > cfg.max_positions:
        raise ValueError(f"sequence of {n_tok} tokens exceeds max_positions {cfg.max_positions}")
    tok = embed_rows(params["lm.tok_embed"].tensor, ids) + embed_rows(
        params["lm.pos"].tensor, np.arange(n_tok)
    )
    x = tok if prefix_rows is None else concat([prefix_rows, tok], axis=1)
    s = x.shape[1]
    mask = _causal_mask(s, x.data.dtype)
    for i in range(cfg.dec_layers):
        pre = f"lm.l{i}"
        a, _ = _attn_sublayer(_ln(x, params, f"{pre}.ln1"), params, f"{pre}.attn", cfg.heads, mask=mask)
        x = x + a
        x = x + _ffn(_ln(x, params, f"{pre}.ln2"), params, f"{pre}.ffn")
    x = _ln(x, params, "lm.ln_f")
    return linear(x, params["lm.head.w"], params["lm.head.b"])


_MASK_CACHE: dict[tuple, np.ndarray] = {}


def _causal_mask(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).name)
    m = _MASK_CACHE.get(key)
    if m is None:
        m = np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)
        _MASK_CACHE[key] = m
    return m


def lm_logits(prefix_rows: Tensor | None, token_ids, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Causal decoder logits over [prefix rows] ++ [token embeddings].

    Token positions are numbered from the first token so the decoder accepts
    any prefix length (K, K+L, or none for text-only training).
    """
    n_tok = len(token_ids)
    if n_tok > cfg.max_positions:
        raise ValueError(f"sequence of {n_tok} tokens exceeds max_positions {cfg.max_positions}")
    tok = embed_rows(params["lm.tok_embed"].tensor, token_ids) + embed_rows(
        params["lm.pos"].tensor, np.arange(n_tok)
    )
    x = tok if prefix_rows is None else concat([prefix_rows, tok], axis=0)
    s = x.shape[0]
    mask = _causal_mask(s, x.data.dtype)
    for i in range(cfg.dec_layers):
        pre = f"lm.l{i}"
        a, _ = _attn_sublayer(_ln(x, params, f"{pre}.ln1"), params, f"{pre}.attn", cfg.heads, mask=mask)
        x = x + a
        x = x + _ffn(_ln(x, params, f"{pre}.ln2"), params, f"{pre}.ffn")
    x = _ln(x, params, "lm.ln_f")
    return linear(x, params["lm.head.w"], params["lm.head.b"])


@dataclass
class GenResult:
    tokens: list[int]
    ended: bool  # False means the max-length cap truncated generation

    @property
    def truncated(self) -> bool:
        return not self.ended


def _log_softmax_row(logits_row: np.ndarray) -> np.ndarray:
    shifted = logits_row - logits_row.max()
    return shifted - np.log(np.exp(shifted).sum())


def lm_generate(
    prefix_rows: Tensor | None,
    prompt_ids,
    params: ModelParams,
    cfg: ModelConfig,
    beams: int = 1,
    max_gen: int | None = None,
    forced_ids=None,
) -> GenResult:
    """Autoregressive decoding after [prefix] ++ [BOS + prompt (+ forced)].

    Greedy (beams=1) breaks ties toward the lowest token id; beam search
    ranks hypotheses by mean log-probability with a deterministic
    token-id-sequence tie-break. `forced_ids` are emitted verbatim before
    free decoding (answer-conditioned generation).
    """
    if beams < 1:
        raise ValueError("beams must be >= 1")
    cap = cfg.max_gen if max_gen is None else max_gen
    context = [textmod.BOS_ID] + list(prompt_ids) + (list(forced_ids) if forced_ids else [])
    with no_grad():
        if beams == 1:
            out: list[int] = []
            for _ in range(cap):
                logits = lm_logits(prefix_rows, context + out, params, cfg)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == textmod.EOS_ID:
                    return GenResult(out, ended=True)
                out.append(nxt)
            return GenResult(out, ended=False)
        # beam search: (ids tuple, sum logp, done)
        hyps = [((), 0.0, False)]
        for _ in range(cap):
            if all(done for _, _, done in hyps):
                break
            candidates = []
            for ids, score, done in hyps:
                if done:
                    candidates.append((ids, score, True))
                    continue
                logits = lm_logits(prefix_rows, context + list(ids), params, cfg)
                logp = _log_softmax_row(logits.data[-1])
                for tok in range(len(logp)):
                    candidates.append((ids + (tok,), score + float(logp[tok]), tok == textmod.EOS_ID))
            candidates.sort(key=lambda c: (-(c[1] / len(c[0])), c[0]))
            hyps = candidates[:beams]
        best_ids, _, best_done = hyps[0]
        tokens = [t for t in best_ids if t != textmod.EOS_ID]
        return GenResult(tokens, ended=best_done)


# -- checkpoint container ------------------------------------------------------

def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        names = sorted(params.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            p = params.params[name]
            part = params.partition_of(name).encode()
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", len(part)))
            fh.write(part)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    from .autodiff import default_dtype

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blen,) = struct.unpack("<I", fh.read(4))
        cfg = ModelConfig.from_dict(json.loads(fh.read(blen).decode()))
        (count,) = struct.unpack("<I", fh.read(4))
        entries = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            (plen,) = struct.unpack("<I", fh.read(4))
            part = fh.read(plen).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
            entries[name] = (part, data)
    params = init_params(cfg, seed=0)
    expected = set(params.params)
    got = set(entries)
    if expected != got:
        missing = sorted(expected - got)[:5]
        extra = sorted(got - expected)[:5]
        raise ValueError(f"checkpoint parameter set mismatch; missing={missing} extra={extra}")
    for name, (part, data) in entries.items():
        if params.partition_of(name) != part:
            raise ValueError(f"parameter {name!r} stored in partition {part!r}, expected {params.partition_of(name)!r}")
        if params[name].data.shape != data.shape:
            raise ValueError(f"parameter {name!r} shape {data.shape} != expected {params[name].data.shape}")
        params[name].tensor.data = data.astype(default_dtype())
    return params, cfg
