"""Toy multimodal translation transformer.

A small pre-LN encoder-decoder over a shared vocabulary. The frozen text
path is augmented with three kinds of trainable extras: bottleneck adapters
after every attention and feed-forward sublayer, a one-layer ReLU visual
projector, and a single projected image token prepended to the encoder
input. Decoder cross-attention is masked so it can only look at text
positions, never the visual one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS, MASK = 0, 1, 2, 3
SPECIAL_TOKENS = {"pad": PAD, "bos": BOS, "eos": EOS, "mask": MASK}

CHECKPOINT_MAGIC = b"ZMMT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ffn: int = 128
    image_dim: int = 16
    adapter_reduction: int = 8
    max_len: int = 24
    # the visual token gets no positional encoding by default
    visual_positional_encoding: bool = False

    def validate(self) -> None:
        if self.vocab_size <= len(SPECIAL_TOKENS):
            raise ValueError(f"vocab_size {self.vocab_size} too small")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.d_model // self.adapter_reduction < 1:
            raise ValueError(
                f"adapter bottleneck would be empty: d_model {self.d_model} "
                f"/ reduction {self.adapter_reduction}"
            )
        for name in ("n_layers_enc", "n_layers_dec", "d_ffn", "image_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def adapter_dim(self) -> int:
        return self.d_model // self.adapter_reduction


@dataclass
class ModelParams:
    """Named parameter store split into frozen base and trainable extras."""

    config: ModelConfig
    tensors: dict[str, Tensor]
    is_extra: dict[str, bool]

    def base_names(self) -> list[str]:
        return [n for n in self.tensors if not self.is_extra[n]]

    def extra_names(self) -> list[str]:
        return [n for n in self.tensors if self.is_extra[n]]

    def frozen_flags(self) -> dict[str, bool]:
        return {n: not t.requires_grad for n, t in self.tensors.items()}

    def freeze_base(self) -> None:
        for n, t in self.tensors.items():
            t.requires_grad = self.is_extra[n]

    def unfreeze_base(self) -> None:
        for n, t in self.tensors.items():
            if not self.is_extra[n]:
                t.requires_grad = True

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.tensors.items() if t.requires_grad]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def n_trainable_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values() if t.requires_grad)

    def base_bytes(self) -> bytes:
        return b"".join(
            self.tensors[n].data.astype("<f8").tobytes() for n in self.base_names()
        )

    def copy_extras(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n].data.copy() for n in self.extra_names()}

    def load_extras(self, snapshot: dict[str, np.ndarray]) -> None:
        for n, arr in snapshot.items():
            self.tensors[n].data = arr.copy()


@dataclass
class EncoderStates:
    """Encoder output plus the masks decoders need.

    ``text_valid`` marks real (non-pad, non-visual) text positions and is
    the only thing decoder cross-attention may look at. ``self_valid``
    additionally includes the visual position.
    """

    states: Tensor
    text_valid: np.ndarray
    self_valid: np.ndarray
    has_image: bool

    @property
    def text_positions(self) -> np.ndarray:
        return np.nonzero(self.text_valid[0])[0]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(config: ModelConfig, seed: int) -> ModelParams:
    """Initialize all parameters, deterministically in ``seed``.

    Base weights get scaled uniform noise. Adapter up-projections start at
    zero so the multimodal model is an exact pass-through of the base when
    no image is injected. The visual projector weight starts at small noise
    (not zero: a zero ReLU pre-activation would never receive gradient
    under the subgradient-0 convention).
    """
    config.validate()
    rng = np.random.default_rng(seed)
    d, v, f, r = config.d_model, config.vocab_size, config.d_ffn, config.adapter_dim
    tensors: dict[str, Tensor] = {}
    is_extra: dict[str, bool] = {}

    def base(name: str, arr: np.ndarray) -> None:
        tensors[name] = Tensor(arr)
        is_extra[name] = False

    def extra(name: str, arr: np.ndarray) -> None:
        tensors[name] = Tensor(arr, requires_grad=True)
        is_extra[name] = True

    base("embed", _uniform(rng, (v, d), d))
    base("pos_embed", _uniform(rng, (config.max_len + 1, d), d))

    def attn(prefix: str) -> None:
        for w in ("q", "k", "v", "o"):
            base(f"{prefix}.w{w}", _uniform(rng, (d, d), d))
            base(f"{prefix}.b{w}", np.zeros(d))

    def ln(prefix: str) -> None:
        base(f"{prefix}.g", np.ones(d))
        base(f"{prefix}.b", np.zeros(d))

    def ffn(prefix: str) -> None:
        base(f"{prefix}.w1", _uniform(rng, (d, f), d))
        base(f"{prefix}.b1", np.zeros(f))
        base(f"{prefix}.w2", _uniform(rng, (f, d), f))
        base(f"{prefix}.b2", np.zeros(d))

    def adapter(prefix: str) -> None:
        extra(f"{prefix}.down_w", _uniform(rng, (d, r), d))
        extra(f"{prefix}.down_b", np.zeros(r))
        extra(f"{prefix}.up_w", np.zeros((r, d)))
        extra(f"{prefix}.up_b", np.zeros(d))

    for l in range(config.n_layers_enc):
        ln(f"enc{l}.ln1")
        attn(f"enc{l}.attn")
        adapter(f"enc{l}.attn_adapter")
        ln(f"enc{l}.ln2")
        ffn(f"enc{l}.ffn")
        adapter(f"enc{l}.ffn_adapter")
    ln("enc_ln")

    for l in range(config.n_layers_dec):
        ln(f"dec{l}.ln1")
        attn(f"dec{l}.self")
        adapter(f"dec{l}.self_adapter")
        ln(f"dec{l}.ln2")
        attn(f"dec{l}.cross")
        adapter(f"dec{l}.cross_adapter")
        ln(f"dec{l}.ln3")
        ffn(f"dec{l}.ffn")
        adapter(f"dec{l}.ffn_adapter")
    ln("dec_ln")

    base("head_w", _uniform(rng, (d, v), d))
    base("head_b", np.zeros(v))

    extra("proj.w", _uniform(rng, (config.image_dim, d), config.image_dim))
    extra("proj.b", np.zeros(d))

    params = ModelParams(config=config, tensors=tensors, is_extra=is_extra)
    params.freeze_base()
    return params


def reinit_extras(params: ModelParams, seed: int) -> None:
    """Redraw the extras exactly as ``build_model`` would, from ``seed``."""
    rng = np.random.default_rng(seed)
    cfg = params.config
    d, r = cfg.d_model, cfg.adapter_dim
    for name in params.extra_names():
        t = params.tensors[name]
        if name.endswith(".down_w"):
            t.data = _uniform(rng, (d, r), d)
        elif name == "proj.w":
            t.data = _uniform(rng, (cfg.image_dim, d), cfg.image_dim)
        else:
            t.data = np.zeros_like(t.data)


def zero_extras(params: ModelParams) -> None:
    for name in params.extra_names():
        t = params.tensors[name]
        t.data = np.zeros_like(t.data)


def randomize_extras(params: ModelParams, seed: int, scale: float = 0.05) -> None:
    """Give every extra small nonzero values (for gradient checking)."""
    rng = np.random.default_rng(seed)
    for name in params.extra_names():
        t = params.tensors[name]
        t.data = rng.uniform(-scale, scale, size=t.data.shape)


# ---------------------------------------------------------------------------
# forward passes (batched; single-example API wraps batch size 1)


def _additive_mask(valid: np.ndarray) -> np.ndarray:
    # (B, Sk) bool -> (B, 1, 1, Sk) additive, -inf on masked keys
    m = np.where(valid, 0.0, -np.inf)
    return m[:, None, None, :]


def _causal_mask(t: int) -> np.ndarray:
    m = np.triu(np.full((t, t), -np.inf), k=1)
    return m[None, None, :, :]


def _multi_head_attention(
    params: ModelParams,
    prefix: str,
    x_q: Tensor,
    x_kv: Tensor,
    key_valid: np.ndarray,
    causal: bool = False,
    attn_sink: dict | None = None,
) -> Tensor:
    p = params.tensors
    cfg = params.config
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    bq, sq = x_q.shape[0], x_q.shape[1]
    sk = x_kv.shape[1]

    def split_heads(t: Tensor, s: int) -> Tensor:
        return ad.transpose(ad.reshape(t, (bq, s, h, dh)), (0, 2, 1, 3))

    q = split_heads(ad.linear(x_q, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), sq)
    k = split_heads(ad.linear(x_kv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), sk)
    v = split_heads(ad.linear(x_kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), sk)

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = _additive_mask(key_valid)
    if causal:
        mask = mask + _causal_mask(sq)
    probs = ad.softmax(ad.add(scores, mask), axis=-1)
    if attn_sink is not None:
        attn_sink[prefix] = probs.data
    out = ad.matmul(probs, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (bq, sq, cfg.d_model))
    return ad.linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _adapter(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    p = params.tensors
    hidden = ad.relu(ad.linear(x, p[f"{prefix}.down_w"], p[f"{prefix}.down_b"]))
    return ad.add(x, ad.linear(hidden, p[f"{prefix}.up_w"], p[f"{prefix}.up_b"]))


def _ffn(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    p = params.tensors
    return ad.linear(
        ad.relu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"])),
        p[f"{prefix}.w2"],
        p[f"{prefix}.b2"],
    )


def _ln(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    p = params.tensors
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def project_image(image: np.ndarray, params: ModelParams) -> Tensor:
    """ReLU(W i + b): one image vector to one d_model embedding."""
    image = np.asarray(image, dtype=np.float64)
    cfg = params.config
    if image.shape[-1] != cfg.image_dim:
        raise ValueError(
            f"image vector length {image.shape[-1]} != image_dim {cfg.image_dim}"
        )
    out = ad.relu(
        ad.linear(Tensor(np.atleast_2d(image)), params.tensors["proj.w"],
                  params.tensors["proj.b"])
    )
    if image.ndim == 1:
        out = ad.reshape(out, (cfg.d_model,))
    return out


def encode_batch(
    params: ModelParams,
    src_ids: np.ndarray,
    src_valid: np.ndarray,
    images: np.ndarray | None,
    use_extras: bool = True,
    attn_sink: dict | None = None,
) -> EncoderStates:
    """Encode a padded batch. ``images`` is (B, image_dim) or None."""
    cfg = params.config
    p = params.tensors
    b, s = src_ids.shape
    if s > cfg.max_len:
        raise ValueError(f"source length {s} exceeds max_len {cfg.max_len}")

    x = ad.embedding(p["embed"], src_ids)
    x = ad.add(x, ad.embedding(p["pos_embed"], np.arange(s)))
    text_valid = src_valid
    self_valid = src_valid
    if images is not None:
        vis = project_image(images, params)
        if cfg.visual_positional_encoding:
            vis = ad.add(vis, ad.embedding(p["pos_embed"], np.array([cfg.max_len])))
        vis = ad.reshape(vis, (b, 1, cfg.d_model))
        x = ad.concat([vis, x], axis=1)
        col_true = np.ones((b, 1), dtype=bool)
        col_false = np.zeros((b, 1), dtype=bool)
        self_valid = np.concatenate([col_true, src_valid], axis=1)
        text_valid = np.concatenate([col_false, src_valid], axis=1)

    for l in range(cfg.n_layers_enc):
        normed = _ln(params, f"enc{l}.ln1", x)
        h = _multi_head_attention(
            params, f"enc{l}.attn", normed, normed, self_valid,
            attn_sink=attn_sink,
        )
        if use_extras:
            h = _adapter(params, f"enc{l}.attn_adapter", h)
        x = ad.add(x, h)
        h = _ffn(params, f"enc{l}.ffn", _ln(params, f"enc{l}.ln2", x))
        if use_extras:
            h = _adapter(params, f"enc{l}.ffn_adapter", h)
        x = ad.add(x, h)
    x = _ln(params, "enc_ln", x)
    return EncoderStates(
        states=x,
        text_valid=text_valid,
        self_valid=self_valid,
        has_image=images is not None,
    )


def decoder_logits(
    params: ModelParams,
    enc: EncoderStates,
    tgt_in: np.ndarray,
    tgt_valid: np.ndarray,
    use_extras: bool = True,
    attn_sink: dict | None = None,
) -> Tensor:
    """Teacher-forced decoder pass: logits (B, T, V) for every position."""
    cfg = params.config
    p = params.tensors
    b, t = tgt_in.shape
    if t > cfg.max_len:
        raise ValueError(f"target length {t} exceeds max_len {cfg.max_len}")

    y = ad.embedding(p["embed"], tgt_in)
    y = ad.add(y, ad.embedding(p["pos_embed"], np.arange(t)))
    for l in range(cfg.n_layers_dec):
        normed = _ln(params, f"dec{l}.ln1", y)
        h = _multi_head_attention(
            params, f"dec{l}.self", normed, normed, tgt_valid, causal=True,
            attn_sink=attn_sink,
        )
        if use_extras:
            h = _adapter(params, f"dec{l}.self_adapter", h)
        y = ad.add(y, h)
        h = _multi_head_attention(
            params, f"dec{l}.cross", _ln(params, f"dec{l}.ln2", y),
            enc.states, enc.text_valid, attn_sink=attn_sink,
        )
        if use_extras:
            h = _adapter(params, f"dec{l}.cross_adapter", h)
        y = ad.add(y, h)
        h = _ffn(params, f"dec{l}.ffn", _ln(params, f"dec{l}.ln3", y))
        if use_extras:
            h = _adapter(params, f"dec{l}.ffn_adapter", h)
        y = ad.add(y, h)
    y = _ln(params, "dec_ln", y)
    return ad.linear(y, p["head_w"], p["head_b"])


# ---------------------------------------------------------------------------
# single-example convenience API


def encode(
    x: list[int],
    i: np.ndarray | None,
    params: ModelParams,
    use_extras: bool = True,
) -> EncoderStates:
    if len(x) == 0:
        raise ValueError("empty source sequence")
    ids = np.asarray([x], dtype=np.int64)
    if ids.min() < 0 or ids.max() >= params.config.vocab_size:
        raise ValueError("source token id out of vocabulary")
    valid = np.ones_like(ids, dtype=bool)
    images = None if i is None else np.asarray([i], dtype=np.float64)
    return encode_batch(params, ids, valid, images, use_extras=use_extras)


def decode_step(
    enc: EncoderStates,
    prefix: list[int],
    params: ModelParams,
    use_extras: bool = True,
    attn_sink: dict | None = None,
) -> np.ndarray:
    """Next-token probability vector given a BOS-led prefix."""
    if not prefix or prefix[0] != BOS:
        raise ValueError("prefix must begin with BOS")
    if len(prefix) > params.config.max_len:
        raise ValueError(
            f"prefix length {len(prefix)} exceeds max_len {params.config.max_len}"
        )
    ids = np.asarray([prefix], dtype=np.int64)
    valid = np.ones_like(ids, dtype=bool)
    logits = decoder_logits(
        params, enc, ids, valid, use_extras=use_extras, attn_sink=attn_sink
    )
    probs = ad.softmax(logits, axis=-1)
    return probs.data[0, -1]


def apply_source_mask(
    x: list[int], mask_rate: float, rng: np.random.Generator
) -> tuple[list[int], tuple[int, ...]]:
    """Replace round(mask_rate * n) positions (min 1 for positive rates)
    with MASK, uniformly without replacement."""
    if not 0.0 <= mask_rate <= 1.0:
        raise ValueError(f"mask_rate {mask_rate} outside [0, 1]")
    n = len(x)
    count = int(np.floor(mask_rate * n + 0.5))
    if mask_rate > 0.0 and count == 0:
        count = 1
    if count == 0:
        return list(x), ()
    picks = rng.choice(n, size=count, replace=False)
    chosen = tuple(sorted(int(j) for j in picks))
    masked = list(x)
    for j in chosen:
        masked[j] = MASK
    return masked, chosen


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON header, raw little-endian float64


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    names = list(params.tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "meta": meta or {},
        "tensors": [
            {
                "name": n,
                "shape": list(params.tensors[n].data.shape),
                "frozen": not params.tensors[n].requires_grad,
                "extra": params.is_extra[n],
            }
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(params.tensors[n].data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["config"])
        tensors: dict[str, Tensor] = {}
        is_extra: dict[str, bool] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n_bytes = 8 * int(np.prod(shape)) if shape else 8
            raw = fh.read(n_bytes)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            t = Tensor(arr, requires_grad=not entry["frozen"])
            tensors[entry["name"]] = t
            is_extra[entry["name"]] = entry["extra"]
    return ModelParams(config=config, tensors=tensors, is_extra=is_extra), header["meta"]
