"""Dual encoders, fusion encoder and decoder at toy scale.

Every forward function takes a parameter mapping ``p`` (name -> Tensor) so
the same code runs untracked for evaluation and on a :class:`GradTape` for
training. Parameter names follow ``<submodule>.<layer>.<tensor>``, e.g.
``text_enc.0.attn.wq``; non-layer tensors use ``<submodule>.<tensor>``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, VocabularyError
from .tensor import F32, GradTape, Tensor
from .vocab import MM_CLS, PAD

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 2
    n_layers_text: int = 2
    n_layers_visual: int = 2
    n_layers_fusion: int = 2
    n_layers_decoder: int = 2
    vocab_size: int = 1000
    max_text_len: int = 32
    image_side: int = 32
    patch_size: int = 8
    channels: int = 3
    n_langs: int = 2
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.image_side % self.patch_size:
            raise ConfigError(
                f"image_side={self.image_side} not divisible by patch_size={self.patch_size}"
            )
        for k, v in asdict(self).items():
            if v < 1 and not k.startswith("n_layers"):
                raise ConfigError(f"{k} must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


@dataclass
class EncodedText:
    states: Tensor  # [N, L, d]
    cls: Tensor  # [N, d], unit rows
    mask: np.ndarray  # [N, L] bool, True = real token


@dataclass
class EncodedImage:
    states: Tensor  # [N, P+1, d]
    cls: Tensor  # [N, d], unit rows


@dataclass
class JointStates:
    """Fusion output; position 0 is [MM_CLS], then text, then image positions."""

    states: Tensor
    mask: np.ndarray
    n_text: int
    n_image: int = 0

    @property
    def length(self) -> int:
        return self.states.shape[1]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _layer_shapes(prefix: str, d: int, hidden: int, cross: bool) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    blocks = ["attn"] + (["cross"] if cross else [])
    for i, blk in enumerate(blocks, start=1):
        shapes[f"{prefix}.ln{i}.g"] = (d,)
        shapes[f"{prefix}.ln{i}.b"] = (d,)
        for m in ("q", "k", "v", "o"):
            shapes[f"{prefix}.{blk}.w{m}"] = (d, d)
            shapes[f"{prefix}.{blk}.b{m}"] = (d,)
    n = len(blocks) + 1
    shapes[f"{prefix}.ln{n}.g"] = (d,)
    shapes[f"{prefix}.ln{n}.b"] = (d,)
    shapes[f"{prefix}.ffn.w1"] = (d, hidden)
    shapes[f"{prefix}.ffn.b1"] = (hidden,)
    shapes[f"{prefix}.ffn.w2"] = (hidden, d)
    shapes[f"{prefix}.ffn.b2"] = (d,)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, V, h = cfg.d_model, cfg.vocab_size, cfg.d_model * cfg.ffn_mult
    s: dict[str, tuple] = {"embed.tokens": (V, d)}

    s["text_enc.pos"] = (cfg.max_text_len, d)
    s["text_enc.lang"] = (cfg.n_langs, d)
    for i in range(cfg.n_layers_text):
        s.update(_layer_shapes(f"text_enc.{i}", d, h, cross=False))
    s["text_enc.ln_f.g"] = (d,)
    s["text_enc.ln_f.b"] = (d,)
    s["text_enc.proj"] = (d, d)

    s["vis_enc.patch.w"] = (cfg.patch_dim, d)
    s["vis_enc.patch.b"] = (d,)
    s["vis_enc.cls"] = (d,)
    s["vis_enc.pos"] = (cfg.n_patches + 1, d)
    for i in range(cfg.n_layers_visual):
        s.update(_layer_shapes(f"vis_enc.{i}", d, h, cross=False))
    s["vis_enc.ln_f.g"] = (d,)
    s["vis_enc.ln_f.b"] = (d,)
    s["vis_enc.proj"] = (d, d)

    s["fusion.type"] = (3, d)
    for i in range(cfg.n_layers_fusion):
        s.update(_layer_shapes(f"fusion.{i}", d, h, cross=False))
    s["fusion.ln_f.g"] = (d,)
    s["fusion.ln_f.b"] = (d,)

    s["decoder.pos"] = (cfg.max_text_len, d)
    s["decoder.lang"] = (cfg.n_langs, d)
    for i in range(cfg.n_layers_decoder):
        s.update(_layer_shapes(f"decoder.{i}", d, h, cross=True))
    s["decoder.ln_f.g"] = (d,)
    s["decoder.ln_f.b"] = (d,)

    s["heads.log_tau"] = ()
    s["heads.itm.w"] = (d, 1)
    s["heads.itm.b"] = (1,)
    s["heads.mlm.bias"] = (V,)
    s["heads.lm.bias"] = (V,)
    return s


def count_params(cfg: ModelConfig) -> int:
    return int(sum(math.prod(shape) for shape in param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=F32) -> dict[str, np.ndarray]:
    """Truncated-normal weights (std 0.02), zero biases, unit LN gains, tau = 0.07."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "heads.log_tau":
            arr = np.asarray(math.log(0.07))
        elif ".ln" in name and leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape)
        out[name] = np.array(arr, dtype=dtype)
    return out


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _attention(p, pre: str, xq: Tensor, xkv: Tensor, key_mask, n_heads: int, causal=False):
    N, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dh = d // n_heads

    def heads(x, L, m):
        y = T.add(T.matmul(x, p[f"{pre}.w{m}"]), p[f"{pre}.b{m}"])
        return T.transpose(T.reshape(y, (N, L, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(xq, Lq, "q"), heads(xkv, Lk, "k"), heads(xkv, Lk, "v")
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    blocked = ~key_mask[:, None, None, :]
    if causal:
        blocked = blocked | np.triu(np.ones((Lq, Lk), dtype=bool), k=1)[None, None]
    att = T.softmax(T.masked_fill(scores, blocked, NEG_INF), axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (N, Lq, d))
    return T.add(T.matmul(ctx, p[f"{pre}.wo"]), p[f"{pre}.bo"])


def _ffn(p, pre: str, x: Tensor) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, p[f"{pre}.w1"]), p[f"{pre}.b1"]))
    return T.add(T.matmul(h, p[f"{pre}.w2"]), p[f"{pre}.b2"])


def _ln(p, pre: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, p[f"{pre}.g"], p[f"{pre}.b"])


def _encoder_layer(p, pre, x, mask, n_heads):
    h = _ln(p, f"{pre}.ln1", x)
    x = T.add(x, _attention(p, f"{pre}.attn", h, h, mask, n_heads))
    return T.add(x, _ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln2", x)))


def _decoder_layer(p, pre, x, self_mask, memory, mem_mask, n_heads):
    h = _ln(p, f"{pre}.ln1", x)
    x = T.add(x, _attention(p, f"{pre}.attn", h, h, self_mask, n_heads, causal=True))
    h = _ln(p, f"{pre}.ln2", x)
    x = T.add(x, _attention(p, f"{pre}.cross", h, memory, mem_mask, n_heads))
    return T.add(x, _ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln3", x)))


def _lang_rows(lang, N: int, n_langs: int) -> np.ndarray:
    lang = np.broadcast_to(np.asarray(lang, dtype=np.int64), (N,))
    if lang.min() < 0 or lang.max() >= n_langs:
        raise VocabularyError(f"language id out of range [0, {n_langs})")
    return lang


def _check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError(f"token batch must be [N, L], got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise VocabularyError(f"token id outside vocabulary of size {cfg.vocab_size}")
    if tokens.shape[1] > cfg.max_text_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_text_len={cfg.max_text_len}")
    return tokens


def _broadcast_rows(vec: Tensor, N: int, L: int) -> Tensor:
    """Tile a [d] vector into [N, L, d]."""
    return T.add(T.zeros((N, L, vec.shape[-1]), dtype=vec.dtype), vec)


# ---------------------------------------------------------------------------
# public forward ops
# ---------------------------------------------------------------------------


def patchify(pixels: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """[N, C, H, W] -> [N, P, C*p*p], patches in row-major grid order."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 4:
        raise ShapeError(f"image batch must be [N, C, H, W], got {pixels.shape}")
    N, C, H, W = pixels.shape
    if C != cfg.channels or H != cfg.image_side or W != cfg.image_side:
        raise ShapeError(
            f"expected images of shape [{cfg.channels}, {cfg.image_side}, {cfg.image_side}], "
            f"got [{C}, {H}, {W}]"
        )
    ps, g = cfg.patch_size, cfg.image_side // cfg.patch_size
    x = pixels.reshape(N, C, g, ps, g, ps).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(N, g * g, C * ps * ps))


def encode_image(p: Mapping[str, Tensor], cfg: ModelConfig, pixels) -> EncodedImage:
    dtype = p["vis_enc.patch.w"].dtype
    patches = Tensor._wrap(patchify(pixels, cfg).astype(dtype, copy=False))
    N = patches.shape[0]
    x = T.add(T.matmul(patches, p["vis_enc.patch.w"]), p["vis_enc.patch.b"])
    x = T.concat([_broadcast_rows(p["vis_enc.cls"], N, 1), x], axis=1)
    x = T.add(x, p["vis_enc.pos"])
    mask = np.ones((N, x.shape[1]), dtype=bool)
    for i in range(cfg.n_layers_visual):
        x = _encoder_layer(p, f"vis_enc.{i}", x, mask, cfg.n_heads)
    x = _ln(p, "vis_enc.ln_f", x)
    cls = T.l2_normalize(T.matmul(x[:, 0, :], p["vis_enc.proj"]))
    return EncodedImage(x, cls)


def encode_text(p: Mapping[str, Tensor], cfg: ModelConfig, tokens, lang) -> EncodedText:
    """Encode ``tokens`` [N, L] whose position 0 is the [CLS] token.

    ``lang`` is one language id or one per row. Padding (id 0) is masked out
    of attention so it never influences real positions.
    """
    tokens = _check_tokens(tokens, cfg)
    N, L = tokens.shape
    mask = tokens != PAD
    x = T.embedding(p["embed.tokens"], tokens)
    x = T.add(x, p["text_enc.pos"][:L])
    lang_vec = T.embedding(p["text_enc.lang"], _lang_rows(lang, N, cfg.n_langs))
    x = T.add(x, _per_row(lang_vec, L))
    for i in range(cfg.n_layers_text):
        x = _encoder_layer(p, f"text_enc.{i}", x, mask, cfg.n_heads)
    x = _ln(p, "text_enc.ln_f", x)
    cls = T.l2_normalize(T.matmul(x[:, 0, :], p["text_enc.proj"]))
    return EncodedText(x, cls, mask)


def _per_row(vecs: Tensor, L: int) -> Tensor:
    """[N, d] -> [N, L, d] by repeating each row along a new middle axis."""
    N, d = vecs.shape
    return T.matmul(T.ones((N, L, 1), dtype=vecs.dtype), T.reshape(vecs, (N, 1, d)))


def fuse(p: Mapping[str, Tensor], cfg: ModelConfig, text: EncodedText,
         image: EncodedImage | None = None) -> JointStates:
    N, Lt, d = text.states.shape
    mm = T.add(T.embedding(p["embed.tokens"], np.array([MM_CLS])), p["fusion.type"][0:1])
    parts = [_broadcast_rows(T.reshape(mm, (d,)), N, 1), T.add(text.states, p["fusion.type"][1])]
    masks = [np.ones((N, 1), dtype=bool), text.mask]
    n_img = 0
    if image is not None:
        if image.states.shape[0] != N:
            raise ShapeError(f"text batch {N} vs image batch {image.states.shape[0]}")
        parts.append(T.add(image.states, p["fusion.type"][2]))
        n_img = image.states.shape[1]
        masks.append(np.ones((N, n_img), dtype=bool))
    x = T.concat(parts, axis=1)
    mask = np.concatenate(masks, axis=1)
    for i in range(cfg.n_layers_fusion):
        x = _encoder_layer(p, f"fusion.{i}", x, mask, cfg.n_heads)
    return JointStates(_ln(p, "fusion.ln_f", x), mask, Lt, n_img)


def decode(p: Mapping[str, Tensor], cfg: ModelConfig, joint: JointStates, prefix, lang) -> Tensor:
    """Next-token logits [N, T', V] for a decoder input ``prefix`` starting with BOS."""
    prefix = _check_tokens(prefix, cfg)
    N, Tq = prefix.shape
    if Tq < 1:
        raise ShapeError("decoder prefix must hold at least the begin token")
    self_mask = prefix != PAD
    self_mask[:, 0] = True
    x = T.embedding(p["embed.tokens"], prefix)
    x = T.add(x, p["decoder.pos"][:Tq])
    x = T.add(x, _per_row(T.embedding(p["decoder.lang"], _lang_rows(lang, N, cfg.n_langs)), Tq))
    for i in range(cfg.n_layers_decoder):
        x = _decoder_layer(p, f"decoder.{i}", x, self_mask, joint.states, joint.mask, cfg.n_heads)
    x = _ln(p, "decoder.ln_f", x)
    return T.add(T.matmul(x, T.transpose(p["embed.tokens"])), p["heads.lm.bias"])


def match_score(p: Mapping[str, Tensor], joint: JointStates) -> Tensor:
    """Image-text match probability from the [MM_CLS] output, shape [N]."""
    z = T.add(T.matmul(joint.states[:, 0, :], p["heads.itm.w"]), p["heads.itm.b"])
    return T.sigmoid(T.reshape(z, (z.shape[0],)))


def mlm_logits(p: Mapping[str, Tensor], joint: JointStates) -> Tensor:
    """Token logits [N, L_t, V] at the text positions of the fused sequence."""
    text = joint.states[:, 1:1 + joint.n_text, :]
    return T.add(T.matmul(text, T.transpose(p["embed.tokens"])), p["heads.mlm.bias"])


def temperature(p: Mapping[str, Tensor]) -> Tensor:
    return T.exp(p["heads.log_tau"])


# ---------------------------------------------------------------------------
# convenience wrapper
# ---------------------------------------------------------------------------


@dataclass
class CrossModalModel:
    """Config plus a flat name -> array parameter store."""

    config: ModelConfig = field(default_factory=ModelConfig)
    params: dict[str, np.ndarray] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.config, self.seed)
        expected = param_shapes(self.config)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter names mismatch; missing={missing[:3]} extra={extra[:3]}")
        for k, shape in expected.items():
            if self.params[k].shape != tuple(shape):
                raise ShapeError(f"{k}: expected {shape}, got {self.params[k].shape}")

    @property
    def dtype(self) -> np.dtype:
        return self.params["embed.tokens"].dtype

    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def tensors(self, tape: GradTape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor._wrap(v) for k, v in self.params.items()}
        return {k: tape.watch(v) for k, v in self.params.items()}

    def astype(self, dtype) -> "CrossModalModel":
        return CrossModalModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "CrossModalModel":
        return CrossModalModel(self.config, {k: v.copy() for k, v in self.params.items()})

    # untracked shortcuts
    def encode_image(self, pixels) -> EncodedImage:
        return encode_image(self.tensors(), self.config, pixels)

    def encode_text(self, tokens, lang) -> EncodedText:
        return encode_text(self.tensors(), self.config, tokens, lang)

    def fuse(self, text: EncodedText, image: EncodedImage | None = None) -> JointStates:
        return fuse(self.tensors(), self.config, text, image)

    def decode(self, joint: JointStates, prefix, lang) -> Tensor:
        return decode(self.tensors(), self.config, joint, prefix, lang)

    def match_score(self, joint: JointStates) -> Tensor:
        return match_score(self.tensors(), joint)
