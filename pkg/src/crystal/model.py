"""Tiny vision-language decoder with dedicated latent slots.

Sequence layout (all positions fixed for a given config)::

    [image patches] BOS [question, left-padded] SEP [latents x K] ANS [answer] EOS

The image occupies the prefix and the whole sequence runs under one causal
mask. ``forward`` can overwrite the latent rows of every layer input with
externally supplied hidden states, which is how the corrupted path borrows the
intact path's latents.
"""
from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from functools import cached_property

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, VocabularyError
from .taskgen import VOCAB
from .tensor import Tensor


class Role(enum.IntEnum):
    IMAGE = 0
    QUESTION = 1
    LATENT = 2
    ANSWER = 3
    SPECIAL = 4


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    patch_size: int = 8
    image_size: int = 64
    n_latents: int = 8
    latent_mode: str = "diverse"
    vocab_size: int = len(VOCAB)
    question_len: int = 8
    answer_len: int = 1
    mlp_ratio: int = 4
    init_std: float = 0.05
    patch_init_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1 or self.n_latents < 1:
            raise ContractError("n_layers and n_latents must be >= 1")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.image_size % self.patch_size:
            raise DimensionError("image_size must be a multiple of patch_size")
        if self.latent_mode not in ("diverse", "identical"):
            raise ContractError(f"unknown latent_mode {self.latent_mode!r}")
        if self.vocab_size != len(VOCAB):
            raise ContractError(f"vocab_size must be {len(VOCAB)}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def max_seq_len(self) -> int:
        return self.n_patches + self.question_len + self.n_latents + self.answer_len + 4

    def to_json(self) -> str:
        return canonical_json(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass(frozen=True)
class Layout:
    """Fixed segment boundaries for one config."""

    cfg: ModelConfig

    @cached_property
    def roles(self) -> np.ndarray:
        c = self.cfg
        r = [Role.IMAGE] * c.n_patches + [Role.SPECIAL]
        r += [Role.QUESTION] * c.question_len + [Role.SPECIAL]
        r += [Role.LATENT] * c.n_latents + [Role.SPECIAL]
        r += [Role.ANSWER] * c.answer_len + [Role.SPECIAL]
        return np.array(r, dtype=np.int8)

    @property
    def bos(self) -> int:
        return self.cfg.n_patches

    @property
    def latent(self) -> slice:
        start = self.cfg.n_patches + self.cfg.question_len + 2
        return slice(start, start + self.cfg.n_latents)

    @property
    def latent_positions(self) -> np.ndarray:
        return np.arange(self.latent.start, self.latent.stop)

    @property
    def ans_marker(self) -> int:
        return self.latent.stop

    @property
    def answer(self) -> slice:
        return slice(self.ans_marker + 1, self.ans_marker + 1 + self.cfg.answer_len)

    @property
    def eos(self) -> int:
        return self.answer.stop

    @property
    def decode_len(self) -> int:
        """Length of the prefix ending at the ANS marker."""
        return self.ans_marker + 1


@dataclass
class TokenSequence:
    """Token ids for one sample; image positions hold -1."""

    ids: np.ndarray
    roles: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def build_sequence(cfg: ModelConfig, question, answer=None) -> TokenSequence:
    """Assemble the token sequence. Without ``answer`` it stops at the ANS marker."""
    lay = Layout(cfg)
    question = list(question)
    if len(question) > cfg.question_len:
        raise ContractError(f"question has {len(question)} tokens, limit {cfg.question_len}")
    pad = [VOCAB["PAD"]] * (cfg.question_len - len(question))
    ids = [-1] * cfg.n_patches + [VOCAB["BOS"]] + pad + question + [VOCAB["SEP"]]
    ids += VOCAB.latent_ids(cfg.n_latents, cfg.latent_mode) + [VOCAB["ANS"]]
    if answer is None:
        return TokenSequence(np.array(ids, dtype=np.int64), lay.roles[: lay.decode_len].copy())
    answer = list(answer)
    if len(answer) != cfg.answer_len:
        raise ContractError(f"answer must have {cfg.answer_len} tokens")
    ids += answer + [VOCAB["EOS"]]
    return TokenSequence(np.array(ids, dtype=np.int64), lay.roles.copy())


def answer_logit_positions(seq: TokenSequence) -> np.ndarray:
    """Positions whose next-token target is an answer token, or the EOS that closes it."""
    roles = np.asarray(seq.roles)
    ans = np.flatnonzero(roles == Role.ANSWER)
    if ans.size == 0:
        raise ContractError("sequence has no answer tokens")
    omega = [i for i in range(len(roles) - 1) if roles[i + 1] == Role.ANSWER]
    last = ans[-1]
    if last + 1 < len(roles) and seq.ids[last + 1] == VOCAB["EOS"]:
        omega.append(int(last))
    return np.array(omega, dtype=np.int64)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, n_patches, patch*patch*3), patches in row-major order."""
    B, H, W, C = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(B, g_h, patch, g_w, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g_h * g_w, patch * patch * C)


@dataclass
class Trace:
    """Everything recorded during one forward pass (all tensors carry a batch axis)."""

    checkpoints: list[Tensor]  # l + 1 entries, each (B, T, d)
    attentions: list[Tensor]  # l entries, each (B, H, T, T)
    logits: Tensor  # (B, T, V)


def param_count(cfg: ModelConfig) -> int:
    d, V, L = cfg.d_model, cfg.vocab_size, cfg.n_layers
    m = cfg.mlp_ratio * d
    patch_in = cfg.patch_size**2 * 3
    per_layer = 4 * d + 4 * (d * d + d) + (d * m + m) + (m * d + d)
    return patch_in * d + d + V * d + cfg.max_seq_len * d + L * per_layer + 2 * d + d * V + V


def param_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration (serialisation) order."""
    d, m = c.d_model, c.mlp_ratio * c.d_model
    s = {
        "patch_w": (c.patch_size**2 * 3, d),
        "patch_b": (d,),
        "tok_emb": (c.vocab_size, d),
        "pos_emb": (c.max_seq_len, d),
    }
    for i in range(c.n_layers):
        p = f"layer{i}."
        s.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "w_q": (d, d), p + "b_q": (d,),
            p + "w_k": (d, d), p + "b_k": (d,),
            p + "w_v": (d, d), p + "b_v": (d,),
            p + "w_o": (d, d), p + "b_o": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w_fc": (d, m), p + "b_fc": (m,),
            p + "w_proj": (m, d), p + "b_proj": (d,),
        })
    s.update({"lnf_g": (d,), "lnf_b": (d,), "head_w": (d, c.vocab_size), "head_b": (c.vocab_size,)})
    return s


class TinyVLM:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.layout = Layout(cfg)
        shapes = self.param_shapes()
        if params is None:
            params = self._init_params(shapes)
        if list(params) != list(shapes):
            raise ContractError("parameter names do not match the config")
        self.params: dict[str, Tensor] = {}
        for name, arr in params.items():
            if arr.shape != shapes[name]:
                raise DimensionError(f"{name}: shape {arr.shape}, expected {shapes[name]}")
            self.params[name] = Tensor(np.array(arr, dtype=np.float64), requires_grad=True)
        T_ = cfg.max_seq_len
        self._mask = np.triu(np.full((T_, T_), -np.inf), k=1)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return param_shapes(self.cfg)

    def _init_params(self, shapes) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(self.cfg.seed)
        std = self.cfg.init_std
        out = {}
        for name, shape in shapes.items():
            leaf = name.split(".")[-1]
            if leaf.endswith("_g"):
                out[name] = np.ones(shape)
            elif leaf.startswith("b_") or leaf.endswith("_b"):
                out[name] = np.zeros(shape)
            else:
                scale = std / math.sqrt(2 * self.cfg.n_layers) if leaf in ("w_o", "w_proj") else std
                if name == "patch_w":
                    scale = self.cfg.patch_init_std
                out[name] = rng.normal(0.0, scale, size=shape)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # ------------------------------------------------------------ forward

    def embed(self, ids: np.ndarray, images: np.ndarray) -> Tensor:
        """Hidden states before the first layer, shape (B, T, d)."""
        c, p = self.cfg, self.params
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        B, T_ = ids.shape
        if images.shape != (B, c.image_size, c.image_size, 3):
            raise DimensionError(f"images shape {images.shape} does not match ids batch {B}")
        if T_ > c.max_seq_len or T_ <= c.n_patches:
            raise DimensionError(f"sequence length {T_} outside ({c.n_patches}, {c.max_seq_len}]")
        text = ids[:, c.n_patches :]
        if text.min() < 0 or text.max() >= c.vocab_size:
            raise VocabularyError(f"token id outside [0, {c.vocab_size})")
        # ink = 1 - pixel: the white background maps to zero input
        ink = 1.0 - patchify(images, c.patch_size)
        img = T.matmul(Tensor(ink), p["patch_w"]) + p["patch_b"]
        tok = T.embedding(p["tok_emb"], text)
        x = T.concat([img, tok], axis=1)
        return x + p["pos_emb"][:T_]

    def _block(self, i: int, x: Tensor) -> tuple[Tensor, Tensor]:
        c, p = self.cfg, self.params
        pre = f"layer{i}."
        B, T_, d = x.shape
        H, dh = c.n_heads, d // c.n_heads

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, T_, H, dh).transpose(0, 2, 1, 3)

        h = T.layernorm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = heads(h @ p[pre + "w_q"] + p[pre + "b_q"])
        k = heads(h @ p[pre + "w_k"] + p[pre + "b_k"])
        v = heads(h @ p[pre + "w_v"] + p[pre + "b_v"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + self._mask[:T_, :T_]
        att = T.softmax(scores, axis=-1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T_, d)
        x = x + (o @ p[pre + "w_o"] + p[pre + "b_o"])
        h2 = T.layernorm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        mlp = T.gelu(h2 @ p[pre + "w_fc"] + p[pre + "b_fc"]) @ p[pre + "w_proj"] + p[pre + "b_proj"]
        return x + mlp, att

    def forward(self, ids, images, overrides: list[Tensor] | None = None) -> Trace:
        """Run the decoder; ``overrides[j]`` replaces the latent rows of layer j's input."""
        c = self.cfg
        x = self.embed(ids, images)
        if overrides is not None and len(overrides) != c.n_layers:
            raise DimensionError(f"need {c.n_layers} override blocks, got {len(overrides)}")
        lat = self.layout.latent_positions
        if x.shape[1] < lat[-1] + 1 and overrides is not None:
            raise DimensionError("sequence too short to contain the latent segment")
        checkpoints, attentions = [], []
        for j in range(c.n_layers):
            if overrides is not None:
                block = overrides[j]
                if block.ndim == 2:
                    block = T.reshape(block, (1,) + block.shape)
                if block.shape[0] == 1 and x.shape[0] > 1:
                    block = T.concat([block] * x.shape[0], axis=0)
                x = T.replace_rows(x, lat, block)
            checkpoints.append(x)
            x, att = self._block(j, x)
            attentions.append(att)
        checkpoints.append(x)
        p = self.params
        logits = T.layernorm(x, p["lnf_g"], p["lnf_b"]) @ p["head_w"] + p["head_b"]
        return Trace(checkpoints, attentions, logits)

    def latent_states(self, trace: Trace) -> list[Tensor]:
        """Latent rows of checkpoints 0..l-1, each (B, K, d)."""
        sl = self.layout.latent
        return [cp[:, sl, :] for cp in trace.checkpoints[: self.cfg.n_layers]]

    def answer_to_latent_attention(self, trace: Trace, layer: int) -> Tensor:
        """Attention from answer-predicting queries to latent keys: (B, H, M, K)."""
        if not 0 <= layer < self.cfg.n_layers:
            raise ContractError(f"layer {layer} out of range")
        om = self.omega_slice
        return trace.attentions[layer][:, :, om, self.layout.latent]

    @property
    def omega_slice(self) -> slice:
        lay = self.layout
        return slice(lay.ans_marker, lay.eos)

    def layout_omega(self) -> np.ndarray:
        """Answer-predicting positions of a full training sequence."""
        return np.arange(self.omega_slice.start, self.omega_slice.stop)

    def greedy_decode(self, ids, images, overrides=None) -> np.ndarray:
        """Argmax token at the final (ANS) position; ties go to the lowest id."""
        with T.no_grad():
            trace = self.forward(ids, images, overrides)
        return np.argmax(trace.logits.data[:, -1, :], axis=-1)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CRYL"
VERSION = 1


def save_checkpoint(path, model: TinyVLM) -> None:
    cfg = model.cfg.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        for t in model.parameters():
            f.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path) -> TinyVLM:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise ContractError("not a CRYL checkpoint")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", buf, 5)
    cfg = ModelConfig.from_dict(json.loads(buf[9 : 9 + n].decode("utf-8")))
    offset = 9 + n
    params = {}
    for name, shape in param_shapes(cfg).items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
    if offset != len(buf):
        raise ContractError("trailing bytes after parameters")
    return TinyVLM(cfg, params)
