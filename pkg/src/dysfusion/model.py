"""Speech encoder, text encoder, cross-attention fusion and classification heads."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .text import PAD_ID, VOCAB_SIZE

DETECTION = "detection"
SEVERITY = "severity"
SEVERITY_CLASSES = 4

SPEECH_ONLY = "speech"
SPEECH_TEXT = "speech-text"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    task: str = DETECTION
    n_mels: int = 80
    conv_channels: tuple[int, ...] = (16, 32)
    conv_kernel: int = 3
    conv_strides: tuple[tuple[int, int], ...] = ((2, 2), (2, 2))
    dropout_rate: float = 0.2
    freq_bands: int = 10
    gru_hidden: int = 64
    speech_gru_layers: int = 2
    text_embed_dim: int = 64
    d_model: int = 128
    head_dims: tuple[int, ...] = (128, 32)
    fusion_residual: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.task not in (DETECTION, SEVERITY):
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.conv_channels) != len(self.conv_strides):
            raise ConfigError("conv_channels and conv_strides differ in length")
        if self.conv_kernel % 2 != 1:
            raise ConfigError("conv_kernel must be odd")
        if self.freq_bands < 1 or self.freq_bands > self.conv_freq_width:
            raise ConfigError(f"freq_bands must be in [1, {self.conv_freq_width}]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def n_classes(self) -> int:
        return 1 if self.task == DETECTION else SEVERITY_CLASSES

    @property
    def conv_freq_width(self) -> int:
        w = self.n_mels
        for _, sf in self.conv_strides:
            w = -(-w // sf)
        return w

    @property
    def time_downsample(self) -> int:
        return math.prod(st for st, _ in self.conv_strides)

    def speech_length(self, n_frames: int) -> int:
        for st, _ in self.conv_strides:
            n_frames = -(-n_frames // st)
        return n_frames

    def is_reference_shape(self) -> bool:
        return (self.gru_hidden == 64 and tuple(self.head_dims) == (128, 32)
                and self.dropout_rate == 0.2 and len(self.conv_channels) == 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["conv_strides"] = [list(s) for s in self.conv_strides]
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("conv_channels", "head_dims"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        if "conv_strides" in d:
            d["conv_strides"] = tuple(tuple(int(v) for v in s) for s in d["conv_strides"])
        return cls(**d)


def config_digest(config: ModelConfig, modality: str) -> str:
    blob = json.dumps({"modality": modality, **config.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Batch:
    mel: np.ndarray            # (B, T, n_mels), zero-padded in time
    mel_lengths: np.ndarray    # (B,)
    tokens: np.ndarray         # (B, L_t), PAD_ID-padded
    token_mask: np.ndarray     # (B, L_t)
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.mel.shape[0]


@dataclass
class EncodedSpeech:
    states: Tensor     # (B, L_s, d)
    mask: np.ndarray   # (B, L_s)
    final: Tensor      # (B, 2 * gru_hidden), top Bi-GRU


@dataclass
class EncodedText:
    states: Tensor     # (B, L_t, d)
    pooled: Tensor     # (B, d)
    mask: np.ndarray   # (B, L_t)


@dataclass
class FusionOutput:
    context: Tensor            # (B, L_t, d)
    attention_weights: Tensor  # (B, L_t, L_s)


# ---------------------------------------------------------------------------
# parameter construction


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def weight(self, name, shape, fan_in, fan_out) -> Tensor:
        return self._add(name, glorot(self.rng, shape, fan_in, fan_out))

    def zeros(self, name, shape) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name, shape) -> Tensor:
        return self._add(name, np.ones(shape))

    def buffer(self, name, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ConfigError(f"duplicate buffer {name}")
        self.buffers[name] = value
        return value

    def _add(self, name, value) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        p = Parameter(value, name)
        self.params[name] = p
        return p


class Dense:
    def __init__(self, b: _Builder, name: str, d_in: int, d_out: int, bias: bool = True):
        self.w = b.weight(f"{name}.kernel", (d_in, d_out), d_in, d_out)
        self.b = b.zeros(f"{name}.bias", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


# ---------------------------------------------------------------------------
# recurrent layers


def gru_cell(x, h, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """One GRU update with gates ordered [update z, reset r, candidate].

    z = sig(x Wz + h Uz + bz); r = sig(x Wr + h Ur + br);
    cand = tanh(x Wh + (r*h) Uh + bh); h' = (1 - z) h + z cand
    """
    x, h = ad.as_tensor(x), ad.as_tensor(h)
    hidden = u.shape[0]
    if w.shape != (x.shape[-1], 3 * hidden) or h.shape[-1] != hidden or b.shape != (3 * hidden,):
        raise ad.ShapeError(f"gru_cell: x {x.shape}, h {h.shape}, W {w.shape}, U {u.shape}")
    xw = x @ w + b
    return _gru_update(xw[..., :2 * hidden], xw[..., 2 * hidden:], h, u[:, :2 * hidden], u[:, 2 * hidden:])


def _gru_update(xw_zr, xw_h, h, u_zr, u_h) -> Tensor:
    hidden = u_h.shape[0]
    zr = ad.sigmoid(xw_zr + h @ u_zr)
    z = zr[..., :hidden]
    r = zr[..., hidden:]
    cand = ad.tanh(xw_h + (r * h) @ u_h)
    return h + z * (cand - h)


class GRU:
    def __init__(self, b: _Builder, name: str, d_in: int, hidden: int):
        self.hidden = hidden
        self.w = b.weight(f"{name}.kernel", (d_in, 3 * hidden), d_in, 3 * hidden)
        self.u = b.weight(f"{name}.recurrent_kernel", (hidden, 3 * hidden), hidden, 3 * hidden)
        self.b = b.zeros(f"{name}.bias", (3 * hidden,))

    def run(self, x: Tensor, mask: np.ndarray, reverse: bool = False) -> tuple[Tensor, Tensor]:
        """Scan over axis 1 of ``x`` (B, L, d_in).

        Masked steps carry the previous hidden state through unchanged.
        Returns (states (B, L, H) in time order, state after the last step taken).
        """
        B, L, d_in = x.shape
        if L < 1:
            raise ad.ShapeError("GRU over an empty sequence")
        if d_in != self.w.shape[0]:
            raise ad.ShapeError(f"GRU expects {self.w.shape[0]} inputs, got {d_in}")
        H = self.hidden
        xw = x @ self.w + self.b
        xw_zr, xw_h = xw[:, :, :2 * H], xw[:, :, 2 * H:]
        u_zr, u_h = self.u[:, :2 * H], self.u[:, 2 * H:]
        h = Tensor(np.zeros((B, H)))
        outs: list[Tensor | None] = [None] * L
        steps = range(L - 1, -1, -1) if reverse else range(L)
        for t in steps:
            h_new = _gru_update(xw_zr[:, t], xw_h[:, t], h, u_zr, u_h)
            m = mask[:, t]
            if not m.all():
                h_new = h + (h_new - h) * m[:, None].astype(np.float64)
            h = outs[t] = h_new
        return ad.stack(outs, axis=1), h


class BiGRU:
    def __init__(self, b: _Builder, name: str, d_in: int, hidden: int):
        self.fwd = GRU(b, f"{name}.forward", d_in, hidden)
        self.bwd = GRU(b, f"{name}.backward", d_in, hidden)

    def __call__(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """states (B, L, 2H); final = [forward at last unmasked step || backward at step 0]."""
        fs, fh = self.fwd.run(x, mask)
        bs, bh = self.bwd.run(x, mask, reverse=True)
        return ad.concat([fs, bs], axis=-1), ad.concat([fh, bh], axis=-1)


def bigru_encode(layer: BiGRU, sequence, mask=None) -> tuple[Tensor, Tensor]:
    """Unbatched convenience wrapper: (L, d_in) -> states (L, 2H), final (2H,)."""
    seq = ad.as_tensor(sequence)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ad.ShapeError("bigru_encode needs a non-empty (L, d_in) sequence")
    mask = np.ones(seq.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    states, final = layer(seq.reshape(1, *seq.shape), mask[None, :])
    return states[0], final[0]


# ---------------------------------------------------------------------------
# encoders


class ConvBlock:
    def __init__(self, b: _Builder, name: str, cin: int, cout: int, k: int, stride, config: ModelConfig):
        self.kernel = b.weight(f"{name}.kernel", (k, k, cin, cout), k * k * cin, k * k * cout)
        self.bias = b.zeros(f"{name}.bias", (cout,))
        self.gamma = b.ones(f"{name}.bn.gamma", (cout,))
        self.beta = b.zeros(f"{name}.bn.beta", (cout,))
        self.running_mean = b.buffer(f"{name}.bn.running_mean", np.zeros(cout))
        self.running_var = b.buffer(f"{name}.bn.running_var", np.ones(cout))
        self.stride = tuple(stride)
        self.pad = (k // 2, k // 2)
        self.config = config

    def __call__(self, x: Tensor, time_mask: np.ndarray, training: bool, rng) -> tuple[Tensor, np.ndarray]:
        cfg = self.config
        y = ad.conv2d(x, self.kernel, self.stride, self.pad) + self.bias
        y = ad.relu(y)
        lengths = -(-time_mask.sum(axis=1) // self.stride[0])
        mask = np.arange(y.shape[1])[None, :] < lengths[:, None]
        y = ad.batchnorm(y, self.gamma, self.beta, self.running_mean, self.running_var, training,
                         mask=mask[:, :, None], momentum=cfg.bn_momentum, eps=cfg.bn_eps)
        y = ad.dropout(y, cfg.dropout_rate, training, rng)
        if not mask.all():
            # zero padded frames so the next conv sees the same borders as an unpadded input
            y = y * mask[:, :, None, None].astype(np.float64)
        return y, mask


def band_pool_matrix(width: int, bands: int) -> np.ndarray:
    """(width, bands) averaging matrix over contiguous frequency bands."""
    edges = [(i * width) // bands for i in range(bands + 1)]
    P = np.zeros((width, bands))
    for j in range(bands):
        P[edges[j]:edges[j + 1], j] = 1.0 / (edges[j + 1] - edges[j])
    return P


class SpeechEncoder:
    def __init__(self, b: _Builder, config: ModelConfig, name: str = "speech_enc", project: bool = True):
        self.config = config
        self.blocks = []
        cin = 1
        for i, (cout, stride) in enumerate(zip(config.conv_channels, config.conv_strides), start=1):
            self.blocks.append(ConvBlock(b, f"{name}.conv{i}", cin, cout, config.conv_kernel, stride, config))
            cin = cout
        self.pool = band_pool_matrix(config.conv_freq_width, config.freq_bands)
        d_in = cin * config.freq_bands
        self.grus = []
        for i in range(1, config.speech_gru_layers + 1):
            self.grus.append(BiGRU(b, f"{name}.bigru{i}", d_in, config.gru_hidden))
            d_in = 2 * config.gru_hidden
        self.proj = Dense(b, f"{name}.proj", d_in, config.d_model) if project else None

    def __call__(self, mel: np.ndarray, lengths: np.ndarray, training: bool = False, rng=None) -> EncodedSpeech:
        mel = np.asarray(mel, dtype=np.float64)
        if mel.ndim != 3 or mel.shape[2] != self.config.n_mels:
            raise ad.ShapeError(f"expected (B, T, {self.config.n_mels}) mel batch, got {mel.shape}")
        lengths = np.asarray(lengths)
        if (lengths < 1).any():
            raise ad.ShapeError("every utterance needs at least one frame")
        B, T, _ = mel.shape
        mask = np.arange(T)[None, :] < lengths[:, None]
        # whatever sits in the padding, the first conv must see zeros there
        x = Tensor(np.where(mask[:, :, None], mel, 0.0)[..., None])
        for block in self.blocks:
            x, mask = block(x, mask, training, rng)
        # (B, T', W', C) -> (B, T', C, bands) -> (B, T', C * bands)
        x = ad.transpose(x, (0, 1, 3, 2)) @ self.pool
        seq = x.reshape(B, x.shape[1], -1)
        final = None
        for layer in self.grus:
            seq, final = layer(seq, mask)
        states = self.proj(seq) if self.proj is not None else seq
        return EncodedSpeech(states, mask, final)


class TextEncoder:
    def __init__(self, b: _Builder, config: ModelConfig, name: str = "text_enc"):
        E = config.text_embed_dim
        # table row PAD_ID is the padding slot; it never influences unmasked outputs
        self.embedding = b.weight(f"{name}.embedding", (VOCAB_SIZE + 1, E), VOCAB_SIZE + 1, E)
        self.gru = BiGRU(b, f"{name}.bigru", E, config.gru_hidden)
        self.proj = Dense(b, f"{name}.proj", 2 * config.gru_hidden, config.d_model)

    def __call__(self, tokens: np.ndarray, mask: np.ndarray | None = None) -> EncodedText:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ad.ShapeError("expected a (B, L_t) token batch with L_t >= 1")
        if mask is None:
            mask = tokens != PAD_ID
        bad = (tokens < 0) | (tokens > VOCAB_SIZE) | ((tokens == PAD_ID) & mask)
        if bad.any():
            raise ad.ShapeError("token id out of range [0, 25]")
        if not mask.any(axis=1).all():
            raise ad.ShapeError("empty token sequence")
        x = ad.embedding(self.embedding, tokens)
        seq, final = self.gru(x, mask)
        return EncodedText(self.proj(seq), self.proj(final), mask)


class CrossAttention:
    """Single-head scaled dot-product attention: text queries, speech keys/values."""

    def __init__(self, b: _Builder, d: int, name: str = "fusion"):
        self.d = d
        self.wq = b.weight(f"{name}.query", (d, d), d, d)
        self.wk = b.weight(f"{name}.key", (d, d), d, d)
        self.wv = b.weight(f"{name}.value", (d, d), d, d)

    def __call__(self, text: EncodedText, speech: EncodedSpeech) -> FusionOutput:
        return cross_attention(text.states, speech.states, speech.mask, self.wq, self.wk, self.wv)


def cross_attention(text_states, speech_states, speech_mask, wq, wk, wv) -> FusionOutput:
    text_states, speech_states = ad.as_tensor(text_states), ad.as_tensor(speech_states)
    d = wq.shape[1]
    if text_states.shape[-1] != wq.shape[0] or speech_states.shape[-1] != wk.shape[0]:
        raise ad.ShapeError("cross_attention: embedding dimension mismatch")
    q = text_states @ wq
    k = speech_states @ wk
    v = speech_states @ wv
    scores = (q @ ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d))
    weights = ad.masked_softmax(scores, np.asarray(speech_mask, dtype=bool)[:, None, :], axis=-1)
    return FusionOutput(weights @ v, weights)


class DenseHead:
    def __init__(self, b: _Builder, name: str, d_in: int, config: ModelConfig):
        self.hidden = []
        for i, width in enumerate(config.head_dims, start=1):
            self.hidden.append(Dense(b, f"{name}.dense{i}", d_in, width))
            d_in = width
        self.out = Dense(b, f"{name}.output", d_in, config.n_classes)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.hidden:
            x = ad.relu(layer(x))
        return self.out(x)


# ---------------------------------------------------------------------------
# full models


def head_scores(logits: Tensor, task: str) -> Tensor:
    """Sigmoid probability (B,) for detection; softmax distribution (B, 4) for severity."""
    if task == DETECTION:
        if logits.shape[-1] != 1:
            raise ConfigError("detection head must emit one logit")
        return ad.sigmoid(logits[..., 0])
    if logits.shape[-1] != SEVERITY_CLASSES:
        raise ConfigError("severity head must emit four logits")
    return ad.masked_softmax(logits, axis=-1)


def decide(scores: np.ndarray, task: str, threshold: float = 0.5) -> np.ndarray:
    """Class decisions; severity ties resolve to the lowest class index (np.argmax)."""
    scores = np.asarray(scores)
    if task == DETECTION:
        return (scores >= threshold).astype(np.int64)
    return np.argmax(scores, axis=-1)


class _Model:
    modality: str

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        self._builder = _Builder(rng)

    @property
    def params(self) -> dict[str, Tensor]:
        return self._builder.params

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self._builder.buffers

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def digest(self) -> str:
        return config_digest(self.config, self.modality)

    def _check_count(self) -> None:
        got = self.parameter_count()
        want = expected_parameter_count(self.config, self.modality)
        if got != want:
            raise ConfigError(f"built {got} parameters, architecture formula says {want}")
        if self.config.is_reference_shape() and self.config == reference_config(self.config.task):
            fixed = REFERENCE_PARAMETER_COUNTS[(self.modality, self.config.task)]
            if got != fixed:
                raise ConfigError(f"reference config built {got} parameters, documented {fixed}")

    def logits(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        raise NotImplementedError

    def scores(self, batch: Batch) -> np.ndarray:
        with ad.no_record():
            return head_scores(self.logits(batch, training=False), self.config.task).data

    def predict(self, batch: Batch) -> np.ndarray:
        return decide(self.scores(batch), self.config.task)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        state.update({name: buf.copy() for name, buf in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ConfigError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]
        for name, buf in self.buffers.items():
            buf[...] = state[name]


class MultimodalModel(_Model):
    """Speech and text encoders joined by cross-attention, then GRU + dense head."""

    modality = SPEECH_TEXT

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        super().__init__(config, rng)
        b = self._builder
        self.speech_enc = SpeechEncoder(b, config)
        self.text_enc = TextEncoder(b, config)
        self.fusion = CrossAttention(b, config.d_model)
        gru_in = 2 * config.d_model if config.fusion_residual else config.d_model
        self.cls_gru = GRU(b, "classifier.gru", gru_in, config.gru_hidden)
        self.head = DenseHead(b, "classifier", config.gru_hidden, config)
        self._check_count()

    def encode(self, batch: Batch, training: bool = False, rng=None):
        speech = self.speech_enc(batch.mel, batch.mel_lengths, training, rng)
        text = self.text_enc(batch.tokens, batch.token_mask)
        return speech, text, self.fusion(text, speech)

    def classify(self, fusion: FusionOutput, text: EncodedText) -> Tensor:
        x = fusion.context
        if self.config.fusion_residual:
            x = ad.concat([x, text.states], axis=-1)
        _, final = self.cls_gru.run(x, text.mask)
        return self.head(final)

    def logits(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        _, text, fusion = self.encode(batch, training, rng)
        return self.classify(fusion, text)


class SpeechOnlyModel(_Model):
    """Baseline: speech encoder's final Bi-GRU state straight into the dense head."""

    modality = SPEECH_ONLY

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        super().__init__(config, rng)
        b = self._builder
        self.speech_enc = SpeechEncoder(b, config, project=False)
        self.head = DenseHead(b, "classifier", 2 * config.gru_hidden, config)
        self._check_count()

    def logits(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        speech = self.speech_enc(batch.mel, batch.mel_lengths, training, rng)
        return self.head(speech.final)


def build_model(config: ModelConfig, modality: str, rng: np.random.Generator | int = 0) -> _Model:
    if modality == SPEECH_TEXT:
        return MultimodalModel(config, rng)
    if modality == SPEECH_ONLY:
        return SpeechOnlyModel(config, rng)
    raise ConfigError(f"unknown modality {modality!r}")


# ---------------------------------------------------------------------------
# parameter bookkeeping


def reference_config(task: str = DETECTION) -> ModelConfig:
    return ModelConfig(task=task)


# Documented sizes of the default architecture; a change here means the
# architecture drifted.
REFERENCE_PARAMETER_COUNTS = {
    (SPEECH_TEXT, DETECTION): 434401,
    (SPEECH_TEXT, SEVERITY): 434500,
    (SPEECH_ONLY, DETECTION): 247521,
    (SPEECH_ONLY, SEVERITY): 247620,
}


def expected_parameter_count(config: ModelConfig, modality: str) -> int:
    H = config.gru_hidden

    def gru(d_in):
        return 3 * H * (d_in + H + 1)

    def dense(d_in, d_out):
        return d_in * d_out + d_out

    k = config.conv_kernel
    total = 0
    cin = 1
    for cout in config.conv_channels:
        total += k * k * cin * cout + cout + 2 * cout
        cin = cout
    d_in = cin * config.freq_bands
    for _ in range(config.speech_gru_layers):
        total += 2 * gru(d_in)
        d_in = 2 * H
    head = 0
    width = H if modality == SPEECH_TEXT else 2 * H
    for h in config.head_dims:
        head += dense(width, h)
        width = h
    head += dense(width, config.n_classes)
    if modality == SPEECH_ONLY:
        return total + head
    d = config.d_model
    total += dense(2 * H, d)                                   # speech projection
    total += (VOCAB_SIZE + 1) * config.text_embed_dim           # embedding
    total += 2 * gru(config.text_embed_dim) + dense(2 * H, d)   # text Bi-GRU + projection
    total += 3 * d * d                                          # Q, K, V
    total += gru(2 * d if config.fusion_residual else d)
    return total + head


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"DYCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    digest: str
    state: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: _Model, meta: dict | None = None) -> None:
    """Binary layout, little-endian:

    magic(4) version(u16) digest(64 ascii hex) meta_len(u32) meta(json utf-8) count(u32)
    then per tensor: name_len(u16) name ndim(u8) shape(u32 * ndim) float64 data.
    """
    state = model.state_dict()
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), model.digest.encode("ascii"),
             struct.pack("<I", len(meta_blob)), meta_blob, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    try:
        if blob[:4] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        digest = blob[6:70].decode("ascii")
        (meta_len,) = struct.unpack_from("<I", blob, 70)
        pos = 74
        meta = json.loads(blob[pos:pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
    except (struct.error, ValueError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from err
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes")
    return Checkpoint(digest, state, meta)


def load_checkpoint(path, model: _Model) -> Checkpoint:
    ckpt = read_checkpoint(path)
    if ckpt.digest != model.digest:
        raise CheckpointError(f"{path}: config digest {ckpt.digest[:12]} does not match model {model.digest[:12]}")
    model.load_state_dict(ckpt.state)
    return ckpt
