"""EEND-EDA: transformer encoder, LSTM encoder-decoder attractors, sigmoid posteriors.

Embeddings are kept frames-as-rows (``T x D``); posteriors come out ``C x T``.
Parameters live in a flat ``name -> ndarray`` dict so the trainer, the
optimizer and the checkpoint format all see the same thing.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .frontend import FEATURE_DIM
from .numerics import NumericError, Tensor, Tape

CHECKPOINT_MAGIC = "EENDCKPT 1"
INIT_SCHEME = "xavier_uniform(+-sqrt(6/(fan_in+fan_out))) bias=0 ln_gain=1 lstm_forget_bias=1"


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    input_dim: int = FEATURE_DIM
    n_speakers: int = 2
    chunk_len: int = 500
    positional_encoding: bool = False
    vad_layer: int = 0  # 1-based encoder layer for the VAD loss; 0 means topmost

    def validate(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_speakers < 1 or self.n_layers < 1 or self.chunk_len < 1:
            raise ValueError("n_speakers, n_layers and chunk_len must be >= 1")
        if not 0 <= self.vad_layer <= self.n_layers:
            raise ValueError(f"vad_layer must be in [0, {self.n_layers}]")

    @property
    def attention_layer(self) -> int:
        """0-based index of the layer whose heads the VAD loss supervises."""
        return (self.vad_layer or self.n_layers) - 1


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"in.w": (cfg.input_dim, d), "in.b": (d,), "in_ln.g": (d,), "in_ln.b": (d,)}
    for l in range(cfg.n_layers):
        p = f"enc{l}."
        for name in "qkvo":
            shapes[p + name + ".w"] = (d, d)
            shapes[p + name + ".b"] = (d,)
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "ff1.w": (d, f), p + "ff1.b": (f,),
            p + "ff2.w": (f, d), p + "ff2.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
        })
    for p in ("eda_enc.", "eda_dec."):
        shapes.update({p + "wx": (d, 4 * d), p + "wh": (d, 4 * d), p + "b": (4 * d,)})
    shapes.update({"exist.w": (d, 1), "exist.b": (1,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    d = cfg.d_model
    for p in ("eda_enc.b", "eda_dec.b"):
        params[p][d:2 * d] = 1.0
    return params


# -- forward pieces ------------------------------------------------------------------

def linear(x, params, prefix: str) -> Tensor:
    return nx.matmul(x, params[prefix + ".w"]) + params[prefix + ".b"]


def mhsa(e, params, prefix: str, n_heads: int) -> tuple[Tensor, list[Tensor]]:
    """Multi-head scaled dot-product self-attention over the rows of ``e``.

    Returns the output-projected result and each head's T x T weight matrix.
    """
    d_model = e.shape[1]
    if d_model % n_heads:
        raise nx.DimensionError(f"d_model {d_model} not divisible by {n_heads} heads")
    scale = 1.0 / math.sqrt(d_model // n_heads)
    qs = nx.split_cols(linear(e, params, prefix + "q"), n_heads)
    ks = nx.split_cols(linear(e, params, prefix + "k"), n_heads)
    vs = nx.split_cols(linear(e, params, prefix + "v"), n_heads)
    weights, outs = [], []
    for q, k, v in zip(qs, ks, vs):
        w = nx.softmax_rows(nx.matmul(q, k.T) * scale)
        weights.append(w)
        outs.append(nx.matmul(w, v))
    return linear(nx.concat_cols(outs), params, prefix + "o"), weights


def sinusoid_positions(n_frames: int, d: int) -> np.ndarray:
    pos = np.arange(n_frames)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((n_frames, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: d // 2])
    return pe


def encoder_forward(x, params, cfg: ModelConfig, record_attention: bool = True):
    """Input projection + N post-norm transformer layers.

    Returns ``(embeddings, attention)``: ``embeddings[l]`` is E_{l+1} (T x D),
    and ``attention[l][h]`` the head weights, or ``None`` when not recorded.
    """
    x = nx.as_tensor(x)
    if x.shape[0] > cfg.chunk_len:
        raise ValueError(f"chunk of {x.shape[0]} frames exceeds chunk_len {cfg.chunk_len}")
    e = nx.layer_norm(linear(x, params, "in"), params["in_ln.g"], params["in_ln.b"])
    if cfg.positional_encoding:
        e = e + sinusoid_positions(x.shape[0], cfg.d_model)
    embeddings, attention = [], [] if record_attention else None
    for l in range(cfg.n_layers):
        p = f"enc{l}."
        try:
            a, w = mhsa(e, params, p, cfg.n_heads)
            e = nx.layer_norm(e + a, params[p + "ln1.g"], params[p + "ln1.b"])
            f = linear(nx.relu(linear(e, params, p + "ff1")), params, p + "ff2")
            e = nx.layer_norm(e + f, params[p + "ln2.g"], params[p + "ln2.b"])
        except NumericError as err:
            raise NumericError(f"encoder layer {l + 1}: {err}") from err
        embeddings.append(e)
        if record_attention:
            attention.append(w)
    return embeddings, attention


@dataclass
class AttractorSet:
    attractors: Tensor  # (C+1) x D
    existence_logits: Tensor  # (C+1,)

    @property
    def n_speakers(self) -> int:
        return self.attractors.shape[0] - 1


def eda(e_n, params, n_speakers: int) -> AttractorSet:
    """Encoder LSTM reads the frames in order; decoder LSTM emits C+1 attractors."""
    e_n = nx.as_tensor(e_n)
    d = e_n.shape[1]
    h = c = Tensor(np.zeros(d))
    for frame in nx.split_rows(e_n):
        h, c = nx.lstm_cell(h, c, frame, params["eda_enc.wx"], params["eda_enc.wh"], params["eda_enc.b"])
    zero = Tensor(np.zeros(d))
    attractors = []
    for _ in range(n_speakers + 1):
        h, c = nx.lstm_cell(h, c, zero, params["eda_dec.wx"], params["eda_dec.wh"], params["eda_dec.b"])
        attractors.append(h)
    a = nx.stack_rows(attractors)
    logits = nx.reshape(linear(a, params, "exist"), (n_speakers + 1,))
    return AttractorSet(a, logits)


def posteriors(att: AttractorSet, e_n, n_speakers: int | None = None) -> Tensor:
    """C x T speaker activity probabilities from the first C attractors."""
    n_speakers = att.n_speakers if n_speakers is None else n_speakers
    a = att.attractors[:n_speakers]
    return nx.sigmoid(nx.matmul(a, nx.as_tensor(e_n).T))


@dataclass
class ForwardResult:
    embeddings: list[Tensor]
    attention: list[list[Tensor]] | None
    attractors: AttractorSet
    posteriors: Tensor

    def attention_array(self) -> np.ndarray:
        """N x H x T x T weights as a plain array."""
        return np.array([[w.data for w in layer] for layer in self.attention])


class EendEda:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.params = init_params(config, seed) if params is None else params
        shapes = param_shapes(config)
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, want {shape}")
        if set(self.params) != set(shapes):
            raise ValueError("parameter names do not match the configuration")

    def watch(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.watch(v, k) for k, v in self.params.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def forward(self, x, params: dict[str, Tensor] | None = None,
                record_attention: bool = True) -> ForwardResult:
        params = self.constants() if params is None else params
        emb, attn = encoder_forward(x, params, self.config, record_attention)
        att = eda(emb[-1], params, self.config.n_speakers)
        return ForwardResult(emb, attn, att, posteriors(att, emb[-1], self.config.n_speakers))

    def infer(self, features: np.ndarray) -> np.ndarray:
        return chunk_and_stitch(features, self)

    def copy(self) -> EendEda:
        return EendEda(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)


# -- chunked inference --------------------------------------------------------------

def _unit(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norms > 0, norms, 1.0)


def align_channels(prev_attractors: np.ndarray, attractors: np.ndarray) -> tuple[int, ...]:
    """Permutation of ``attractors`` rows maximizing cosine similarity to ``prev_attractors``."""
    sim = _unit(np.asarray(prev_attractors)) @ _unit(np.asarray(attractors)).T
    n = sim.shape[0]
    return max(itertools.permutations(range(n)), key=lambda p: sum(sim[i, p[i]] for i in range(n)))


def stitch(chunk_posteriors: list[np.ndarray], chunk_attractors: list[np.ndarray]) -> np.ndarray:
    """Concatenate per-chunk posteriors after aligning speaker channels chunk to chunk."""
    out = [chunk_posteriors[0]]
    prev = chunk_attractors[0]
    for y, a in zip(chunk_posteriors[1:], chunk_attractors[1:]):
        perm = list(align_channels(prev, a))
        out.append(y[perm])
        prev = a[perm]
    return np.concatenate(out, axis=1)


def chunk_and_stitch(features: np.ndarray, model: EendEda) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("empty feature sequence")
    n_spk, size = model.config.n_speakers, model.config.chunk_len
    params = model.constants()
    ys, attrs = [], []
    for start in range(0, feats.shape[0], size):
        res = model.forward(feats[start:start + size], params, record_attention=False)
        ys.append(res.posteriors.data)
        attrs.append(res.attractors.attractors.data[:n_spk])
    return stitch(ys, attrs)


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path, model: EendEda, header: dict | None = None,
                    blocks: dict[str, np.ndarray] | None = None) -> None:
    """Text header, then every block's float64 payload in header order.

    ``blocks`` holds extra named arrays (optimizer moments) after the params.
    """
    items = list(model.params.items()) + list((blocks or {}).items())
    lines = [CHECKPOINT_MAGIC, "version 1", "config " + json.dumps(asdict(model.config), sort_keys=True),
             f"init {INIT_SCHEME} seed={model.seed}"]
    for key, value in (header or {}).items():
        lines.append(f"meta {key} {json.dumps(value)}")
    for name, arr in items:
        lines.append(f"block {name} {','.join(str(n) for n in arr.shape)}")
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for _, arr in items:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[EendEda, dict, dict[str, np.ndarray]]:
    """Returns ``(model, meta header, extra blocks)``."""
    with open(path, "rb") as f:
        if f.readline().decode("utf-8").rstrip("\n") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        config, seed, meta, layout = None, 0, {}, []
        for raw in iter(f.readline, b""):
            line = raw.decode("utf-8").rstrip("\n")
            if line == "end_header":
                break
            kind, _, rest = line.partition(" ")
            if kind == "config":
                config = ModelConfig(**json.loads(rest))
            elif kind == "init":
                seed = int(rest.rsplit("seed=", 1)[1])
            elif kind == "meta":
                key, _, value = rest.partition(" ")
                meta[key] = json.loads(value)
            elif kind == "block":
                name, _, dims = rest.partition(" ")
                layout.append((name, tuple(int(n) for n in dims.split(",") if n)))
        else:
            raise ValueError(f"{path}: truncated checkpoint header")
        payload = f.read()
    if config is None:
        raise ValueError(f"{path}: checkpoint has no config line")
    arrays, offset = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n > len(payload):
            raise ValueError(f"{path}: payload ends inside block {name}")
        arrays[name] = np.frombuffer(payload[offset:offset + n], dtype="<f8").reshape(shape).copy()
        offset += n
    if offset != len(payload):
        raise ValueError(f"{path}: trailing bytes after last block")
    names = set(param_shapes(config))
    params = {k: v for k, v in arrays.items() if k in names}
    extra = {k: v for k, v in arrays.items() if k not in names}
    return EendEda(config, params, seed), meta, extra
