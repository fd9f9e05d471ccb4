"""Causal transformer over discrete audio units, training, sampling, and the
prompt-continuation pipeline.

Pre-norm blocks with GELU feed-forwards, learned positional embeddings, and a
BOS token appended to the vocabulary (id = vocab_size - 1). The output head
starts at zero so an untrained model is exactly uniform over the vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .checkpoint import (LM_MAGIC, load_checkpoint, load_tokens, save_checkpoint,
                         save_tokens)
from .codec import Codec, TokenSequence, decode, tokenize_waveform
from .dsp import Waveform
from .optim import Adam, inverse_sqrt_lr
from .seeding import stage_rng
from .tensor import Tensor

IGNORE_INDEX = -1


class LmError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int  # codebook size + 1; the extra id is BOS
    num_layers: int = 4
    num_heads: int = 4
    embed_dim: int = 128
    ffn_dim: int = 512
    max_seq_len: int = 1024
    dropout: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise LmError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}")
        if self.vocab_size < 2:
            raise LmError("vocab_size must be at least 2")

    @property
    def bos_id(self) -> int:
        return self.vocab_size - 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def desk_config(codebook_size: int, **overrides) -> LmConfig:
    return LmConfig(vocab_size=codebook_size + 1, **overrides)


def full_scale_config(codebook_size: int) -> LmConfig:
    """The full-size shape preset: constructible, not desk-trainable."""
    return LmConfig(vocab_size=codebook_size + 1, num_layers=24, num_heads=16,
                    embed_dim=1024, ffn_dim=4096, max_seq_len=1024)


def init_lm_params(cfg: LmConfig, rng: np.random.Generator) -> dict:
    p: dict[str, Tensor] = {}

    def par(name, arr):
        p[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)

    d, f = cfg.embed_dim, cfg.ffn_dim
    par("tok_embed", rng.normal(0.0, 0.02, size=(cfg.vocab_size, d)))
    par("pos_embed", rng.normal(0.0, 0.02, size=(cfg.max_seq_len, d)))
    for i in range(cfg.num_layers):
        pre = f"layer{i}"
        par(f"{pre}.ln1.g", np.ones(d))
        par(f"{pre}.ln1.b", np.zeros(d))
        par(f"{pre}.attn.wq", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))
        par(f"{pre}.attn.wk", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))
        par(f"{pre}.attn.wv", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))
        par(f"{pre}.attn.wo", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))
        par(f"{pre}.attn.bo", np.zeros(d))
        par(f"{pre}.ln2.g", np.ones(d))
        par(f"{pre}.ln2.b", np.zeros(d))
        par(f"{pre}.ffn.w1", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, f)))
        par(f"{pre}.ffn.b1", np.zeros(f))
        par(f"{pre}.ffn.w2", rng.normal(0.0, 1.0 / math.sqrt(f), size=(f, d)))
        par(f"{pre}.ffn.b2", np.zeros(d))
    par("ln_f.g", np.ones(d))
    par("ln_f.b", np.zeros(d))
    # zero head: an untrained model is uniform at every position
    par("head.w", np.zeros((d, cfg.vocab_size)))
    par("head.b", np.zeros(cfg.vocab_size))
    return p


_neg_inf_masks: dict = {}


def _causal_mask(s: int) -> Tensor:
    if s not in _neg_inf_masks:
        m = np.zeros((s, s), dtype=np.float32)
        m[np.triu_indices(s, k=1)] = -np.inf
        _neg_inf_masks[s] = Tensor(m)
    return _neg_inf_masks[s]


def lm_forward_batch(ids: np.ndarray, cfg: LmConfig, params: dict,
                     dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits [batch, seq, vocab] for int ids [batch, seq]; causal."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise LmError(f"ids must be [batch, seq], got {ids.shape}")
    b, s = ids.shape
    if s > cfg.max_seq_len:
        raise LmError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise LmError(
            f"token id out of range [0, {cfg.vocab_size}): {int(ids.max())}")
    p = params
    h = T.add(T.embedding(p["tok_embed"], ids),
              T.embedding(p["pos_embed"], np.arange(s)))
    nh, hd = cfg.num_heads, cfg.head_dim
    mask = _causal_mask(s)
    inv_sqrt = 1.0 / math.sqrt(hd)
    keep = None
    if dropout_rng is not None and cfg.dropout > 0.0:
        def keep(x):  # inverted dropout; masks come from the training rng
            m = (dropout_rng.random(x.shape) >= cfg.dropout).astype(np.float32)
            return T.mul(x, Tensor(m / (1.0 - cfg.dropout)))

    for i in range(cfg.num_layers):
        pre = f"layer{i}"
        hn = T.layernorm(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = _split_heads(T.matmul(hn, p[f"{pre}.attn.wq"]), b, s, nh, hd)
        k = _split_heads(T.matmul(hn, p[f"{pre}.attn.wk"]), b, s, nh, hd)
        v = _split_heads(T.matmul(hn, p[f"{pre}.attn.wv"]), b, s, nh, hd)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), inv_sqrt)
        att = T.softmax(T.add(scores, mask))
        ctx = T.matmul(att, v)  # [b*nh, s, hd]
        ctx = T.reshape(T.transpose(T.reshape(ctx, (b, nh, s, hd)), (0, 2, 1, 3)),
                        (b, s, nh * hd))
        attn_out = T.add(T.matmul(ctx, p[f"{pre}.attn.wo"]), p[f"{pre}.attn.bo"])
        if keep is not None:
            attn_out = keep(attn_out)
        h = T.add(h, attn_out)
        hn = T.layernorm(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        ff = T.gelu(T.add(T.matmul(hn, p[f"{pre}.ffn.w1"]), p[f"{pre}.ffn.b1"]))
        ff = T.add(T.matmul(ff, p[f"{pre}.ffn.w2"]), p[f"{pre}.ffn.b2"])
        if keep is not None:
            ff = keep(ff)
        h = T.add(h, ff)
    h = T.layernorm(h, p["ln_f.g"], p["ln_f.b"])
    return T.add(T.matmul(h, p["head.w"]), p["head.b"])


def _split_heads(x: Tensor, b: int, s: int, nh: int, hd: int) -> Tensor:
    return T.reshape(T.transpose(T.reshape(x, (b, s, nh, hd)), (0, 2, 1, 3)),
                     (b * nh, s, hd))


def lm_forward(tokens: Sequence[int], cfg: LmConfig, params: dict) -> np.ndarray:
    """Eval-mode logits [len, vocab] for one BOS-prefixed sequence."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise LmError("lm_forward expects a 1-d token sequence")
    with T.no_grad():
        out = lm_forward_batch(ids[None, :], cfg, params)
    return out.data[0]


def _batch_inputs_targets(seqs: list, bos_id: int):
    """BOS-prefixed inputs and one-shifted targets, padded with the ignore id."""
    if not seqs:
        raise LmError("empty batch")
    lens = [len(s) for s in seqs]
    if min(lens) < 1:
        raise LmError("empty token sequence in batch")
    width = max(lens)
    inputs = np.full((len(seqs), width), bos_id, dtype=np.int64)
    targets = np.full((len(seqs), width), IGNORE_INDEX, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr = np.asarray(s, dtype=np.int64)
        inputs[i, 0] = bos_id
        inputs[i, 1:len(arr)] = arr[:-1]
        targets[i, :len(arr)] = arr
    return inputs, targets


def lm_loss(batch, cfg: LmConfig, params: dict,
            dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
    """Mean next-token NLL over non-ignored positions of a batch of sequences."""
    seqs = [s.tokens if isinstance(s, TokenSequence) else np.asarray(s)
            for s in batch]
    inputs, targets = _batch_inputs_targets(seqs, cfg.bos_id)
    logits = lm_forward_batch(inputs, cfg, params, dropout_rng)
    flat = T.reshape(logits, (inputs.shape[0] * inputs.shape[1], cfg.vocab_size))
    return T.cross_entropy_with_logits(flat, targets.reshape(-1), IGNORE_INDEX)


def _nll_sum(batch, cfg: LmConfig, params: dict):
    """(total nll, position count) in eval mode; exact partner of lm_loss."""
    seqs = [s.tokens if isinstance(s, TokenSequence) else np.asarray(s)
            for s in batch]
    inputs, targets = _batch_inputs_targets(seqs, cfg.bos_id)
    with T.no_grad():
        logits = lm_forward_batch(inputs, cfg, params)
        flat = T.reshape(logits, (inputs.shape[0] * inputs.shape[1], cfg.vocab_size))
        loss = T.cross_entropy_with_logits(flat, targets.reshape(-1), IGNORE_INDEX)
    count = int((targets != IGNORE_INDEX).sum())
    return loss.item() * count, count


# ---------------------------------------------------------------------------
# token corpus

@dataclass
class TokenCorpus:
    """Token sequences from one tokenizer (codec or baseline), with splits."""

    sequences: list
    splits: list
    source_digest: str
    k: int
    r_samples: int

    def __post_init__(self):
        if len(self.sequences) != len(self.splits):
            raise LmError("sequences and splits length mismatch")
        for seq in self.sequences:
            if seq.k != self.k or seq.r_samples != self.r_samples:
                raise LmError("corpus mixes sequences from different tokenizers")

    def split(self, name: str) -> list:
        return [s for s, sp in zip(self.sequences, self.splits) if sp == name]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (seq, split) in enumerate(zip(self.sequences, self.splits)):
            name = f"clip{i:05d}.tok"
            save_tokens(directory / name, self.k, self.r_samples, seq.source_t,
                        seq.tokens)
            entries.append({"file": name, "split": split})
        index = {"source_digest": self.source_digest, "k": self.k,
                 "r_samples": self.r_samples, "entries": entries}
        import json
        (directory / "corpus.json").write_text(json.dumps(index, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "TokenCorpus":
        import json
        directory = Path(directory)
        index = json.loads((directory / "corpus.json").read_text())
        seqs, splits = [], []
        for entry in index["entries"]:
            k, r_samples, source_t, ids = load_tokens(directory / entry["file"])
            seqs.append(TokenSequence(ids, r_samples, source_t, k))
            splits.append(entry["split"])
        return cls(seqs, splits, index["source_digest"], index["k"],
                   index["r_samples"])


def tokenize_corpus(manifest, codec: Codec) -> TokenCorpus:
    from .dsp import read_wav
    seqs, splits = [], []
    for entry in manifest.entries:
        seqs.append(tokenize_waveform(read_wav(entry.path), codec))
        splits.append(entry.split)
    return TokenCorpus(seqs, splits, codec.digest(), codec.cfg.codebook_size,
                       codec.cfg.r_samples)


def chunk_tokens(tokens: np.ndarray, window: int) -> list:
    """Split long streams into windows with 50 percent overlap."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) <= window:
        return [tokens]
    hop = max(1, window // 2)
    out = []
    start = 0
    while start + window <= len(tokens):
        out.append(tokens[start:start + window])
        start += hop
    if start < len(tokens) and len(tokens) - start > hop // 2:
        out.append(tokens[-window:])
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class LmTrainConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 3e-4
    warmup_steps: int = 0
    eval_every: int = 100
    eval_batches: int = 4
    log_every: int = 50


@dataclass
class LmCheckpointInfo:
    config: LmConfig
    step: int
    codec_digest: str


@dataclass
class LmTrainResult:
    params: dict
    cfg: LmConfig
    checkpoint_path: Optional[str]
    loss_history: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)


def save_lm(path, cfg: LmConfig, params: dict, step: int, codec_digest: str):
    blobs = {name: t.data for name, t in params.items()}
    save_checkpoint(path, LM_MAGIC, asdict(cfg), blobs,
                    {"kind": "lm", "step": step, "codec_digest": codec_digest})


def load_lm(path):
    """Return (cfg, params, info)."""
    _, blobs, meta = load_checkpoint(path, LM_MAGIC)
    cfg = LmConfig(**meta["config"])
    params = {name: Tensor(arr, requires_grad=True, name=name)
              for name, arr in blobs.items()}
    info = LmCheckpointInfo(cfg, meta.get("step", 0), meta.get("codec_digest", ""))
    return cfg, params, info


def train_lm(corpus: TokenCorpus, cfg: LmConfig, train_cfg: LmTrainConfig,
             seed: int, out_path=None,
             expected_digest: Optional[str] = None) -> LmTrainResult:
    """Train on the corpus train split; periodic eval-split loss; deterministic."""
    if expected_digest is not None and corpus.source_digest != expected_digest:
        raise LmError(
            f"corpus/codec digest mismatch: corpus {corpus.source_digest[:12]} "
            f"vs expected {expected_digest[:12]}")
    if cfg.vocab_size != corpus.k + 1:
        raise LmError(
            f"vocab_size {cfg.vocab_size} != corpus K + 1 = {corpus.k + 1}")
    window = cfg.max_seq_len
    train_windows = [w for s in corpus.split("train")
                     for w in chunk_tokens(s.tokens, window)]
    eval_windows = [w for s in corpus.split("eval")
                    for w in chunk_tokens(s.tokens, window)]
    if not train_windows:
        raise LmError("corpus has no train split")

    rng = stage_rng(seed, "lm/init")
    params = init_lm_params(cfg, rng)
    batch_rng = stage_rng(seed, "lm/batches")
    drop_rng = stage_rng(seed, "lm/dropout") if cfg.dropout > 0 else None
    opt = Adam([params[k] for k in sorted(params)], lr=train_cfg.lr)

    history, eval_history = [], []
    for step in range(1, train_cfg.steps + 1):
        idx = batch_rng.integers(0, len(train_windows), size=train_cfg.batch_size)
        batch = [train_windows[i] for i in idx]
        loss = lm_loss(batch, cfg, params, drop_rng)
        value = loss.item()
        if not math.isfinite(value):
            T.reset_graph()
            raise LmError(f"training loss became non-finite at step {step}")
        T.backward(loss)
        opt.lr = inverse_sqrt_lr(step, train_cfg.lr, train_cfg.warmup_steps)
        opt.step()
        history.append({"step": step, "loss": value, "lr": opt.lr})
        if eval_windows and (step % train_cfg.eval_every == 0
                             or step == train_cfg.steps):
            eval_history.append(
                {"step": step, "loss": eval_lm_loss(eval_windows, cfg, params,
                                                    train_cfg.eval_batches)})

    path = None
    if out_path is not None:
        save_lm(out_path, cfg, params, train_cfg.steps, corpus.source_digest)
        path = str(out_path)
    return LmTrainResult(params, cfg, path, history, eval_history)


def eval_lm_loss(windows: list, cfg: LmConfig, params: dict,
                 max_batches: int = 0, batch_size: int = 8) -> float:
    """Mean NLL per position over the given windows."""
    total, count = 0.0, 0
    batches = [windows[i:i + batch_size] for i in range(0, len(windows), batch_size)]
    if max_batches:
        batches = batches[:max_batches]
    for batch in batches:
        s, c = _nll_sum(batch, cfg, params)
        total += s
        count += c
    if count == 0:
        raise LmError("no eval positions")
    return total / count


# ---------------------------------------------------------------------------
# sampling and continuation

def sample_next(logits: np.ndarray, temperature: float, top_k: int,
                rng: np.random.Generator) -> int:
    """One token from the truncated softmax; BOS is never produced."""
    logits = np.asarray(logits, dtype=np.float64).copy()
    if logits.ndim != 1:
        raise SamplingError(f"logits row must be 1-d, got shape {logits.shape}")
    if temperature < 0:
        raise SamplingError("temperature must be >= 0")
    if not (1 <= top_k <= logits.size):
        raise SamplingError(f"top_k must be in [1, {logits.size}], got {top_k}")
    logits[-1] = -np.inf  # BOS
    if not np.isfinite(logits).any():
        raise SamplingError("no finite logits left after masking")
    if temperature == 0.0 or top_k == 1:
        return int(np.argmax(logits))
    z = logits / temperature
    order = np.argsort(-z, kind="stable")[:top_k]
    zk = z[order]
    zk = zk - zk.max()
    probs = np.exp(zk)
    probs /= probs.sum()
    pick = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    return int(order[min(pick, top_k - 1)])


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_k: int = 64


def continue_audio(prompt: Waveform, horizon_tokens: int, codec: Codec,
                   lm_cfg: LmConfig, lm_params: dict, sampling: SamplingConfig,
                   seed: int, codec_digest: Optional[str] = None):
    """Generate horizon_tokens units after the prompt and decode them.

    Returns (continuation Waveform of exactly horizon_tokens * r_samples
    samples, generated TokenSequence). Deterministic in (seed, sampling).
    """
    if horizon_tokens < 1:
        raise LmError("horizon_tokens must be >= 1")
    if codec_digest is not None and codec.digest() != codec_digest:
        raise LmError(
            f"codec digest mismatch: checkpoint expects {codec_digest[:12]}, "
            f"got {codec.digest()[:12]}")
    prompt_seq = tokenize_waveform(prompt, codec)
    budget = lm_cfg.max_seq_len - horizon_tokens
    if len(prompt_seq) < 1 or len(prompt_seq) > budget:
        raise LmError(
            f"prompt tokenizes to {len(prompt_seq)} units; allowed range is "
            f"[1, {budget}] for horizon {horizon_tokens} and context "
            f"{lm_cfg.max_seq_len}")
    rng = stage_rng(seed, "continue/sampling")
    context = [lm_cfg.bos_id] + prompt_seq.tokens.tolist()
    generated = []
    for _ in range(horizon_tokens):
        logits = lm_forward(np.asarray(context, dtype=np.int64), lm_cfg, lm_params)
        token = sample_next(logits[-1], sampling.temperature, sampling.top_k, rng)
        generated.append(token)
        context.append(token)
    gen = np.asarray(generated, dtype=np.int64)
    r = codec.cfg.r_samples
    seq = TokenSequence(gen, r, len(gen) * r, codec.cfg.codebook_size)
    return decode(seq, codec), seq
