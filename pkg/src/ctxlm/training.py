"""Initialization, Adam, the mini-batch training loop, and checkpoints.

Training is a pure function of (corpus, config, seed): every random draw
flows from one master seed through named sub-streams, so repeated runs are
bitwise identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .context import ContextVocab
from .corpus import Vocab
from .models import ContextualLM, ModelConfig, param_shapes
from .tensor import NonFiniteError, Tape, Tensor

CHECKPOINT_MAGIC = b"CTXLM\x00"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001        # paper value
    batch_size: int = 32                # paper uses 256; desk-scale default
    max_steps: int = 5000               # paper uses 400_000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip_norm: float | None = 5.0
    seed: int = 0
    eval_every: int = 250
    dev_eval_max: int | None = 2000     # cap dev utterances scored per eval

    def __post_init__(self):
        if min(self.learning_rate, self.epsilon) < 0:
            raise ValueError("learning_rate and epsilon must be nonnegative")
        if min(self.batch_size, self.max_steps, self.eval_every) <= 0:
            raise ValueError("batch_size, max_steps and eval_every must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise ValueError("Adam betas must lie in (0, 1)")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive or None")


def derive_seed(master, stream):
    """Stable named sub-seed so split/init/batching draws never collide."""
    return np.random.SeedSequence([int(master), zlib.crc32(stream.encode())])


def init_params(config, seed, geo_vocab_size=1):
    """Draw fresh parameters: He scaling into the recurrent gate blocks,
    Xavier for projections, zero biases with the forget gate block at 1."""
    rng = np.random.default_rng(derive_seed(seed, "init"))
    e, d, f = config.embed_dim, config.hidden_dim, config.context_dim
    params = {}
    for name, shape in param_shapes(config, geo_vocab_size=geo_vocab_size).items():
        if name == "b":
            data = np.zeros(shape)
            data[d:2 * d] = 1.0
        elif name in ("W_x", "W_h", "W_m"):
            fan_in = shape[0]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name == "W_v" or name == "W_a":
            data = rng.normal(0.0, np.sqrt(2.0 / (shape[0] + shape[1])), size=shape)
        elif name.startswith("W_L") or name.startswith("W_R"):
            f_in = config.context_input_dim
            data = rng.normal(0.0, np.sqrt(1.0 / (f_in * config.factor_rank)), size=shape)
        elif name == "embed" or name.startswith("ctx_"):
            data = rng.normal(0.0, np.sqrt(1.0 / shape[1]), size=shape)
        else:
            raise ValueError(f"no initializer for parameter {name!r}")
        params[name] = Tensor(data, requires_grad=True)
    return params


class AdamState:
    """First/second moment buffers mirroring the parameter shapes."""

    def __init__(self, params):
        self.m = {k: np.zeros(p.data.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.data.shape) for k, p in params.items()}
        self.step = 0


def adam_step(params, state, config):
    """One bias-corrected Adam update, with optional global-norm clipping."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.data.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    if config.grad_clip_norm is not None:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > config.grad_clip_norm:
            factor = config.grad_clip_norm / total
            grads = {k: g * factor for k, g in grads.items()}
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        p.data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (step, train_loss, dev_ppl)
    best_step: int = 0
    best_dev_ppl: float = float("inf")
    final_loss: float = float("nan")


def _dev_perplexity(model, dev, cap):
    utts = dev[:cap] if cap else dev
    total, n = 0.0, 0
    for lo in range(0, len(utts), 64):
        chunk = utts[lo:lo + 64]
        for lp in model.batch_token_log_probs([u.tokens for u in chunk],
                                              [u.context for u in chunk]):
            total += float(lp.sum())
            n += lp.size
    return float(np.exp(-total / n))


def train(model, train_utts, dev_utts, config):
    """Run max_steps batch updates; keep and restore the best-dev parameters.

    Batches cycle over seeded epoch shuffles of the training utterances,
    padded within batch with the loss masked on padding. Returns the loss
    curve; the model is left holding the best-dev parameters.
    """
    if not train_utts:
        raise ValueError("empty training set")
    rng = np.random.default_rng(derive_seed(config.seed, "batch"))
    state = AdamState(model.params)
    result = TrainResult()
    best_params = None

    order = []
    pos = 0
    for step in range(1, config.max_steps + 1):
        if pos + config.batch_size > len(order):
            order = rng.permutation(len(train_utts))
            pos = 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        batch = [train_utts[i] for i in idx]

        T.zero_grads(model.params)
        with Tape() as tape:
            loss, _ = model.batch_loss([u.tokens for u in batch],
                                       [u.context for u in batch])
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"loss became {loss_val} at step {step}")
        tape.backward(loss)
        adam_step(model.params, state, config)

        if step % config.eval_every == 0 or step == config.max_steps:
            dev_ppl = _dev_perplexity(model, dev_utts, config.dev_eval_max) \
                if dev_utts else float("nan")
            result.history.append((step, loss_val, dev_ppl))
            if dev_utts and dev_ppl < result.best_dev_ppl:
                result.best_dev_ppl = dev_ppl
                result.best_step = step
                best_params = {k: p.data.copy() for k, p in model.params.items()}
        result.final_loss = loss_val

    if best_params is not None:
        for k, p in model.params.items():
            p.data = best_params[k]
    T.zero_grads(model.params)
    return result


def write_history_csv(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,train_loss,dev_ppl\n")
        for step, loss, ppl in history:
            fh.write(f"{step},{loss!r},{ppl!r}\n")


def build_model(config, seed, vocab, context_vocab=None):
    cvocab = context_vocab or ContextVocab()
    params = init_params(config, seed, geo_vocab_size=cvocab.sizes["geo"])
    return ContextualLM(config, params, vocab, cvocab)


# ---------------------------------------------------------------------------
# checkpoints: MAGIC | u32 version | u64 header length | header JSON | blobs
# Tensor payloads are row-major little-endian float64, in sorted name order.


def save_checkpoint(path, model, meta=None):
    names = sorted(model.params)
    header = {
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "context_vocab": model.context_vocab.to_dict(),
        "tensors": {n: list(model.params[n].data.shape) for n in names},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = len(CHECKPOINT_MAGIC)
    if raw[:pos] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    if len(raw) < pos + 12:
        raise ValueError(f"truncated checkpoint {path}")
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} "
                         f"(expected {CHECKPOINT_VERSION})")
    (hlen,) = struct.unpack_from("<Q", raw, pos + 4)
    start = pos + 12
    if len(raw) < start + hlen:
        raise ValueError(f"truncated checkpoint {path}")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    vocab = Vocab.from_dict(header["vocab"])
    cvocab = ContextVocab.from_dict(header["context_vocab"])

    params = {}
    offset = start + hlen
    for name in sorted(header["tensors"]):
        shape = tuple(header["tensors"][name])
        size = int(np.prod(shape)) * 8
        if len(raw) < offset + size:
            raise ValueError(f"truncated checkpoint {path}")
        data = np.frombuffer(raw[offset:offset + size], dtype="<f8").reshape(shape)
        params[name] = Tensor(data.copy(), requires_grad=True)
        offset += size
    if offset != len(raw):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    model = ContextualLM(config, params, vocab, cvocab)
    return model, header.get("meta", {})
