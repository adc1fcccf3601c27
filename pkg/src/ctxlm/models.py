"""The model zoo: default LSTM LM, prepend baseline, and the concatenation-
and factorization-adapted contextual models, optionally with attention over
the context set.

Conventions: row vectors. A batch is (B, T) integer ids; the step t input is
the embedding of inputs[:, t]; gate order in the stacked 4d pre-activation is
input, forget, cell, output. h_0 = c_0 = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from .context import (FEATURE_DIM, ContextVocab, datetime_features,
                      datetime_token_names, datetime_tokens)
from .tensor import Tensor

ARCHITECTURES = ("default", "prepend", "concat", "factor")
ATTENTION_MODES = ("none", "word_query", "hidden_query")
CONTEXT_REPRS = ("learned", "feature")
CONTEXT_KINDS = ("datetime", "geo", "prompt")

DATETIME_FIELDS = ("month", "week", "weekday", "hour")


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 64
    context_dim: int = 32
    factor_rank: int = 5
    architecture: str = "default"
    attention: str = "none"
    context_repr: str = "learned"
    context_kind: str = "datetime"
    feature_gate: bool = True  # zero-vector member for feature repr under attention

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim,
               self.context_dim, self.factor_rank) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.context_repr not in CONTEXT_REPRS:
            raise ValueError(f"unknown context representation {self.context_repr!r}")
        if self.context_kind not in CONTEXT_KINDS:
            raise ValueError(f"unknown context kind {self.context_kind!r}")
        if self.attention != "none" and self.architecture not in ("concat", "factor"):
            raise ValueError("attention requires the concat or factor architecture")
        if self.context_kind == "datetime" and self.context_repr == "learned" \
                and self.context_dim % 4 != 0:
            raise ValueError("learned datetime context needs context_dim divisible by 4")
        if self.context_repr == "feature":
            if self.context_kind != "datetime":
                raise ValueError("feature representation exists only for datetime context")
            if self.context_dim != FEATURE_DIM:
                raise ValueError(f"feature representation fixes context_dim at {FEATURE_DIM}")
        if self.context_kind in ("geo", "prompt") and self.context_repr != "learned":
            raise ValueError(f"{self.context_kind} context uses learned embeddings")
        if self.architecture == "prepend" and self.context_kind != "datetime":
            raise ValueError("the prepend baseline prepends datetime tokens")

    @property
    def uses_context(self):
        return self.architecture in ("concat", "factor")

    @property
    def member_dim(self):
        """Size of one context-set member (f_i)."""
        if self.context_kind != "datetime":
            return self.context_dim
        if self.context_repr == "feature":
            return FEATURE_DIM
        return self.context_dim // 4

    @property
    def context_input_dim(self):
        """Width of the context vector entering W_m or the basis tensors.

        With attention the model consumes the attention-mixed member m'_t
        (one member wide); without it, learned datetime members are
        concatenated to the full context_dim.
        """
        if self.attention != "none":
            return self.member_dim
        if self.context_kind == "datetime" and self.context_repr == "learned":
            return self.context_dim
        return self.member_dim

    @property
    def gated(self):
        return (self.uses_context and self.attention != "none"
                and self.context_repr == "feature" and self.feature_gate)

    @property
    def member_labels(self):
        if self.context_kind == "geo":
            return ["geo"]
        if self.context_kind == "prompt":
            return ["prompt"]
        if self.context_repr == "learned":
            return list(DATETIME_FIELDS)
        return ["feature", "gate"] if self.gated else ["feature"]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(config, geo_vocab_size=1):
    """Expected shape of every parameter tensor for a config."""
    e, d, f, r = (config.embed_dim, config.hidden_dim,
                  config.context_dim, config.factor_rank)
    shapes = {
        "embed": (config.vocab_size, e),
        "W_x": (e, 4 * d),
        "W_h": (d, 4 * d),
        "b": (4 * d,),
        "W_v": (d, config.vocab_size),
    }
    f_in = config.context_input_dim
    if config.architecture == "concat":
        shapes["W_m"] = (f_in, 4 * d)
    if config.architecture == "factor":
        shapes.update({
            "W_L_x": (f_in, e, r), "W_R_x": (r, 4 * d, f_in),
            "W_L_h": (f_in, d, r), "W_R_h": (r, 4 * d, f_in),
        })
    if config.attention != "none":
        q_dim = e if config.attention == "word_query" else d
        shapes["W_a"] = (config.member_dim, q_dim)
    if config.uses_context and config.context_kind == "datetime" \
            and config.context_repr == "learned":
        fi = config.member_dim
        shapes.update({"ctx_month": (12, fi), "ctx_week": (53, fi),
                       "ctx_weekday": (7, fi), "ctx_hour": (24, fi)})
    if config.uses_context and config.context_kind == "geo":
        shapes["ctx_geo"] = (geo_vocab_size, f)
    if config.uses_context and config.context_kind == "prompt":
        shapes["ctx_prompt"] = (2, f)
    return shapes


@dataclass
class AttentionTrace:
    """Per-timestep alignment weights over the labeled context members."""

    labels: list
    input_tokens: list = field(default_factory=list)
    weights: list = field(default_factory=list)  # one (|M|,) array per step

    def append(self, token, alpha):
        self.input_tokens.append(token)
        self.weights.append(np.asarray(alpha))

    def rows(self):
        """(step, token, member, weight) rows ready for CSV export."""
        out = []
        for step, (tok, alpha) in enumerate(zip(self.input_tokens, self.weights)):
            for label, w in zip(self.labels, alpha):
                out.append((step, tok, label, float(w)))
        return out


def lstm_step(params, x_t, state, context_preact=None):
    """One LSTM cell update; context_preact (B,4d) is added to all gates."""
    h_prev, c_prev = state
    d = h_prev.shape[1]
    z = T.add(T.matmul(x_t, params["W_x"]), T.matmul(h_prev, params["W_h"]))
    if context_preact is not None:
        z = T.add(z, context_preact)
    z = T.add(z, params["b"])
    i = T.sigmoid(T.slice_cols(z, 0, d))
    f = T.sigmoid(T.slice_cols(z, d, 2 * d))
    g = T.tanh(T.slice_cols(z, 2 * d, 3 * d))
    o = T.sigmoid(T.slice_cols(z, 3 * d, 4 * d))
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    return h, c


def factor_adapt(factor_params, base_params, m):
    """Contract the basis tensors with m, giving the adapted-weight factors.

    Returns (A_x, B_x, A_h, B_h) with W'_x = W_x + A_x B_x (per batch row)
    and likewise for W'_h; the additive delta has rank <= r.
    """
    A_x = T.contract("bf,fer->ber", m, factor_params["W_L_x"])
    B_x = T.contract("bf,rgf->brg", m, factor_params["W_R_x"])
    A_h = T.contract("bf,fdr->bdr", m, factor_params["W_L_h"])
    B_h = T.contract("bf,rgf->brg", m, factor_params["W_R_h"])
    return A_x, B_x, A_h, B_h


def adapted_matrices(factor_params, base_params, m_vec):
    """Materialized (W'_x, W'_h) for a single context vector (numpy, no tape)."""
    m = Tensor(np.asarray(m_vec)[None, :])
    A_x, B_x, A_h, B_h = factor_adapt(factor_params, base_params, m)
    W_x = base_params["W_x"].data + A_x.data[0] @ B_x.data[0]
    W_h = base_params["W_h"].data + A_h.data[0] @ B_h.data[0]
    return W_x, W_h


def attend(attention_params, members, q_t):
    """Bilinear attention for one step: members (B,K,f), query (B,q)."""
    u = T.contract("bq,fq->bf", q_t, attention_params["W_a"])
    scores = T.contract("bkf,bf->bk", members, u)
    alpha = T.softmax(scores, axis=-1)
    m_prime = T.contract("bk,bkf->bf", alpha, members)
    return m_prime, alpha


def attend_prepass(attention_params, members, queries):
    """Word-query attention for all steps at once: queries (B,T,e).

    Runs before the recurrence; must match the step-by-step computation
    bitwise (softmaxed bilinear scores are elementwise identical).
    """
    u = T.contract("btq,fq->btf", queries, attention_params["W_a"])
    scores = T.contract("btf,bkf->btk", u, members)
    alpha = T.softmax(scores, axis=-1)
    m_all = T.contract("btk,bkf->btf", alpha, members)
    return m_all, alpha


class ContextualLM:
    """A trained or in-training language model over one context kind."""

    def __init__(self, config, params, vocab, context_vocab=None):
        self.config = config
        self.params = params
        self.vocab = vocab
        self.context_vocab = context_vocab or ContextVocab()
        expected = param_shapes(config, geo_vocab_size=self.context_vocab.sizes["geo"])
        for name, shape in expected.items():
            got = params[name].data.shape
            if tuple(got) != tuple(shape):
                raise T.ShapeError(f"parameter {name}: expected {shape}, got {got}")

    # ------------------------------------------------------------------
    # batch assembly

    def encode_batch(self, token_seqs, records):
        """Pack utterances into (inputs, targets, mask) id arrays.

        inputs start with BOS (plus the four datetime tokens for the prepend
        architecture); targets end with EOS; mask is 1.0 exactly on word and
        EOS prediction positions, 0.0 on context-prefix and padding.
        """
        v = self.vocab
        prefix_len = 0
        prefixes = [()] * len(token_seqs)
        if self.config.architecture == "prepend":
            prefix_len = 4
            prefixes = []
            for rec in records:
                names = datetime_token_names(rec)
                try:
                    prefixes.append(tuple(v.token_to_id[n] for n in names))
                except KeyError as e:
                    raise KeyError(f"context token {e} missing from the prepend vocabulary")
        seqs = [v.encode(toks) for toks in token_seqs]
        T_max = max(len(s) for s in seqs) + 1 + prefix_len
        B = len(seqs)
        inputs = np.full((B, T_max), v.eos_id, dtype=np.int64)
        targets = np.zeros((B, T_max), dtype=np.int64)
        mask = np.zeros((B, T_max))
        for b, (s, pre) in enumerate(zip(seqs, prefixes)):
            row = [v.bos_id, *pre, *s]
            tgt = [*pre, *s, v.eos_id]
            inputs[b, :len(row)] = row
            targets[b, :len(tgt)] = tgt
            mask[b, prefix_len:len(tgt)] = 1.0
        return inputs, targets, mask

    # ------------------------------------------------------------------
    # context handling

    def _context_members(self, records):
        """Member tensors (each (B,f_i)) for the batch, under the active tape."""
        cfg = self.config
        p = self.params
        if cfg.context_kind == "geo":
            ids = np.array([self.context_vocab.geo_id(r.geo_hash) for r in records])
            return [T.embedding(p["ctx_geo"], ids)]
        if cfg.context_kind == "prompt":
            ids = np.array([self.context_vocab.prompt_id(r.dialogue_prompt)
                            for r in records])
            return [T.embedding(p["ctx_prompt"], ids)]
        if cfg.context_repr == "learned":
            ids = np.array([datetime_tokens(r, self.context_vocab) for r in records])
            tables = ("ctx_month", "ctx_week", "ctx_weekday", "ctx_hour")
            return [T.embedding(p[tab], ids[:, i]) for i, tab in enumerate(tables)]
        feats = Tensor(np.stack([datetime_features(r) for r in records]))
        members = [feats]
        if cfg.gated:
            members.append(Tensor(np.zeros(feats.data.shape)))
        return members

    @staticmethod
    def _stack_members(members):
        B, fi = members[0].data.shape
        return T.reshape(T.concat(members, axis=1), (B, len(members), fi))

    # ------------------------------------------------------------------
    # forward

    def forward(self, inputs, records, collect_alphas=False):
        """Per-step next-token distributions, each (B, |V|).

        Returns (probs list, alphas list or None). Runs under the active
        tape if one is open, else in inference mode.
        """
        cfg = self.config
        p = self.params
        B, T_max = inputs.shape
        d = cfg.hidden_dim

        x_all = T.embedding(p["embed"], inputs)  # (B,T,e)

        members = m_static = m_all = alpha_all = None
        if cfg.uses_context:
            member_list = self._context_members(records)
            if cfg.attention == "none":
                m_static = (T.concat(member_list, axis=1) if len(member_list) > 1
                            else member_list[0])
            else:
                members = self._stack_members(member_list)
                if cfg.attention == "word_query":
                    m_all, alpha_all = attend_prepass({"W_a": p["W_a"]}, members, x_all)

        if cfg.architecture == "factor" and cfg.attention == "none":
            factors = factor_adapt(p, p, m_static)

        h = Tensor(np.zeros((B, d)))
        c = Tensor(np.zeros((B, d)))
        probs, alphas = [], []
        for t in range(T_max):
            x_t = T.take_step(x_all, t)
            m_t = alpha_t = None
            if cfg.uses_context:
                if cfg.attention == "none":
                    m_t = m_static
                elif cfg.attention == "word_query":
                    m_t = T.take_step(m_all, t)
                    alpha_t = T.take_step(alpha_all, t)
                else:
                    m_t, alpha_t = attend({"W_a": p["W_a"]}, members, h)

            preact = None
            if cfg.architecture == "concat":
                preact = T.matmul(m_t, p["W_m"])
            elif cfg.architecture == "factor":
                if cfg.attention != "none":
                    factors = factor_adapt(p, p, m_t)
                A_x, B_x, A_h, B_h = factors
                dx = T.contract("br,brg->bg", T.contract("be,ber->br", x_t, A_x), B_x)
                dh = T.contract("br,brg->bg", T.contract("bd,bdr->br", h, A_h), B_h)
                z = T.add(T.add(T.add(T.matmul(x_t, p["W_x"]), dx),
                                T.add(T.matmul(h, p["W_h"]), dh)), p["b"])
                h, c = self._cell(z, c)
                probs.append(T.softmax(T.matmul(h, p["W_v"]), axis=-1))
                if alpha_t is not None:
                    alphas.append(alpha_t)
                continue

            h, c = lstm_step(p, x_t, (h, c), context_preact=preact)
            probs.append(T.softmax(T.matmul(h, p["W_v"]), axis=-1))
            if alpha_t is not None:
                alphas.append(alpha_t)

        return probs, (alphas if collect_alphas and alphas else None)

    def _cell(self, z, c_prev):
        d = self.config.hidden_dim
        i = T.sigmoid(T.slice_cols(z, 0, d))
        f = T.sigmoid(T.slice_cols(z, d, 2 * d))
        g = T.tanh(T.slice_cols(z, 2 * d, 3 * d))
        o = T.sigmoid(T.slice_cols(z, 3 * d, 4 * d))
        c = T.add(T.mul(f, c_prev), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        return h, c

    # ------------------------------------------------------------------
    # losses and scoring

    def batch_loss(self, token_seqs, records):
        """Mean masked cross entropy over the batch; call under a Tape."""
        inputs, targets, mask = self.encode_batch(token_seqs, records)
        probs, _ = self.forward(inputs, records)
        total = None
        for t, p_t in enumerate(probs):
            ce = T.cross_entropy_rows(p_t, targets[:, t])
            masked = T.mul(ce, Tensor(mask[:, t]))
            s = T.sum_all(masked)
            total = s if total is None else T.add(total, s)
        n_tokens = float(mask.sum())
        return T.scale(total, 1.0 / n_tokens), n_tokens

    def batch_token_log_probs(self, token_seqs, records):
        """Per-utterance arrays of ln P(token) in prediction order (no grad)."""
        inputs, targets, mask = self.encode_batch(token_seqs, records)
        probs, _ = self.forward(inputs, records)
        stacked = np.stack([p.data for p in probs], axis=1)  # (B,T,V)
        B, T_max = targets.shape
        picked = np.log(stacked[np.arange(B)[:, None], np.arange(T_max)[None, :], targets])
        return [picked[b][mask[b] == 1.0] for b in range(B)]

    def score(self, tokens, record):
        """Total and per-token ln-probability of one utterance (words + EOS)."""
        logps = self.batch_token_log_probs([tuple(tokens)], [record])[0]
        return float(logps.sum()), logps

    def step_distributions(self, tokens, record, collect_trace=False):
        """Per-step distributions for one utterance, optionally with the
        attention trace (input token consumed at each step, alphas)."""
        inputs, _, _ = self.encode_batch([tuple(tokens)], [record])
        probs, alphas = self.forward(inputs, [record], collect_alphas=collect_trace)
        dists = [p.data[0] for p in probs]
        trace = None
        if collect_trace:
            if alphas is None:
                raise ValueError("model has no attention mechanism to trace")
            trace = AttentionTrace(self.config.member_labels)
            for t, a in enumerate(alphas):
                trace.append(self.vocab.id_to_token[inputs[0, t]], a.data[0])
        return dists, trace

    def next_word_distribution(self, prefix_tokens, record):
        """Distribution over the next word after consuming BOS + prefix."""
        inputs, _, _ = self.encode_batch([tuple(prefix_tokens)], [record])
        probs, _ = self.forward(inputs, [record])
        return probs[-1].data[0]
