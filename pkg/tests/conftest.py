"""Shared builders for small test models and corpora."""

import numpy as np

from ctxlm.context import ContextRecord, ContextVocab
from ctxlm.corpus import Utterance, Vocab
from ctxlm.models import ContextualLM, ModelConfig
from ctxlm.training import init_params


def tiny_vocab(n_words=8, extra_tokens=()):
    words = [f"w{i}" for i in range(n_words)]
    rec = ContextRecord(2020, 6, 15, 9)
    utts = [Utterance(tuple(words), rec)]
    return Vocab.build(utts, extra_tokens=extra_tokens)


def tiny_model(arch="default", attention="none", repr_="learned", kind="datetime",
               n_words=8, e=6, d=5, f=8, r=2, seed=0, feature_gate=True,
               geo_hashes=(), extra_tokens=()):
    if repr_ == "feature":
        f = 8
    cfg = ModelConfig(vocab_size=3 + n_words + len(extra_tokens), embed_dim=e,
                      hidden_dim=d, context_dim=f, factor_rank=r,
                      architecture=arch, attention=attention, context_repr=repr_,
                      context_kind=kind, feature_gate=feature_gate)
    vocab = tiny_vocab(n_words, extra_tokens=extra_tokens)
    cvocab = ContextVocab(geo_hashes=geo_hashes)
    params = init_params(cfg, seed, geo_vocab_size=cvocab.sizes["geo"])
    return ContextualLM(cfg, params, vocab, cvocab)


def some_records(n, seed=3):
    rng = np.random.default_rng(seed)
    return [ContextRecord(2020, int(rng.integers(1, 13)), int(rng.integers(1, 29)),
                          int(rng.integers(0, 24)), int(rng.integers(0, 60)),
                          geo_hash="9q", dialogue_prompt="initial")
            for _ in range(n)]


def some_token_seqs(n, vocab, seed=4, max_len=6):
    rng = np.random.default_rng(seed)
    words = vocab.id_to_token[3:]
    out = []
    for _ in range(n):
        k = int(rng.integers(1, max_len + 1))
        out.append(tuple(words[int(rng.integers(len(words)))] for _ in range(k)))
    return out
