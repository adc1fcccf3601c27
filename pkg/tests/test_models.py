import math

import numpy as np
import pytest

from conftest import some_records, some_token_seqs, tiny_model
from ctxlm import tensor as T
from ctxlm.context import ContextRecord
from ctxlm.models import (AttentionTrace, ModelConfig, adapted_matrices, attend,
                          attend_prepass, factor_adapt, lstm_step, param_shapes)
from ctxlm.tensor import Tape, Tensor, check_gradients


def _zero_lstm_params(e, d):
    return {"W_x": Tensor(np.zeros((e, 4 * d))), "W_h": Tensor(np.zeros((d, 4 * d))),
            "b": Tensor(np.zeros(4 * d))}


def test_lstm_step_all_zero():
    e, d, B = 3, 4, 2
    params = _zero_lstm_params(e, d)
    h, c = lstm_step(params, Tensor(np.zeros((B, e))),
                     (Tensor(np.zeros((B, d))), Tensor(np.zeros((B, d)))))
    # gates sigmoid(0)=0.5, candidate tanh(0)=0 -> c=0, h=0.5*tanh(0)=0
    assert np.array_equal(c.data, np.zeros((B, d)))
    assert np.array_equal(h.data, np.zeros((B, d)))


def test_lstm_step_zero_context_preact_is_identity():
    rng = np.random.default_rng(0)
    e, d, B = 3, 4, 2
    params = {"W_x": Tensor(rng.normal(size=(e, 4 * d))),
              "W_h": Tensor(rng.normal(size=(d, 4 * d))),
              "b": Tensor(rng.normal(size=4 * d))}
    x = Tensor(rng.normal(size=(B, e)))
    state = (Tensor(rng.normal(size=(B, d))), Tensor(rng.normal(size=(B, d))))
    h0, c0 = lstm_step(params, x, state)
    h1, c1 = lstm_step(params, x, state, context_preact=Tensor(np.zeros((B, 4 * d))))
    assert np.array_equal(h0.data, h1.data)
    assert np.array_equal(c0.data, c1.data)


def test_attend_uniform_when_wa_zero():
    members = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)))
    q = Tensor(np.random.default_rng(2).normal(size=(2, 5)))
    m, alpha = attend({"W_a": Tensor(np.zeros((4, 5)))}, members, q)
    assert np.allclose(alpha.data, 1.0 / 3.0, atol=1e-15)
    assert np.allclose(m.data, members.data.mean(axis=1), atol=1e-15)


def test_attend_single_member_passthrough():
    members = Tensor(np.random.default_rng(3).normal(size=(2, 1, 4)))
    q = Tensor(np.random.default_rng(4).normal(size=(2, 4)))
    wa = Tensor(np.random.default_rng(5).normal(size=(4, 4)))
    m, alpha = attend({"W_a": wa}, members, q)
    assert np.array_equal(alpha.data, np.ones((2, 1)))
    assert np.array_equal(m.data, members.data[:, 0, :])


def test_attend_hand_case():
    # members e1, e2 with identity W_a and q=[ln1, ln3]: scores (0, ln3)
    members = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    q = Tensor(np.array([[math.log(1.0), math.log(3.0)]]))
    m, alpha = attend({"W_a": Tensor(np.eye(2))}, members, q)
    assert np.allclose(alpha.data, [[0.25, 0.75]], atol=1e-15)
    assert np.allclose(m.data, [[0.25, 0.75]], atol=1e-15)


def _factor_params(rng, f, e, d, r):
    return {"W_L_x": Tensor(rng.normal(size=(f, e, r))),
            "W_R_x": Tensor(rng.normal(size=(r, 4 * d, f))),
            "W_L_h": Tensor(rng.normal(size=(f, d, r))),
            "W_R_h": Tensor(rng.normal(size=(r, 4 * d, f)))}


def test_factor_adapt_zero_context_is_identity():
    rng = np.random.default_rng(7)
    f, e, d, r = 4, 3, 2, 2
    fp = _factor_params(rng, f, e, d, r)
    base = {"W_x": Tensor(rng.normal(size=(e, 4 * d))),
            "W_h": Tensor(rng.normal(size=(d, 4 * d)))}
    W_x, W_h = adapted_matrices({**fp, **base}, base, np.zeros(f))
    assert np.array_equal(W_x, base["W_x"].data)
    assert np.array_equal(W_h, base["W_h"].data)


def test_factor_adapt_scalar_hand_case():
    # f=1, e=2, r=1, gate width 2: delta = m^2 * outer([1,3],[5,7])
    fp = {"W_L_x": Tensor(np.array([[[1.0], [3.0]]])),      # (1,2,1)
          "W_R_x": Tensor(np.array([[[5.0], [7.0]]]))}      # (1,2,1)
    m = Tensor(np.array([[2.0]]))
    A = T.contract("bf,fer->ber", m, fp["W_L_x"])
    B = T.contract("bf,rgf->brg", m, fp["W_R_x"])
    delta = A.data[0] @ B.data[0]
    assert np.array_equal(delta, [[20.0, 28.0], [60.0, 84.0]])


def test_factor_delta_rank_bounded():
    rng = np.random.default_rng(8)
    f, e, d, r = 6, 8, 7, 2
    fp = _factor_params(rng, f, e, d, r)
    base = {"W_x": Tensor(rng.normal(size=(e, 4 * d))),
            "W_h": Tensor(rng.normal(size=(d, 4 * d)))}
    for _ in range(10):
        m = rng.normal(size=f)
        W_x, W_h = adapted_matrices({**fp, **base}, base, m)
        for delta in (W_x - base["W_x"].data, W_h - base["W_h"].data):
            s = np.linalg.svd(delta, compute_uv=False)
            assert np.all(s[r:] <= 1e-10 * max(s[0], 1.0))


def _clone_shared(model_a, model_b, zero_names=()):
    """Copy every shared parameter of model_a into model_b; zero the rest."""
    for name, p in model_b.params.items():
        if name in model_a.params:
            p.data = model_a.params[name].data.copy()
        elif name in zero_names:
            p.data = np.zeros(p.data.shape)
    return model_b


def _stack_forward(model, seqs, records):
    inputs, _, _ = model.encode_batch(seqs, records)
    probs, _ = model.forward(inputs, records)
    return np.stack([p.data for p in probs], axis=1)


def test_concat_with_zero_wm_equals_default():
    default = tiny_model("default")
    concat = _clone_shared(default, tiny_model("concat"), zero_names=("W_m",))
    seqs = some_token_seqs(6, default.vocab)
    recs = some_records(6)
    assert np.array_equal(_stack_forward(default, seqs, recs),
                          _stack_forward(concat, seqs, recs))


def test_factor_with_zero_basis_equals_default():
    default = tiny_model("default")
    factor = _clone_shared(default, tiny_model("factor"),
                           zero_names=("W_L_x", "W_R_x", "W_L_h", "W_R_h"))
    seqs = some_token_seqs(6, default.vocab)
    recs = some_records(6)
    assert np.array_equal(_stack_forward(default, seqs, recs),
                          _stack_forward(factor, seqs, recs))


@pytest.mark.parametrize("kind,repr_", [("datetime", "feature"), ("geo", "learned"),
                                        ("prompt", "learned")])
def test_attention_single_member_equals_no_attention(kind, repr_):
    f = 8 if repr_ == "feature" else 4
    plain = tiny_model("concat", "none", repr_, kind, f=f, geo_hashes=("9q",))
    attn = tiny_model("concat", "word_query", repr_, kind, f=f,
                      feature_gate=False, geo_hashes=("9q",))
    _clone_shared(plain, attn)
    assert len(attn.config.member_labels) == 1
    seqs = some_token_seqs(5, plain.vocab)
    recs = some_records(5)
    assert np.array_equal(_stack_forward(plain, seqs, recs),
                          _stack_forward(attn, seqs, recs))


def test_prepend_forward_is_default_forward_without_prefix():
    prepend = tiny_model("prepend")
    default = tiny_model("default")
    _clone_shared(prepend, default)
    recs = some_records(4)
    seqs = some_token_seqs(4, default.vocab)
    inputs, _, _ = default.encode_batch(seqs, recs)  # no context prefix
    p1, _ = prepend.forward(inputs, recs)
    p2, _ = default.forward(inputs, recs)
    assert np.array_equal(np.stack([p.data for p in p1]),
                          np.stack([p.data for p in p2]))


def test_prepend_mask_excludes_context_positions():
    prepend = tiny_model("prepend", extra_tokens=_all_datetime_tokens())
    default = tiny_model("default")
    seqs = some_token_seqs(3, default.vocab)
    recs = some_records(3)
    _, _, mask_p = prepend.encode_batch(seqs, recs)
    _, _, mask_d = default.encode_batch(seqs, recs)
    assert mask_p.sum() == mask_d.sum()  # same scored token count
    assert np.all(mask_p[:, :4] == 0.0)


def _all_datetime_tokens():
    from ctxlm.context import ContextVocab
    v = ContextVocab()
    return (*v.month_ids, *v.week_ids, *v.weekday_ids, *v.hour_ids)


def test_prepend_vocab_lookup_failure():
    prepend = tiny_model("prepend")  # vocab lacks datetime tokens
    with pytest.raises(KeyError, match="prepend vocabulary"):
        prepend.encode_batch([("w0",)], [ContextRecord(2020, 12, 23, 7)])


def test_word_query_prepass_matches_sequential_bitwise():
    model = tiny_model("concat", "word_query", "learned")
    recs = some_records(3)
    seqs = some_token_seqs(3, model.vocab, max_len=5)
    inputs, _, _ = model.encode_batch(seqs, recs)
    _, alphas = model.forward(inputs, recs, collect_alphas=True)

    # sequential recomputation, one step at a time
    members = model._stack_members(model._context_members(recs))
    x_all = model.params["embed"].data[inputs]
    for t, alpha_t in enumerate(alphas):
        _, alpha_seq = attend({"W_a": model.params["W_a"]},
                              members, Tensor(x_all[:, t, :]))
        assert np.array_equal(alpha_t.data, alpha_seq.data)


def test_trace_shape_and_simplex():
    model = tiny_model("concat", "hidden_query", "learned")
    rec = some_records(1)[0]
    tokens = ("w1", "w2", "w3")
    dists, trace = model.step_distributions(tokens, rec, collect_trace=True)
    assert len(dists) == len(tokens) + 1
    assert len(trace.weights) == len(tokens) + 1
    assert trace.input_tokens[0] == "<bos>"
    assert trace.labels == ["month", "week", "weekday", "hour"]
    for alpha in trace.weights:
        assert abs(alpha.sum() - 1.0) <= 1e-9
        assert np.all(alpha >= 0)
    # hidden query at t=1 sees h_0 = 0: scores are zero, weights uniform
    assert np.allclose(trace.weights[0], 0.25, atol=1e-15)


def test_trace_requires_attention():
    model = tiny_model("concat", "none", "learned")
    with pytest.raises(ValueError, match="attention"):
        model.step_distributions(("w0",), some_records(1)[0], collect_trace=True)


def test_trace_single_member_all_ones():
    model = tiny_model("concat", "word_query", "feature", feature_gate=False)
    _, trace = model.step_distributions(("w0", "w1"), some_records(1)[0],
                                        collect_trace=True)
    for alpha in trace.weights:
        assert np.array_equal(alpha, [1.0])


def test_score_empty_tokens_single_term():
    model = tiny_model("default")
    total, per_token = model.score((), some_records(1)[0])
    assert per_token.shape == (1,)  # only EOS is predicted
    assert total == pytest.approx(float(per_token[0]))


def test_score_sums_match_total():
    model = tiny_model("concat", "word_query")
    total, per_token = model.score(("w0", "w3", "w5"), some_records(1)[0])
    assert total == pytest.approx(float(per_token.sum()), abs=1e-10)
    assert per_token.shape == (4,)


def test_uniform_scores_with_zero_projection():
    model = tiny_model("default", n_words=13)
    model.params["W_v"].data[:] = 0.0
    total, per_token = model.score(("w0", "w1"), some_records(1)[0])
    v = len(model.vocab)
    assert np.allclose(per_token, -math.log(v), atol=1e-12)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, architecture="default", attention="word_query")
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, architecture="prepend", attention="hidden_query")
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, context_dim=10, context_repr="learned",
                    architecture="concat")
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, context_repr="feature", context_dim=12,
                    architecture="concat")
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, context_kind="geo", context_repr="feature",
                    architecture="concat")
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0)
    cfg = ModelConfig(vocab_size=10, architecture="concat", attention="word_query",
                      context_repr="feature", context_dim=8)
    assert cfg.gated and cfg.member_labels == ["feature", "gate"]
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_param_shapes_match_paper_dimensions():
    cfg = ModelConfig(vocab_size=100, embed_dim=16, hidden_dim=12, context_dim=8,
                      factor_rank=3, architecture="factor", attention="hidden_query",
                      context_repr="feature")
    shapes = param_shapes(cfg)
    assert shapes["W_x"] == (16, 48)
    assert shapes["W_h"] == (12, 48)
    assert shapes["W_L_x"] == (8, 16, 3)
    assert shapes["W_R_x"] == (3, 48, 8)
    assert shapes["W_L_h"] == (8, 12, 3)
    assert shapes["W_R_h"] == (3, 48, 8)
    assert shapes["W_a"] == (8, 12)  # hidden query scores against d


def _loss_fn(model, seqs, recs):
    def f():
        loss, _ = model.batch_loss(seqs, recs)
        return loss
    return f


def test_gradient_check_concat_word_attention():
    model = tiny_model("concat", "word_query", "learned", e=4, d=3, f=4, n_words=5)
    seqs = some_token_seqs(2, model.vocab, max_len=3)
    recs = some_records(2)
    report = check_gradients(_loss_fn(model, seqs, recs), model.params,
                             eps=1e-5, tol=1e-4)
    assert report.passed, report


def test_gradient_check_factor_hidden_attention_feature():
    model = tiny_model("factor", "hidden_query", "feature", e=4, d=3, r=2, n_words=5)
    seqs = some_token_seqs(2, model.vocab, max_len=3)
    recs = some_records(2)
    report = check_gradients(_loss_fn(model, seqs, recs), model.params,
                             eps=1e-5, tol=1e-4)
    assert report.passed, report
