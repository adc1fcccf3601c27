"""Perplexity reports, relative reductions, confidence intervals, and the
context ablations (shuffled contexts, conditional-probability sweeps,
attention traces)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
from scipy import stats

from .context import shuffle_contexts
from .corpus import partition_head_tail, split

PARTITIONS = ("full", "head", "tail")


@dataclass
class PartitionResult:
    tokens: int
    perplexity: float


@dataclass
class EvalReport:
    """Per-partition perplexities plus optional reductions vs. a baseline."""

    partitions: dict
    corpus_sha256: str | None = None
    model: dict | None = None
    seed: int | None = None
    relative_reduction: dict | None = None

    def to_dict(self):
        d = {
            "partitions": {k: (dataclasses.asdict(v) if v else None)
                           for k, v in self.partitions.items()},
            "corpus_sha256": self.corpus_sha256,
            "model": self.model,
            "seed": self.seed,
            "relative_reduction": self.relative_reduction,
        }
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        parts = {k: (PartitionResult(**v) if v else None)
                 for k, v in d["partitions"].items()}
        return cls(parts, d.get("corpus_sha256"), d.get("model"), d.get("seed"),
                   d.get("relative_reduction"))


def utterance_log_probs(model, utterances, batch_size=64):
    """Per-utterance ln-probability totals and token counts, in corpus order."""
    totals = np.zeros(len(utterances))
    counts = np.zeros(len(utterances), dtype=np.int64)
    for lo in range(0, len(utterances), batch_size):
        chunk = utterances[lo:lo + batch_size]
        logps = model.batch_token_log_probs([u.tokens for u in chunk],
                                            [u.context for u in chunk])
        for j, lp in enumerate(logps):
            totals[lo + j] = float(lp.sum())
            counts[lo + j] = lp.size
    return totals, counts


def perplexity(model, utterances, labels=None, batch_size=64,
               corpus_sha256=None, seed=None):
    """exp(mean NLL) over words + EOS, on full and (if labelled) head/tail.

    Empty partitions are reported as absent (None), never as zero.
    """
    totals, counts = utterance_log_probs(model, utterances, batch_size)

    def part(mask):
        n_tok = int(counts[mask].sum())
        if n_tok == 0:
            return None
        return PartitionResult(n_tok, float(np.exp(-totals[mask].sum() / n_tok)))

    everything = np.ones(len(utterances), dtype=bool)
    parts = {"full": part(everything)}
    if labels is not None:
        parts["head"] = part(np.asarray(labels.head, dtype=bool))
        parts["tail"] = part(np.asarray(labels.tail, dtype=bool))
    return EvalReport(parts, corpus_sha256=corpus_sha256,
                      model=model.config.to_dict(), seed=seed)


def _reduction(base_ppl, model_ppl):
    return 100.0 * (base_ppl - model_ppl) / base_ppl


def relative_reduction(model_report, baseline_report):
    """Signed percent reduction per partition; negative means degradation."""
    if (model_report.corpus_sha256 and baseline_report.corpus_sha256
            and model_report.corpus_sha256 != baseline_report.corpus_sha256):
        raise ValueError("reports were computed on different corpora "
                         f"({model_report.corpus_sha256[:12]} vs "
                         f"{baseline_report.corpus_sha256[:12]})")
    out = {}
    for name in model_report.partitions:
        m = model_report.partitions.get(name)
        b = baseline_report.partitions.get(name)
        out[name] = _reduction(b.perplexity, m.perplexity) if (m and b) else None
    return out


@dataclass
class ConfidenceInterval:
    mean: float
    half_width: float
    level: float
    n_runs: int


def confidence_interval(values, level=0.95):
    """Student-t interval on the mean of independent run results."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        raise ValueError("confidence interval needs at least 2 runs")
    se = values.std(ddof=1) / np.sqrt(n)
    t = stats.t.ppf(0.5 + level / 2.0, n - 1)
    return ConfidenceInterval(float(values.mean()), float(t * se), level, n)


@dataclass
class AblationResult:
    true_report: EvalReport
    shuffled_report: EvalReport
    # percent reduction of the shuffled run relative to the true-context run;
    # negative values mean shuffling degraded perplexity
    delta: dict


def shuffled_ablation(model_config, corpus, split_spec, train_config,
                      shuffle_seed=0, min_count=1):
    """Retrain and evaluate with datetime records permuted across utterances.

    Context-free models short-circuit: shuffling cannot change them, so the
    true-context report is returned for both runs (delta exactly 0).
    """
    from .training import build_model, train  # runtime import; training imports us
    from .corpus import Vocab
    from .context import datetime_token_names

    def run(full_corpus):
        tr, dev, te = split(full_corpus, split_spec)
        extra = _prepend_tokens() if model_config.architecture == "prepend" else ()
        vocab = Vocab.build(tr, min_count=min_count, extra_tokens=extra)
        model = build_model(model_config, train_config.seed, vocab)
        train(model, tr, dev, train_config)
        labels = partition_head_tail(te, full_corpus)
        return perplexity(model, te, labels=labels, seed=train_config.seed)

    true_report = run(corpus)
    if not model_config.uses_context and model_config.architecture != "prepend":
        return AblationResult(true_report, true_report,
                              {k: 0.0 for k in true_report.partitions})
    shuffled_report = run(shuffle_contexts(corpus, shuffle_seed))
    delta = {}
    for name, t_part in true_report.partitions.items():
        s_part = shuffled_report.partitions.get(name)
        delta[name] = _reduction(t_part.perplexity, s_part.perplexity) \
            if (t_part and s_part) else None
    return AblationResult(true_report, shuffled_report, delta)


def _prepend_tokens():
    from .context import ContextVocab
    v = ContextVocab()
    return (*v.month_ids, *v.week_ids, *v.weekday_ids, *v.hour_ids)


SWEEP_FIELDS = ("hour", "month", "weekday", "geo_hash", "dialogue_prompt")


def _with_field(rec, fld, value):
    if fld == "hour":
        return dataclasses.replace(rec, hour=int(value))
    if fld == "month":
        day = min(rec.day_of_month, 28)  # keep the date valid in every month
        return dataclasses.replace(rec, month=int(value), day_of_month=day)
    if fld == "weekday":
        base = date(rec.year, rec.month, rec.day_of_month)
        shifted = base + timedelta(days=(int(value) - rec.weekday))
        return dataclasses.replace(rec, year=shifted.year, month=shifted.month,
                                   day_of_month=shifted.day)
    if fld == "geo_hash":
        return dataclasses.replace(rec, geo_hash=value)
    if fld == "dialogue_prompt":
        return dataclasses.replace(rec, dialogue_prompt=value)
    raise ValueError(f"unknown sweep field {fld!r}; expected one of {SWEEP_FIELDS}")


@dataclass
class SweepResult:
    field: str
    values: list
    probs: list
    baseline_probs: list | None = None

    def rows(self):
        base = self.baseline_probs or [None] * len(self.values)
        return list(zip(self.values, self.probs, base))


def probability_sweep(model, prefix_tokens, target_word, fld, values,
                      base_record, baseline_model=None):
    """P(target | prefix, context with fld=v) for each v, other fields fixed.

    A context-free baseline model, when given, contributes its (constant)
    curve for the dashed-reference-line use case.
    """
    if target_word not in model.vocab.token_to_id:
        raise KeyError(f"target word {target_word!r} not in the model vocabulary")
    target = model.vocab.token_to_id[target_word]
    probs, base = [], []
    for v in values:
        rec = _with_field(base_record, fld, v)
        probs.append(float(model.next_word_distribution(prefix_tokens, rec)[target]))
        if baseline_model is not None:
            b_target = baseline_model.vocab.token_to_id[target_word]
            base.append(float(
                baseline_model.next_word_distribution(prefix_tokens, rec)[b_target]))
    return SweepResult(fld, list(values), probs, base if baseline_model else None)


def attention_trace(model, tokens, record):
    """Alignment weights per consumed token (BOS included); needs attention."""
    _, trace = model.step_distributions(tokens, record, collect_trace=True)
    return trace


def write_trace_csv(trace, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,token,member,weight\n")
        for step, token, member, weight in trace.rows():
            fh.write(f"{step},{token},{member},{weight!r}\n")


def write_sweep_csv(sweep, path):
    with open(path, "w", encoding="utf-8") as fh:
        if sweep.baseline_probs is not None:
            fh.write(f"{sweep.field},probability,baseline_probability\n")
            for v, p, b in sweep.rows():
                fh.write(f"{v},{p!r},{b!r}\n")
        else:
            fh.write(f"{sweep.field},probability\n")
            for v, p, _ in sweep.rows():
                fh.write(f"{v},{p!r}\n")


def format_report_table(report, reduction=None):
    """Aligned text table with the Full | Head | Tail layout."""
    headers = ["partition", "tokens", "perplexity"]
    if reduction:
        headers.append("reduction_vs_baseline")
    rows = []
    for name in PARTITIONS:
        part = report.partitions.get(name)
        row = [name]
        if part is None:
            row += ["-", "absent"]
        else:
            row += [str(part.tokens), f"{part.perplexity:.4f}"]
        if reduction:
            r = reduction.get(name)
            row.append("-" if r is None else f"{r:+.2f}%")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)
