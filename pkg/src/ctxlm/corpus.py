"""Corpus ingestion, vocabulary, splits, head/tail labels, synthetic generation.

Corpus files are UTF-8 with one utterance per line:

    YYYY-MM-DD HH:MM<TAB>text[<TAB>geo=XX][<TAB>prompt=initial|follow_up]

The synthetic generator stands in for non-releasable voice-assistant data.
It samples a context record, picks an utterance category from a context-
weighted mixture, then realizes a text template whose slots may also depend
on the context. All planted context-word correlations are exactly computable
from the config tables, which the tests use as the oracle.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .context import ContextRecord, parse_context, WEEKDAY_NAMES

log = logging.getLogger(__name__)

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"


@dataclass(frozen=True)
class Utterance:
    """Lowercased word tokens plus the context the utterance was spoken in."""

    tokens: tuple
    context: ContextRecord

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("utterance text must be nonempty")

    @property
    def text(self):
        return " ".join(self.tokens)


class LoadedCorpus(list):
    """List of utterances; counts lines skipped for empty text."""

    skipped_empty = 0


def _format_line(utt):
    parts = [utt.context.timestamp(), utt.text]
    if utt.context.geo_hash is not None:
        parts.append(f"geo={utt.context.geo_hash}")
    if utt.context.dialogue_prompt is not None:
        parts.append(f"prompt={utt.context.dialogue_prompt}")
    return "\t".join(parts)


def save_corpus(corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for utt in corpus:
            fh.write(_format_line(utt) + "\n")


def load_corpus(path):
    """Parse a corpus file; malformed lines raise with their line number."""
    out = LoadedCorpus()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 2:
                raise ValueError(f"{path}:{lineno}: expected TAB-separated timestamp and text")
            geo = prompt = None
            for extra in fields[2:]:
                if extra.startswith("geo="):
                    geo = extra[4:]
                elif extra.startswith("prompt="):
                    prompt = extra[7:]
                else:
                    raise ValueError(f"{path}:{lineno}: unknown field {extra!r}")
            try:
                rec = parse_context(fields[0], geo_hash=geo, dialogue_prompt=prompt)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
            tokens = tuple(fields[1].lower().split())
            if not tokens:
                out.skipped_empty += 1
                log.warning("%s:%d: empty text, skipped", path, lineno)
                continue
            out.append(Utterance(tokens, rec))
    return out


def corpus_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Vocab:
    """Dense token<->id maps with reserved <bos>=0, <eos>=1, <unk>=2."""

    def __init__(self, tokens=(), counts=None):
        self.id_to_token = [BOS, EOS, UNK] + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.counts = dict(counts or {})

    @classmethod
    def build(cls, train_corpus, min_count=1, extra_tokens=()):
        """Keep training tokens with count >= min_count, rank by frequency.

        extra_tokens (e.g. datetime tokens for the prepend baseline) are
        appended after the corpus-derived part of the table.
        """
        counts = Counter(tok for utt in train_corpus for tok in utt.tokens)
        kept = sorted((t for t, c in counts.items() if c >= min_count),
                      key=lambda t: (-counts[t], t))
        for t in extra_tokens:
            if t not in counts or counts[t] < min_count:
                kept.append(t)
        return cls(kept, counts={t: counts.get(t, 0) for t in kept})

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens):
        unk = self.token_to_id[UNK]
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    @property
    def bos_id(self):
        return 0

    @property
    def eos_id(self):
        return 1

    @property
    def unk_id(self):
        return 2

    def to_dict(self):
        return {"tokens": self.id_to_token[3:],
                "counts": {t: self.counts.get(t, 0) for t in self.id_to_token[3:]}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["tokens"], counts=d.get("counts"))


@dataclass(frozen=True)
class SplitSpec:
    train: int = 90
    dev: int = 5
    test: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.train + self.dev + self.test != 100:
            raise ValueError("split ratios must sum to 100")
        if min(self.train, self.dev, self.test) <= 0:
            raise ValueError("split ratios must be positive")


def split(corpus, spec):
    """Seeded uniform partition into (train, dev, test) with exact ratio sizes."""
    n = len(corpus)
    if n < 3:
        raise ValueError(f"corpus of {n} utterances is too small to split")
    n_dev = n * spec.dev // 100
    n_test = n * spec.test // 100
    perm = np.random.default_rng(spec.seed).permutation(n)
    dev_idx = set(perm[:n_dev].tolist())
    test_idx = set(perm[n_dev:n_dev + n_test].tolist())
    train, dev, test = [], [], []
    for i, utt in enumerate(corpus):
        (dev if i in dev_idx else test if i in test_idx else train).append(utt)
    return train, dev, test


@dataclass
class PartitionLabels:
    """Head/tail membership for each utterance of an evaluated split.

    head: the utterance text ranks in the top 5% of unique texts by
    full-corpus frequency (ties broken lexicographically). tail: the text
    occurs exactly once in the full corpus. The two can only overlap on
    degenerate corpora where a top-5% text has frequency 1.
    """

    head: list
    tail: list

    def label(self, i):
        if self.head[i]:
            return "head"
        if self.tail[i]:
            return "tail"
        return "middle"


def partition_head_tail(utterances, frequency_source):
    """Label a split's utterances using frequencies over the full corpus."""
    counts = Counter(u.text for u in frequency_source)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    n_head = math.ceil(0.05 * len(ranked))
    head_texts = set(ranked[:n_head])
    head = [u.text in head_texts for u in utterances]
    tail = [counts[u.text] == 1 for u in utterances]
    return PartitionLabels(head, tail)


# ---------------------------------------------------------------------------
# synthetic generator


def _profile_value(profile, key):
    if not profile:
        return 1.0
    return float(profile.get(str(key), profile.get("default", 1.0)))


def _category_weight(cat, hour, month, weekday):
    return (float(cat["weight"])
            * _profile_value(cat.get("hour_profile"), hour)
            * _profile_value(cat.get("month_profile"), month)
            * _profile_value(cat.get("weekday_profile"), weekday))


def category_probability(config, name, hour, month=6, weekday=2):
    """Exact P(category | context) implied by the config tables."""
    weights = {c["name"]: _category_weight(c, hour, month, weekday)
               for c in config["categories"]}
    return weights[name] / sum(weights.values())


def validate_config(config):
    if not config.get("categories"):
        raise ValueError("generator config has no categories")
    names = set()
    for cat in config["categories"]:
        if cat["name"] in names:
            raise ValueError(f"duplicate category {cat['name']!r}")
        names.add(cat["name"])
        if cat["weight"] <= 0:
            raise ValueError(f"category {cat['name']!r} has non-positive weight")
        total = sum(p for _, p in cat["lines"])
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"line probabilities of {cat['name']!r} sum to {total}, not 1")
        for text, _ in cat["lines"]:
            for slot in _slots_in(text):
                if slot not in config.get("slots", {}):
                    raise ValueError(f"line {text!r} references unknown slot <{slot}>")
    for slot, spec in config.get("slots", {}).items():
        kind = spec["kind"]
        if kind in ("uniform", "zipf") and not spec.get("words"):
            raise ValueError(f"slot <{slot}> has no words")
        if kind == "weekday" and not 0.0 <= spec["match_prob"] <= 1.0:
            raise ValueError(f"slot <{slot}> match_prob out of range")
        if kind == "hour_pools":
            for pool in spec["pools"]:
                if pool not in spec["hour_weights"]:
                    raise ValueError(f"slot <{slot}> pool {pool!r} missing hour weights")
        if kind not in ("uniform", "zipf", "weekday", "hour_pools"):
            raise ValueError(f"slot <{slot}> has unknown kind {kind!r}")


def _slots_in(text):
    return [w[1:-1] for w in text.split() if w.startswith("<") and w.endswith(">")]


def _zipf_probs(n, exponent):
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


class _Sampler:
    """Precomputed cumulative tables for fast, deterministic sampling."""

    def __init__(self, config, rng):
        self.config = config
        self.rng = rng
        self.cat_names = [c["name"] for c in config["categories"]]
        self.cats = {c["name"]: c for c in config["categories"]}
        self.line_cum = {c["name"]: np.cumsum([p for _, p in c["lines"]])
                         for c in config["categories"]}
        self.cat_cum_cache = {}
        self.slot_tables = {}
        for slot, spec in config.get("slots", {}).items():
            if spec["kind"] == "uniform":
                n = len(spec["words"])
                self.slot_tables[slot] = np.cumsum(np.full(n, 1.0 / n))
            elif spec["kind"] == "zipf":
                probs = _zipf_probs(len(spec["words"]), spec.get("exponent", 1.0))
                self.slot_tables[slot] = np.cumsum(probs)
            elif spec["kind"] == "hour_pools":
                per_pool = {}
                for pool, words in spec["pools"].items():
                    probs = _zipf_probs(len(words), spec.get("exponent", 1.0))
                    per_pool[pool] = np.cumsum(probs)
                self.slot_tables[slot] = per_pool

    def pick(self, cum, items):
        return items[int(np.searchsorted(cum, self.rng.random() * cum[-1]))]

    def category(self, rec):
        key = (rec.hour, rec.month, rec.weekday)
        cum = self.cat_cum_cache.get(key)
        if cum is None:
            weights = [_category_weight(self.cats[n], *key) for n in self.cat_names]
            cum = np.cumsum(weights)
            self.cat_cum_cache[key] = cum
        return self.pick(cum, self.cat_names)

    def fill_slot(self, slot, rec):
        spec = self.config["slots"][slot]
        kind = spec["kind"]
        if kind in ("uniform", "zipf"):
            return self.pick(self.slot_tables[slot], spec["words"])
        if kind == "weekday":
            own = WEEKDAY_NAMES[rec.weekday]
            if self.rng.random() < spec["match_prob"]:
                return own
            others = [w for w in WEEKDAY_NAMES if w != own]
            return others[int(self.rng.integers(len(others)))]
        # hour_pools: pick a pool by hour-dependent weights, then a word within
        pools = list(spec["pools"])
        weights = [_profile_value(spec["hour_weights"][p], rec.hour) for p in pools]
        cum = np.cumsum(weights)
        pool = self.pick(cum, pools)
        return self.pick(self.slot_tables[slot][pool], spec["pools"][pool])

    def realize(self, cat_name, rec):
        cat = self.cats[cat_name]
        template = self.pick(self.line_cum[cat_name], [t for t, _ in cat["lines"]])
        words = []
        for w in template.split():
            if w.startswith("<") and w.endswith(">"):
                words.extend(self.fill_slot(w[1:-1], rec).split())
            else:
                words.append(w)
        return tuple(words)


def generate_synthetic(config, seed):
    """Generate a corpus from a template/probability config, deterministically."""
    validate_config(config)
    rng = np.random.default_rng(seed)
    sampler = _Sampler(config, rng)
    start = date.fromisoformat(config.get("date_start", "2020-01-01"))
    end = date.fromisoformat(config.get("date_end", "2020-12-31"))
    n_days = (end - start).days + 1
    if n_days <= 0:
        raise ValueError("date_end precedes date_start")
    geo_hashes = config.get("geo_hashes") or None
    attach_prompts = bool(config.get("attach_prompts", False))

    corpus = []
    for _ in range(int(config["n_utterances"])):
        day = start + timedelta(days=int(rng.integers(n_days)))
        hour = int(rng.integers(24))
        minute = int(rng.integers(60))
        geo = geo_hashes[int(rng.integers(len(geo_hashes)))] if geo_hashes else None
        rec = ContextRecord(day.year, day.month, day.day, hour, minute, geo_hash=geo)
        cat = sampler.category(rec)
        if attach_prompts:
            p_follow = float(sampler.cats[cat].get("follow_up_prob", 0.3))
            prompt = "follow_up" if rng.random() < p_follow else "initial"
            rec = ContextRecord(day.year, day.month, day.day, hour, minute,
                                geo_hash=geo, dialogue_prompt=prompt)
        corpus.append(Utterance(sampler.realize(cat, rec), rec))
    return corpus


def _syllable_words(n, seed, prefix_pool=None):
    """Deterministic pronounceable token inventory for synthetic slot lists."""
    rng = np.random.default_rng(seed)
    onsets = ["b", "br", "d", "dr", "f", "g", "gl", "k", "l", "m",
              "n", "p", "pr", "r", "s", "sk", "t", "tr", "v", "z"]
    nuclei = ["a", "e", "i", "o", "u", "ay", "ee", "oo"]
    codas = ["", "n", "r", "l", "s", "m", "sh", "k"]
    words = []
    seen = set(prefix_pool or ())
    while len(words) < n:
        k = 2 if rng.random() < 0.7 else 3
        w = "".join(onsets[int(rng.integers(len(onsets)))]
                    + nuclei[int(rng.integers(len(nuclei)))]
                    + (codas[int(rng.integers(len(codas)))] if s == k - 1 else "")
                    for s in range(k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def default_config(n_utterances=100_000, planted=True):
    """The default synthetic corpus with planted context-word correlations.

    Planted effects: (a) first-word "snooze" peaking at hours 5-6,
    (b) christmas vs easter media tied to month, (c) weather queries naming
    the context weekday, (d) morning/evening artist and genre pools tied to
    hour, plus a large context-free filler mass that creates head/tail
    structure. With planted=False every profile is flat and slot fills are
    context-independent.
    """
    morning_hours = {str(h): 5.0 for h in (5, 6, 7, 8, 9, 10)}
    evening_hours = {str(h): 5.0 for h in (18, 19, 20, 21, 22, 23)}

    def profile(d):
        return d if planted else {}

    snooze_profile = {"4": 3.0, "5": 6.0, "6": 6.0, "7": 3.0}
    snooze_profile.update({str(h): 0.25 for h in range(12, 21)})
    christmas_profile = {"default": 0.25, "11": 2.0, "12": 8.0}
    easter_profile = {"default": 0.25, "3": 2.0, "4": 8.0}

    categories = [
        {"name": "snooze", "weight": 0.05, "hour_profile": profile(snooze_profile),
         "lines": [["snooze", 0.5], ["snooze the alarm", 0.3], ["snooze alarm", 0.2]]},
        {"name": "alarm", "weight": 0.05,
         "hour_profile": profile({"5": 2.0, "6": 2.0, "7": 2.0, "21": 2.0, "22": 2.0}),
         "lines": [["set an alarm", 0.35], ["turn off the alarm", 0.35],
                   ["set a timer", 0.3]]},
        {"name": "greeting_morning", "weight": 0.025,
         "hour_profile": profile(morning_hours),
         "lines": [["good morning", 1.0]]},
        {"name": "greeting_night", "weight": 0.025,
         "hour_profile": profile(evening_hours),
         "lines": [["good night", 0.6], ["goodnight", 0.4]]},
        {"name": "christmas_media", "weight": 0.04,
         "month_profile": profile(christmas_profile),
         "lines": [["play christmas music", 0.4],
                   ["play me best christmas songs", 0.25],
                   ["lookup cookie recipes for christmas", 0.15],
                   ["play a christmas movie", 0.2]]},
        {"name": "easter_media", "weight": 0.03,
         "month_profile": profile(easter_profile),
         "lines": [["play easter songs", 0.4],
                   ["lookup cookie recipes for easter", 0.3],
                   ["when is easter", 0.3]]},
        {"name": "weather", "weight": 0.11,
         "lines": [["what is the weather", 0.3],
                   ["what is the weather on <weekday>", 0.4],
                   ["will it rain on <weekday>", 0.3]]},
        {"name": "music", "weight": 0.30,
         "lines": [["play <song> by <artist>", 0.45], ["play <artist>", 0.2],
                   ["play some <genre> music", 0.35]]},
        {"name": "smart_home", "weight": 0.12,
         "lines": [["turn on the <room> lights", 0.3],
                   ["turn off the <room> lights", 0.3],
                   ["dim the <room> lights", 0.2],
                   ["lock the front door", 0.2]]},
        {"name": "questions", "weight": 0.14,
         "lines": [["what is the <topic_a> of the <topic_b>", 0.5],
                   ["how do you spell <topic_a>", 0.2],
                   ["tell me about <topic_b>", 0.3]]},
        {"name": "basics", "weight": 0.12,
         "lines": [["what time is it", 0.35], ["stop", 0.2], ["cancel", 0.15],
                   ["volume up", 0.15], ["volume down", 0.15]]},
    ]

    am_artists = _syllable_words(120, seed=101)
    pm_artists = _syllable_words(120, seed=202, prefix_pool=am_artists)
    song_words = _syllable_words(40, seed=303, prefix_pool=am_artists + pm_artists)
    songs = [f"{a} {b}" for a in song_words[:20] for b in song_words[20:]][:280]
    topic_seen = am_artists + pm_artists + song_words
    topics_a = _syllable_words(220, seed=404, prefix_pool=topic_seen)
    topics_b = _syllable_words(200, seed=505, prefix_pool=topic_seen + topics_a)

    flat_hours = {}
    slots = {
        "weekday": {"kind": "weekday", "match_prob": 0.8 if planted else 1.0 / 7.0},
        "song": {"kind": "zipf", "words": songs, "exponent": 0.9},
        "artist": {"kind": "hour_pools",
                   "pools": {"am": am_artists, "pm": pm_artists},
                   "hour_weights": {"am": profile(morning_hours) or flat_hours,
                                    "pm": profile(evening_hours) or flat_hours},
                   "exponent": 0.9},
        "genre": {"kind": "hour_pools",
                  "pools": {"am": ["classical", "jazz", "acoustic", "folk"],
                            "pm": ["rock", "electronic", "metal", "dance"]},
                  "hour_weights": {"am": profile(morning_hours) or flat_hours,
                                   "pm": profile(evening_hours) or flat_hours}},
        "room": {"kind": "uniform",
                 "words": ["kitchen", "bedroom", "living room", "office",
                           "garage", "hallway", "bathroom", "porch"]},
        "topic_a": {"kind": "zipf", "words": topics_a, "exponent": 1.0},
        "topic_b": {"kind": "zipf", "words": topics_b, "exponent": 1.0},
    }

    return {
        "n_utterances": n_utterances,
        "date_start": "2020-01-01",
        "date_end": "2020-12-31",
        "categories": categories,
        "slots": slots,
    }
