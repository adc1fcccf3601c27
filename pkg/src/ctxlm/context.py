"""Utterance-level context: parsing, token ids, cyclic features, shuffling.

Datetime context has two encodings: four per-field tokens (month-12, week-52,
wednesday, 7am) that feed learned embedding tables, and a single 8-dimensional
sin/cos feature vector that places cyclically adjacent times close together.
Geo-hash and dialogue-prompt contexts are single learned tokens.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from datetime import date

import numpy as np

WEEKDAY_NAMES = ("monday", "tuesday", "wednesday", "thursday", "friday",
                 "saturday", "sunday")
PROMPT_KINDS = ("initial", "follow_up")
GEO_UNKNOWN = "<unk-geo>"

# context set kinds
LEARNED_TOKENS = "learned_tokens"
FEATURE_VECTOR = "feature_vector"
FEATURE_VECTOR_GATED = "feature_vector_gated"
GEO = "geo"
PROMPT = "prompt"
COMPOSITE = "composite"

FEATURE_DIM = 8

_TIMESTAMP_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2}) (\d{2}):(\d{2})$")


@dataclass(frozen=True)
class ContextRecord:
    """Non-linguistic context attached to one utterance (local time)."""

    year: int
    month: int
    day_of_month: int
    hour: int
    minute: int = 0
    geo_hash: str | None = None
    dialogue_prompt: str | None = None

    def __post_init__(self):
        date(self.year, self.month, self.day_of_month)  # raises on e.g. Feb 30
        if not 0 <= self.hour <= 23:
            raise ValueError(f"hour {self.hour} out of range")
        if not 0 <= self.minute <= 59:
            raise ValueError(f"minute {self.minute} out of range")
        if self.geo_hash is not None and len(self.geo_hash) != 2:
            raise ValueError(f"geo hash must be 2 characters, got {self.geo_hash!r}")
        if self.dialogue_prompt is not None and self.dialogue_prompt not in PROMPT_KINDS:
            raise ValueError(f"dialogue prompt must be one of {PROMPT_KINDS}")

    @property
    def iso_week(self):
        """ISO-8601 week of year, 1-53."""
        return date(self.year, self.month, self.day_of_month).isocalendar()[1]

    @property
    def weekday(self):
        """0=Monday .. 6=Sunday."""
        return date(self.year, self.month, self.day_of_month).weekday()

    def timestamp(self):
        return (f"{self.year:04d}-{self.month:02d}-{self.day_of_month:02d} "
                f"{self.hour:02d}:{self.minute:02d}")


def parse_context(timestamp_text, geo_hash=None, dialogue_prompt=None):
    """Parse a `YYYY-MM-DD HH:MM` stamp (plus optional extras) into a record."""
    m = _TIMESTAMP_RE.match(timestamp_text)
    if m is None:
        raise ValueError(f"malformed timestamp {timestamp_text!r}, expected YYYY-MM-DD HH:MM")
    year, month, day, hour, minute = (int(g) for g in m.groups())
    try:
        return ContextRecord(year, month, day, hour, minute,
                             geo_hash=geo_hash, dialogue_prompt=dialogue_prompt)
    except ValueError as e:
        raise ValueError(f"invalid context {timestamp_text!r}: {e}") from e


def hour_token(hour):
    """24-hour integer to the 12-hour am/pm token: 0->12am, 7->7am, 15->3pm."""
    suffix = "am" if hour < 12 else "pm"
    base = hour % 12
    return f"{12 if base == 0 else base}{suffix}"


def datetime_token_names(rec):
    """The four textual datetime tokens, e.g. ('month-12', 'week-52', 'wednesday', '7am')."""
    return (f"month-{rec.month}", f"week-{rec.iso_week}",
            WEEKDAY_NAMES[rec.weekday], hour_token(rec.hour))


class ContextVocab:
    """Dense, stable id maps for every context token family.

    Month/week/weekday/hour domains are closed; geo-hash tokens are
    data-dependent with id 0 reserved for unknown hashes seen at eval time.
    """

    def __init__(self, geo_hashes=()):
        self.month_ids = {f"month-{m}": m - 1 for m in range(1, 13)}
        self.week_ids = {f"week-{w}": w - 1 for w in range(1, 54)}
        self.weekday_ids = {name: i for i, name in enumerate(WEEKDAY_NAMES)}
        self.hour_ids = {hour_token(h): h for h in range(24)}
        self.geo_ids = {GEO_UNKNOWN: 0}
        for g in sorted(set(geo_hashes)):
            self.geo_ids[g] = len(self.geo_ids)
        self.prompt_ids = {p: i for i, p in enumerate(PROMPT_KINDS)}

    @property
    def sizes(self):
        return {"month": 12, "week": 53, "weekday": 7, "hour": 24,
                "geo": len(self.geo_ids), "prompt": len(self.prompt_ids)}

    def geo_id(self, geo_hash):
        return self.geo_ids.get(geo_hash, 0)

    def prompt_id(self, prompt):
        return self.prompt_ids[prompt]

    def to_dict(self):
        return {"geo_tokens": [g for g in self.geo_ids if g != GEO_UNKNOWN]}

    @classmethod
    def from_dict(cls, d):
        return cls(geo_hashes=d.get("geo_tokens", ()))


def datetime_tokens(rec, vocab):
    """Ids of (month, week, weekday, hour) tokens in their per-field tables."""
    names = datetime_token_names(rec)
    return (vocab.month_ids[names[0]], vocab.week_ids[names[1]],
            vocab.weekday_ids[names[2]], vocab.hour_ids[names[3]])


def datetime_features(rec):
    """8-dim sin/cos pairs for hour/24, weekday/7, week/53 and month/12.

    Angles use 0-based indices so period endpoints wrap exactly; each pair
    lies on the unit circle.
    """
    parts = []
    for value, period in ((rec.hour, 24), (rec.weekday, 7),
                          (rec.iso_week - 1, 53), (rec.month - 1, 12)):
        angle = 2.0 * np.pi * value / period
        parts.append(np.sin(angle))
        parts.append(np.cos(angle))
    return np.array(parts)


@dataclass
class ContextSet:
    """The set M of context vectors a model attends over.

    members are float vectors of equal length; labels name them for
    attention traces. concatenated is the single vector m used by the
    non-attention paths.
    """

    kind: str
    members: list
    labels: list

    def __post_init__(self):
        if self.kind == LEARNED_TOKENS and len(self.members) != 4:
            raise ValueError("learned_tokens context set needs exactly 4 members")
        if self.kind == FEATURE_VECTOR and len(self.members) != 1:
            raise ValueError("feature_vector context set needs exactly 1 member")
        if self.kind == FEATURE_VECTOR_GATED:
            if len(self.members) != 2:
                raise ValueError("gated feature context set needs exactly 2 members")
            if np.any(self.members[1] != 0.0):
                raise ValueError("gate member must be the zero vector")

    @property
    def concatenated(self):
        return np.concatenate([np.asarray(m) for m in self.members]) \
            if self.kind == LEARNED_TOKENS else np.asarray(self.members[0])


def embed_context(set_kind, rec, tables=None, vocab=None):
    """Build the context set for one record.

    tables maps field name -> embedding matrix (rows indexed by token id);
    needed for learned_tokens, geo and prompt kinds. Feature kinds are
    table-free. Unknown geo hashes fall back to the reserved unknown id.
    """
    if set_kind == LEARNED_TOKENS:
        ids = datetime_tokens(rec, vocab or ContextVocab())
        fields = ("month", "week", "weekday", "hour")
        members = [np.asarray(tables[f][i]) for f, i in zip(fields, ids)]
        return ContextSet(LEARNED_TOKENS, members, list(fields))
    if set_kind == FEATURE_VECTOR:
        return ContextSet(FEATURE_VECTOR, [datetime_features(rec)], ["feature"])
    if set_kind == FEATURE_VECTOR_GATED:
        feats = datetime_features(rec)
        return ContextSet(FEATURE_VECTOR_GATED, [feats, np.zeros_like(feats)],
                          ["feature", "gate"])
    if set_kind == GEO:
        gid = (vocab or ContextVocab()).geo_id(rec.geo_hash)
        return ContextSet(GEO, [np.asarray(tables["geo"][gid])], ["geo"])
    if set_kind == PROMPT:
        pid = (vocab or ContextVocab()).prompt_id(rec.dialogue_prompt)
        return ContextSet(PROMPT, [np.asarray(tables["prompt"][pid])], ["prompt"])
    raise ValueError(f"unknown context set kind {set_kind!r}")


def shuffle_contexts(corpus, seed):
    """Reassign context records to utterances by a seeded uniform permutation.

    The multiset of records is preserved and the text is untouched; this is
    the control condition isolating genuine context signal from capacity.
    """
    if not corpus:
        raise ValueError("cannot shuffle an empty corpus")
    perm = np.random.default_rng(seed).permutation(len(corpus))
    return [dataclasses.replace(u, context=corpus[j].context)
            for u, j in zip(corpus, perm)]
