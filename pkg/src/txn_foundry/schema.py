"""Attribute schema, category vocabularies, and the OOV policy.

Everything downstream (generator, corpus, model, losses) consumes the
declarative schema defined here. Vocabularies map raw category tokens to
dense integer indices; infrequent or unseen tokens collapse into a single
shared OOV index per attribute, and one extra padding index is reserved
for batching. Schemas and vocabularies are immutable after construction
and serialize to versioned JSON documents.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

FORMAT_VERSION = 1

OOV_TOKEN = "<oov>"
PAD_TOKEN = "<pad>"


class AttrKind(str, Enum):
    NUMERICAL = "numerical"
    CATEGORICAL = "categorical"


class AttrScope(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class AttrRole(str, Enum):
    INPUT = "input"
    NEXT_TARGET = "next_target"
    CURRENT_SIGNAL = "current_signal"


class AttrClass(str, Enum):
    """Loss-routing class of an attribute."""

    NUMERICAL = "numerical"
    LOW_CAT = "low_cat"
    HIGH_CAT = "high_cat"


@dataclass(frozen=True)
class CardinalityClass:
    """Boundary between low- and high-cardinality categorical handling."""

    threshold: int = 1024

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class AttributeSpec:
    """Declarative description of one attribute.

    ``cardinality`` counts the full dense index space of a categorical
    attribute, including the OOV index and the reserved padding index;
    it must be absent (None) for numerical attributes.
    """

    name: str
    kind: AttrKind
    scope: AttrScope
    roles: frozenset[AttrRole]
    cardinality: int | None = None
    is_pivot: bool = False

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ValueError(f"attribute name {self.name!r} is not an identifier")
        if self.kind is AttrKind.CATEGORICAL:
            if self.cardinality is None or self.cardinality < 2:
                raise ValueError(f"{self.name}: categorical cardinality must be >= 2")
        elif self.cardinality is not None:
            raise ValueError(f"{self.name}: numerical attributes carry no cardinality")
        if AttrRole.CURRENT_SIGNAL in self.roles and AttrRole.INPUT in self.roles:
            raise ValueError(
                f"{self.name}: current-signal attributes are outcomes and cannot be inputs"
            )
        if self.is_pivot:
            if self.kind is not AttrKind.CATEGORICAL:
                raise ValueError(f"{self.name}: pivot attribute must be categorical")
            if AttrRole.CURRENT_SIGNAL not in self.roles:
                raise ValueError(f"{self.name}: pivot attribute must be a current signal")

    @property
    def is_input(self) -> bool:
        return AttrRole.INPUT in self.roles

    @property
    def is_next_target(self) -> bool:
        return AttrRole.NEXT_TARGET in self.roles

    @property
    def is_current_signal(self) -> bool:
        return AttrRole.CURRENT_SIGNAL in self.roles


def classify(spec: AttributeSpec, klass: CardinalityClass = CardinalityClass()) -> AttrClass:
    """Route an attribute to numerical / low_cat / high_cat loss handling."""
    if spec.kind is AttrKind.NUMERICAL:
        return AttrClass.NUMERICAL
    assert spec.cardinality is not None
    if spec.cardinality <= klass.threshold:
        return AttrClass.LOW_CAT
    return AttrClass.HIGH_CAT


class Vocabulary:
    """Dense token -> index mapping for one categorical attribute.

    Indices 0..n_tokens-1 are the kept raw tokens, followed by the OOV
    index (all infrequent / unseen tokens) and the padding index (batching
    sentinel, never a real category). Lookup never fails: unseen tokens
    resolve to ``oov_index``.
    """

    def __init__(self, attribute: str, tokens_in_order: Sequence[str]):
        self.attribute = attribute
        self._tokens = list(tokens_in_order)
        if len(set(self._tokens)) != len(self._tokens):
            raise ValueError(f"{attribute}: duplicate tokens in vocabulary")
        if OOV_TOKEN in self._tokens or PAD_TOKEN in self._tokens:
            raise ValueError(f"{attribute}: reserved token used as a raw token")
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        self.oov_index = len(self._tokens)
        self.pad_index = len(self._tokens) + 1

    @property
    def cardinality(self) -> int:
        """Total dense index count, OOV and padding included."""
        return len(self._tokens) + 2

    def lookup(self, token) -> int:
        return self._index.get(str(token), self.oov_index)

    def token(self, index: int) -> str:
        """Inverse of lookup for in-vocabulary indices."""
        if 0 <= index < len(self._tokens):
            return self._tokens[index]
        if index == self.oov_index:
            return OOV_TOKEN
        if index == self.pad_index:
            return PAD_TOKEN
        raise IndexError(f"{self.attribute}: index {index} out of range")

    def __contains__(self, token) -> bool:
        return str(token) in self._index

    def __len__(self) -> int:
        return self.cardinality

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.attribute == other.attribute
            and self._tokens == other._tokens
        )

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "entries": [[tok, i] for i, tok in enumerate(self._tokens)],
            "oov_index": self.oov_index,
            "pad_index": self.pad_index,
            "cardinality": self.cardinality,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        entries = sorted(d["entries"], key=lambda e: e[1])
        return cls(d["attribute"], [tok for tok, _ in entries])


def build_vocabulary(
    attribute: str,
    tokens: Iterable,
    min_count: int = 1,
    max_size: int = 1_000_000,
) -> Vocabulary:
    """Build a vocabulary from a token stream.

    Tokens with frequency below ``min_count``, and all tokens beyond the
    ``max_size`` most frequent, aggregate into the OOV index. Kept tokens
    get indices by descending frequency, ties broken lexicographically on
    the raw token, so building is deterministic for any stream ordering.
    An empty stream yields a vocabulary of just the OOV and padding
    indices (cardinality 2).
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if max_size < 2:
        raise ValueError("max_size must be >= 2")
    counts = Counter(str(t) for t in tokens)
    eligible = [(tok, c) for tok, c in counts.items() if c >= min_count]
    eligible.sort(key=lambda tc: (-tc[1], tc[0]))
    kept = [tok for tok, _ in eligible[:max_size]]
    return Vocabulary(attribute, kept)


class AttributeSchema:
    """Ordered collection of attribute specs plus their vocabularies.

    Exactly one attribute must be the pivot (the abnormal-behavior flag).
    Attribute order is meaningful: it fixes record layouts in serialized
    artifacts, and the schema hash commits to it.
    """

    def __init__(
        self,
        attributes: Sequence[AttributeSpec],
        vocabularies: Mapping[str, Vocabulary] | None = None,
    ):
        names = [a.name for a in attributes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate attribute names")
        pivots = [a for a in attributes if a.is_pivot]
        if len(pivots) != 1:
            raise ValueError(f"schema needs exactly one pivot attribute, got {len(pivots)}")
        self.attributes = tuple(attributes)
        self._by_name = {a.name: a for a in attributes}
        self.vocabularies: dict[str, Vocabulary] = dict(vocabularies or {})
        for a in attributes:
            if a.kind is AttrKind.CATEGORICAL and a.name in self.vocabularies:
                vocab = self.vocabularies[a.name]
                if vocab.cardinality != a.cardinality:
                    raise ValueError(
                        f"{a.name}: vocabulary cardinality {vocab.cardinality} "
                        f"!= spec cardinality {a.cardinality}"
                    )

    def __getitem__(self, name: str) -> AttributeSpec:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self.attributes)

    @property
    def pivot(self) -> AttributeSpec:
        return next(a for a in self.attributes if a.is_pivot)

    def select(self, *, scope: AttrScope | None = None, kind: AttrKind | None = None,
               role: AttrRole | None = None) -> list[AttributeSpec]:
        out = []
        for a in self.attributes:
            if scope is not None and a.scope is not scope:
                continue
            if kind is not None and a.kind is not kind:
                continue
            if role is not None and role not in a.roles:
                continue
            out.append(a)
        return out

    def vocabulary(self, name: str) -> Vocabulary:
        return self.vocabularies[name]

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "attributes": [
                {
                    "name": a.name,
                    "kind": a.kind.value,
                    "scope": a.scope.value,
                    "roles": sorted(r.value for r in a.roles),
                    "cardinality": a.cardinality,
                    "is_pivot": a.is_pivot,
                }
                for a in self.attributes
            ],
            "vocabularies": {
                name: v.to_dict() for name, v in sorted(self.vocabularies.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSchema":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported schema format_version {d.get('format_version')!r}")
        attrs = [
            AttributeSpec(
                name=a["name"],
                kind=AttrKind(a["kind"]),
                scope=AttrScope(a["scope"]),
                roles=frozenset(AttrRole(r) for r in a["roles"]),
                cardinality=a["cardinality"],
                is_pivot=a["is_pivot"],
            )
            for a in d["attributes"]
        ]
        vocabs = {name: Vocabulary.from_dict(v) for name, v in d.get("vocabularies", {}).items()}
        return cls(attrs, vocabs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "AttributeSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        """Deterministic content hash committing to specs and vocabularies."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()
