"""Annotated-corpus data model and JSONL ingestion.

A corpus is a JSONL file with one object per line, discriminated by a
"kind" field:

  {"kind": "story", "id": ..., "sentences": [["tok", ...], ...]}
  {"kind": "typed_mention", "story": ..., "sent": ..., "start": ...,
   "end": ..., "head": ..., "labels": ["/person", ...]}
  {"kind": "coref", "system": "sysA", "story": ..., "chains":
   [[{"sent": .., "start": .., "end": .., "head": ..}, ...], ...]}

Unknown fields are ignored for forward compatibility.  Spans are
half-open [start, end) token ranges; a mention lives in exactly one
sentence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable


class CorpusError(ValueError):
    """Raised on malformed corpus files or invalid mentions."""


# Markers that start a trailing prepositional tail, for the head-word
# heuristic used when a corpus carries no head annotations.
_PREP_MARKERS = frozenset(
    {"of", "in", "on", "at", "for", "with", "from", "to", "by"}
)


@dataclass(frozen=True, order=True)
class Mention:
    """A contiguous token span in one sentence, with its head token.

    Identity (and ordering) is (story_id, sent_index, start, end); the
    head is carried along but does not participate in identity.
    """

    story_id: str
    sent_index: int
    start: int
    end: int
    head: int = field(compare=False, default=-1)

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise CorpusError(f"bad span [{self.start},{self.end}) in {self.story_id}")
        if self.head == -1:
            object.__setattr__(self, "head", self.end - 1)
        if not (self.start <= self.head < self.end):
            raise CorpusError(
                f"head {self.head} outside span [{self.start},{self.end}) "
                f"in {self.story_id}/{self.sent_index}"
            )

    @property
    def key(self):
        return (self.story_id, self.sent_index, self.start, self.end)


@dataclass(frozen=True)
class Sentence:
    story_id: str
    sent_index: int
    tokens: tuple

    def __post_init__(self):
        if not self.tokens:
            raise CorpusError(f"empty sentence {self.story_id}/{self.sent_index}")
        for tok in self.tokens:
            if not isinstance(tok, str) or tok == "":
                raise CorpusError(f"empty token in {self.story_id}/{self.sent_index}")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Story:
    story_id: str
    sentences: tuple  # of Sentence

    def sentence(self, index: int) -> Sentence:
        return self.sentences[index]


@dataclass(frozen=True)
class TypedMention:
    mention: Mention
    labels: frozenset  # hierarchical label paths like /person/artist

    def __post_init__(self):
        if not self.labels:
            raise CorpusError(f"mention {self.mention.key} has no labels")
        for lab in self.labels:
            if label_depth(lab) < 1:
                raise CorpusError(f"bad label path {lab!r}")


@dataclass(frozen=True)
class CorefAnnotation:
    """One system's chains, keyed by story id.

    Each chain is a tuple of >=2 Mentions from the same story; within
    one story the chains are mention-disjoint.
    """

    system_name: str
    chains: dict  # story_id -> tuple of chains (tuple of Mention)

    def story_chains(self, story_id: str):
        return self.chains.get(story_id, ())


@dataclass(frozen=True)
class Corpus:
    stories: tuple  # of Story
    typed_mentions: tuple  # of TypedMention
    coref: tuple  # of CorefAnnotation

    def story(self, story_id: str) -> Story:
        return self._index()[story_id]

    def _index(self):
        # Frozen dataclass: cache via object.__setattr__ on first use.
        idx = getattr(self, "_story_index", None)
        if idx is None:
            idx = {s.story_id: s for s in self.stories}
            object.__setattr__(self, "_story_index", idx)
        return idx

    def annotation(self, system_name: str) -> CorefAnnotation:
        for ann in self.coref:
            if ann.system_name == system_name:
                return ann
        raise CorpusError(f"no coreference annotation named {system_name!r}")


def label_depth(label: str) -> int:
    """Depth of a hierarchical label path: /a -> 1, /a/b -> 2."""
    if not label.startswith("/"):
        return 0
    return len([seg for seg in label.split("/") if seg])


def label_prefixes(label: str) -> list:
    """All ancestor paths of a label, including itself."""
    segs = [seg for seg in label.split("/") if seg]
    return ["/" + "/".join(segs[: i + 1]) for i in range(len(segs))]


def resolve_head(mention: Mention, sentence: Sentence, mode: str = "given") -> int:
    """Return the head token index of a mention within its sentence.

    ``given`` trusts the annotated head.  ``heuristic`` takes the token
    just before the leftmost prepositional marker in the span (so the
    tail "in front of her" is skipped), or the last span token when no
    marker is present.
    """
    if mode == "given":
        return mention.head
    if mode != "heuristic":
        raise ValueError(f"unknown head mode {mode!r}")
    span = sentence.tokens[mention.start : mention.end]
    for offset, tok in enumerate(span):
        if offset >= 1 and tok in _PREP_MARKERS:
            return mention.start + offset - 1
    return mention.end - 1


def _check_mention(mention: Mention, stories_by_id: dict, where: str) -> None:
    story = stories_by_id.get(mention.story_id)
    if story is None:
        raise CorpusError(f"{where}: unknown story {mention.story_id!r}")
    if not (0 <= mention.sent_index < len(story.sentences)):
        raise CorpusError(f"{where}: sentence {mention.sent_index} out of range")
    sent = story.sentences[mention.sent_index]
    if mention.end > len(sent):
        raise CorpusError(
            f"{where}: mention [{mention.start},{mention.end}) exceeds "
            f"sentence length {len(sent)} in {mention.story_id}/{mention.sent_index}"
        )


def _mention_from_obj(obj: dict, story_id: str, where: str) -> Mention:
    try:
        return Mention(
            story_id=str(story_id),
            sent_index=int(obj["sent"]),
            start=int(obj["start"]),
            end=int(obj["end"]),
            head=int(obj.get("head", int(obj["end"]) - 1)),
        )
    except KeyError as exc:
        raise CorpusError(f"{where}: mention missing field {exc}") from None


def load_corpus(path) -> Corpus:
    """Load and validate a JSONL corpus file.

    Failures carry the 1-based line number of the offending record.
    """
    stories = []
    typed = []
    coref_chains = {}  # system -> {story -> [chains]}
    coref_order = []

    with open(path, "r", encoding="utf-8") as f:
        records = []
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            records.append((lineno, obj))

    for lineno, obj in records:
        kind = obj.get("kind")
        where = f"line {lineno}"
        if kind == "story":
            sid = str(obj.get("id"))
            sents = obj.get("sentences")
            if not isinstance(sents, list) or not sents:
                raise CorpusError(f"{where}: story {sid!r} has no sentences")
            sentences = tuple(
                Sentence(story_id=sid, sent_index=i, tokens=tuple(toks))
                for i, toks in enumerate(sents)
            )
            stories.append(Story(story_id=sid, sentences=sentences))
        elif kind == "typed_mention":
            pass  # validated in the second pass, after all stories are known
        elif kind == "coref":
            pass
        else:
            raise CorpusError(f"{where}: unknown kind {kind!r}")

    stories_by_id = {s.story_id: s for s in stories}
    if len(stories_by_id) != len(stories):
        raise CorpusError("duplicate story ids")

    for lineno, obj in records:
        kind = obj.get("kind")
        where = f"line {lineno}"
        if kind == "typed_mention":
            sid = str(obj.get("story"))
            mention = _mention_from_obj(
                {"sent": obj.get("sent"), "start": obj.get("start"),
                 "end": obj.get("end"), "head": obj.get("head")},
                sid, where,
            )
            _check_mention(mention, stories_by_id, where)
            labels = obj.get("labels") or []
            typed.append(TypedMention(mention=mention, labels=frozenset(labels)))
        elif kind == "coref":
            system = str(obj.get("system"))
            sid = str(obj.get("story"))
            chains = []
            for chain_obj in obj.get("chains", []):
                mentions = []
                for m_obj in chain_obj:
                    mention = _mention_from_obj(m_obj, sid, where)
                    _check_mention(mention, stories_by_id, where)
                    mentions.append(mention)
                if len(mentions) < 2:
                    raise CorpusError(f"{where}: chain with fewer than 2 mentions")
                chains.append(tuple(sorted(mentions)))
            per_system = coref_chains.setdefault(system, {})
            if system not in coref_order:
                coref_order.append(system)
            per_system.setdefault(sid, []).extend(chains)

    annotations = []
    for system in coref_order:
        per_story = {
            sid: tuple(chains) for sid, chains in coref_chains[system].items()
        }
        _check_disjoint(system, per_story)
        annotations.append(CorefAnnotation(system_name=system, chains=per_story))

    return Corpus(
        stories=tuple(stories),
        typed_mentions=tuple(typed),
        coref=tuple(annotations),
    )


def _check_disjoint(system: str, per_story: dict) -> None:
    for sid, chains in per_story.items():
        seen = set()
        for chain in chains:
            for m in chain:
                if m.story_id != sid:
                    raise CorpusError(
                        f"coref {system!r}: mention {m.key} outside story {sid!r}"
                    )
                if m.key in seen:
                    raise CorpusError(
                        f"coref {system!r}: mention {m.key} in two chains of {sid!r}"
                    )
                seen.add(m.key)


def save_corpus(corpus: Corpus, path) -> None:
    """Write a corpus in the JSONL interchange format (stable ordering)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for line in corpus_lines(corpus):
            f.write(line + "\n")


def corpus_lines(corpus: Corpus) -> Iterable[str]:
    for story in corpus.stories:
        f_obj = {
            "kind": "story",
            "id": story.story_id,
            "sentences": [list(s.tokens) for s in story.sentences],
        }
        yield json.dumps(f_obj, ensure_ascii=False)
    for tm in sorted(corpus.typed_mentions, key=lambda t: t.mention.key):
        m = tm.mention
        yield json.dumps(
            {
                "kind": "typed_mention",
                "story": m.story_id,
                "sent": m.sent_index,
                "start": m.start,
                "end": m.end,
                "head": m.head,
                "labels": sorted(tm.labels),
            },
            ensure_ascii=False,
        )
    for ann in corpus.coref:
        for sid in sorted(ann.chains):
            chains = [
                [
                    {"sent": m.sent_index, "start": m.start, "end": m.end, "head": m.head}
                    for m in chain
                ]
                for chain in sorted(ann.chains[sid], key=lambda c: c[0])
            ]
            yield json.dumps(
                {"kind": "coref", "system": ann.system_name, "story": sid, "chains": chains},
                ensure_ascii=False,
            )


def with_annotation(corpus: Corpus, annotation: CorefAnnotation) -> Corpus:
    """Return a corpus with the given annotation appended."""
    return Corpus(
        stories=corpus.stories,
        typed_mentions=corpus.typed_mentions,
        coref=corpus.coref + (annotation,),
    )
