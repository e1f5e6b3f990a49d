"""Synthetic story corpora with gold types, gold chains, and noisy coref.

Each story holds a few entities; each entity gets one sentence per
mention, built from type-specific context templates so that the
sentence context (not the surface form) reveals the semantic type.  A
configurable fraction of non-initial mentions use pronoun surfaces,
which forces any context-based learner to rely on coreference rather
than name memorization.

Two simulated coreference systems are derived from the gold chains:
each gold link is dropped independently with ``miss_rate``, and for
every pair of entities in a story there is one candidate spurious link
(between the entities' first mentions) that each system adds
independently with ``spurious_rate``.  Chains are then re-formed as
connected components.  Because both systems flip coins on the same
candidate set, the fraction of candidates surviving a link-level
intersection concentrates around ``spurious_rate**2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .corpus import (
    CorefAnnotation,
    Corpus,
    Mention,
    Sentence,
    Story,
    TypedMention,
    label_prefixes,
    save_corpus,
    with_annotation,
)
from .util import rng_for

# Sentence frames shared by every type.  The {cue} slot carries the
# only type-revealing word and always sits next to the mention, so the
# rest of the sentence is type-neutral filler: a masked-token learner
# mostly sees generic words, while the type stays recoverable from the
# one cue in the mention's context window.
SENTENCE_FRAMES = [
    "the {cue} {} arrived at the plaza before the evening crowd",
    "everyone at the meeting watched the {cue} {} with interest",
    "reporters waited while the {cue} {} crossed the busy square",
    "the {cue} {} returned after a long quiet week",
    "neighbors often discussed the {cue} {} over coffee",
    "a photograph of the {cue} {} appeared in the morning paper",
]

# 20 hierarchical entity types with type-unique cue words (disjoint
# from the frame vocabulary).
TYPE_CUES = [
    ("/person", ["resident", "stranger", "villager"]),
    ("/person/artist", ["painter", "sculptor", "muralist"]),
    ("/person/artist/author", ["novelist", "essayist", "biographer"]),
    ("/person/doctor", ["surgeon", "physician", "medic"]),
    ("/person/athlete", ["sprinter", "goalkeeper", "gymnast"]),
    ("/person/politician", ["senator", "councillor", "minister"]),
    ("/organization", ["association", "cooperative", "guild"]),
    ("/organization/company", ["manufacturer", "retailer", "startup"]),
    ("/organization/company/broadcast", ["network", "channel", "newsroom"]),
    ("/organization/team", ["squad", "lineup", "clubside"]),
    ("/organization/government", ["ministry", "bureau", "agency"]),
    ("/location", ["landmark", "terrain", "outskirts"]),
    ("/location/city", ["metropolis", "downtown", "boroughs"]),
    ("/location/country", ["republic", "kingdom", "homeland"]),
    ("/location/river", ["waterway", "rapids", "estuary"]),
    ("/other", ["curiosity", "artifact", "oddity"]),
    ("/other/currency", ["banknote", "coinage", "tender"]),
    ("/other/event", ["festival", "ceremony", "tournament"]),
    ("/other/product", ["gadget", "appliance", "prototype"]),
    ("/other/disease", ["ailment", "contagion", "fever"]),
]

DEFAULT_TYPE_INVENTORY = [
    (path, [frame.replace("{cue}", cue) for frame in SENTENCE_FRAMES for cue in cues])
    for path, cues in TYPE_CUES
]

_FIRST_NAMES = [
    "mira", "talos", "vena", "orun", "sabel", "quince", "lorat", "henna",
    "drav", "ilsa", "pemba", "roshan", "tilda", "unwin", "varek", "wyla",
    "xeno", "yara", "zephi", "arlo", "brisa", "cato", "della", "evren",
    "fion", "galen", "hollis", "ivor", "juna", "kasim",
]
_LAST_NAMES = [
    "abbas", "brightwater", "calloway", "draven", "ekwueme", "farrow",
    "greaves", "holt", "ibarra", "jommo", "kessler", "larkin", "mbeki",
    "noor", "okonkwo", "petrov", "quill", "rahimi", "sandoval", "tanaka",
    "ulmer", "voss", "whitlock", "xiang", "yilmaz", "zayn", "acker",
    "bellflower", "crane", "dagny",
]
_PERSON_PRONOUNS = ["he", "she", "they"]
_THING_PRONOUNS = ["it"]


@dataclass(frozen=True)
class NoiseSpec:
    miss_rate: float = 0.1
    spurious_rate: float = 0.1

    def __post_init__(self):
        for name in ("miss_rate", "spurious_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0,1], got {v}")


@dataclass(frozen=True)
class SynthConfig:
    n_stories: int = 200
    entities_per_story: int = 3
    mentions_per_entity: int = 4
    pronoun_fraction: float = 0.3
    type_inventory: tuple = tuple(DEFAULT_TYPE_INVENTORY)
    coref_noise: tuple = (("sysA", NoiseSpec()), ("sysB", NoiseSpec()))
    seed: int = 0

    def __post_init__(self):
        if not self.type_inventory:
            raise ValueError("type_inventory is empty")
        for path, templates in self.type_inventory:
            if len(set(templates)) < 2:
                raise ValueError(f"type {path!r} needs >=2 distinct templates")
            for t in templates:
                if "{}" not in t:
                    raise ValueError(f"template without mention slot: {t!r}")
        if self.mentions_per_entity < 2:
            raise ValueError("mentions_per_entity must be >=2 (chains need 2 mentions)")
        if not (0.0 <= self.pronoun_fraction <= 1.0):
            raise ValueError("pronoun_fraction must be in [0,1]")
        if self.entities_per_story < 2 and any(
            spec.spurious_rate > 0 for _, spec in self.coref_noise
        ):
            raise ValueError(
                "spurious links need entities_per_story >= 2 (no spurious partner)"
            )

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        kwargs = {}
        for key in ("n_stories", "entities_per_story", "mentions_per_entity",
                    "pronoun_fraction", "seed"):
            if key in raw:
                kwargs[key] = raw[key]
        if "type_inventory" in raw:
            kwargs["type_inventory"] = tuple(
                (item["path"], tuple(item["templates"])) for item in raw["type_inventory"]
            )
        if "coref_noise" in raw:
            kwargs["coref_noise"] = tuple(
                (name, NoiseSpec(**spec)) for name, spec in raw["coref_noise"].items()
            )
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "n_stories": self.n_stories,
            "entities_per_story": self.entities_per_story,
            "mentions_per_entity": self.mentions_per_entity,
            "pronoun_fraction": self.pronoun_fraction,
            "type_inventory": [
                {"path": p, "templates": list(ts)} for p, ts in self.type_inventory
            ],
            "coref_noise": {
                name: {"miss_rate": s.miss_rate, "spurious_rate": s.spurious_rate}
                for name, s in self.coref_noise
            },
            "seed": self.seed,
        }


@dataclass
class SynthCorpus:
    corpus: Corpus          # stories + typed mentions + noisy systems
    gold_chains: CorefAnnotation
    gold_types: tuple       # of TypedMention (same objects as corpus.typed_mentions)
    # Diagnostics for noise-model tests: raw sampled links, before chains
    # are re-formed (chain cliques would hide which links were sampled).
    candidates: dict = field(default_factory=dict)      # story -> [link key]
    sampled_spurious: dict = field(default_factory=dict)  # system -> story -> set
    sampled_links: dict = field(default_factory=dict)     # system -> story -> set

    def write_jsonl(self, path) -> None:
        save_corpus(with_annotation(self.corpus, self.gold_chains), path)


def _link_key(a: Mention, b: Mention):
    ka, kb = a.key, b.key
    return (ka, kb) if ka <= kb else (kb, ka)


def generate(config: SynthConfig) -> SynthCorpus:
    """Build a synthetic corpus; deterministic for a fixed seed."""
    rng_story = rng_for(config.seed, "synth", "stories")

    stories = []
    typed = []
    gold = {}
    entity_mentions_all = {}  # story_id -> list of per-entity mention lists

    for s in range(config.n_stories):
        story_id = f"story{s:05d}"
        n_types = len(config.type_inventory)
        type_idx = rng_story.choice(
            n_types, size=min(config.entities_per_story, n_types), replace=False
        )
        if config.entities_per_story > n_types:
            extra = rng_story.choice(n_types, size=config.entities_per_story - n_types)
            type_idx = list(type_idx) + list(extra)

        entities = []
        for e, ti in enumerate(type_idx):
            path, templates = config.type_inventory[int(ti)]
            name = (
                _FIRST_NAMES[int(rng_story.integers(len(_FIRST_NAMES)))],
                _LAST_NAMES[int(rng_story.integers(len(_LAST_NAMES)))],
            )
            entities.append({"path": path, "templates": templates, "name": name})

        # One sentence per mention; shuffle the slot order so chains
        # interleave within the story.
        slots = [
            (e, m)
            for e in range(len(entities))
            for m in range(config.mentions_per_entity)
        ]
        rng_story.shuffle(slots)

        first_slot = {}
        for sent_index, (e, _) in enumerate(slots):
            first_slot.setdefault(e, sent_index)

        sentences = []
        entity_mentions = [[] for _ in entities]
        for sent_index, (e, _) in enumerate(slots):
            ent = entities[e]
            template = ent["templates"][int(rng_story.integers(len(ent["templates"])))]
            is_first = first_slot[e] == sent_index
            use_pronoun = (not is_first) and (
                rng_story.random() < config.pronoun_fraction
            )
            if use_pronoun:
                pool = (
                    _PERSON_PRONOUNS
                    if ent["path"].startswith("/person")
                    else _THING_PRONOUNS
                )
                surface = [pool[int(rng_story.integers(len(pool)))]]
            else:
                surface = list(ent["name"])

            words = template.split()
            slot_at = words.index("{}")
            tokens = words[:slot_at] + surface + words[slot_at + 1 :]
            start = slot_at
            end = slot_at + len(surface)
            mention = Mention(
                story_id=story_id,
                sent_index=sent_index,
                start=start,
                end=end,
                head=end - 1,
            )
            sentences.append(
                Sentence(story_id=story_id, sent_index=sent_index, tokens=tuple(tokens))
            )
            entity_mentions[e].append(mention)
            typed.append(
                TypedMention(
                    mention=mention, labels=frozenset(label_prefixes(ent["path"]))
                )
            )

        stories.append(Story(story_id=story_id, sentences=tuple(sentences)))
        gold[story_id] = tuple(
            tuple(sorted(ms)) for ms in entity_mentions if len(ms) >= 2
        )
        entity_mentions_all[story_id] = entity_mentions

    gold_ann = CorefAnnotation(system_name="gold", chains=gold)

    # Noise: drop gold links per system, add spurious cross-entity links
    # on a fixed candidate set shared by both systems.
    candidates = {}
    for story_id, entity_mentions in entity_mentions_all.items():
        cands = []
        for i in range(len(entity_mentions)):
            for j in range(i + 1, len(entity_mentions)):
                mi = min(entity_mentions[i])
                mj = min(entity_mentions[j])
                cands.append(_link_key(mi, mj))
        candidates[story_id] = cands

    mention_by_key = {}
    for story_id, entity_mentions in entity_mentions_all.items():
        for ms in entity_mentions:
            for m in ms:
                mention_by_key[m.key] = m

    noisy_annotations = []
    sampled_spurious = {}
    sampled_links = {}
    for system, spec in config.coref_noise:
        rng_sys = rng_for(config.seed, "synth", "coref", system)
        chains = {}
        sampled_spurious[system] = {}
        sampled_links[system] = {}
        for story_id, entity_mentions in entity_mentions_all.items():
            links = set()
            for ms in entity_mentions:
                ms = sorted(ms)
                for i in range(len(ms)):
                    for j in range(i + 1, len(ms)):
                        if rng_sys.random() >= spec.miss_rate:
                            links.add(_link_key(ms[i], ms[j]))
            spurious = set()
            for cand in candidates[story_id]:
                if rng_sys.random() < spec.spurious_rate:
                    spurious.add(cand)
            links |= spurious
            sampled_spurious[system][story_id] = spurious
            sampled_links[system][story_id] = set(links)
            comp = _components(links)
            story_chains = tuple(
                tuple(sorted(mention_by_key[k] for k in group))
                for group in comp
            )
            if story_chains:
                chains[story_id] = story_chains
        noisy_annotations.append(CorefAnnotation(system_name=system, chains=chains))

    corpus = Corpus(
        stories=tuple(stories),
        typed_mentions=tuple(typed),
        coref=tuple(noisy_annotations),
    )
    return SynthCorpus(
        corpus=corpus,
        gold_chains=gold_ann,
        gold_types=tuple(typed),
        candidates=candidates,
        sampled_spurious=sampled_spurious,
        sampled_links=sampled_links,
    )


def _components(links: set) -> list:
    """Connected components over link keys; sorted for determinism."""
    parent = {}

    def find(k):
        root = k
        while parent[root] != root:
            root = parent[root]
        while parent[k] != root:
            parent[k], k = root, parent[k]
        return root

    for a, b in links:
        parent.setdefault(a, a)
        parent.setdefault(b, b)
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    groups = {}
    for k in parent:
        groups.setdefault(find(k), []).append(k)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])
