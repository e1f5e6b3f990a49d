"""Consensus merging of two coreference systems' chains.

Chains are converted to unordered mention-pair link sets (a chain of n
mentions induces all n*(n-1)/2 pairs), the two systems' links are
intersected, and chains are rebuilt as the connected components of the
surviving link graph.  Components of size 1 cannot exist in a link
graph, so every consensus chain has >=2 mentions.

Mentions are matched across systems by exact span equality by default;
``match="head"`` relaxes identity to the head token index, for system
pairs that disagree on span boundaries (representative mentions are
then taken from the first system).
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import CorefAnnotation, Mention


@dataclass(frozen=True)
class LinkSet:
    """Unordered mention pairs within one story.

    Links are stored canonically as (a, b) with a < b under the
    Mention ordering (sent, start, end), so set equality is
    well-defined.
    """

    story_id: str
    links: frozenset  # of (Mention, Mention) canonical pairs


def make_link(a: Mention, b: Mention):
    if a.key == b.key:
        raise ValueError(f"self-link on mention {a.key}")
    if a.story_id != b.story_id:
        raise ValueError(f"cross-story link {a.key} / {b.key}")
    return (a, b) if a < b else (b, a)


def chains_to_links(annotation: CorefAnnotation) -> dict:
    """Per-story link sets induced by the annotation's chains (cliques)."""
    out = {}
    for story_id, chains in annotation.chains.items():
        links = set()
        for chain in chains:
            ms = sorted(chain)
            for i in range(len(ms)):
                for j in range(i + 1, len(ms)):
                    links.add(make_link(ms[i], ms[j]))
        out[story_id] = LinkSet(story_id=story_id, links=frozenset(links))
    return out


def _mention_id(m: Mention, match: str):
    if match == "exact":
        return (m.sent_index, m.start, m.end)
    if match == "head":
        return (m.sent_index, m.head)
    raise ValueError(f"unknown match mode {match!r}")


def intersect(a: LinkSet, b: LinkSet, match: str = "exact") -> LinkSet:
    """Links present in both sets, under the chosen mention identity.

    Surviving links keep the mention objects of ``a``.
    """
    if a.story_id != b.story_id:
        raise ValueError(f"story mismatch: {a.story_id!r} vs {b.story_id!r}")
    b_keys = {
        frozenset((_mention_id(x, match), _mention_id(y, match))) for x, y in b.links
    }
    kept = frozenset(
        link
        for link in a.links
        if frozenset((_mention_id(link[0], match), _mention_id(link[1], match))) in b_keys
    )
    return LinkSet(story_id=a.story_id, links=kept)


def links_to_chains(link_set: LinkSet) -> tuple:
    """Connected components of the link graph, as sorted mention tuples."""
    parent = {}

    def find(k):
        root = k
        while parent[root] != root:
            root = parent[root]
        while parent[k] != root:
            parent[k], k = root, parent[k]
        return root

    mentions = {}
    for a, b in link_set.links:
        for m in (a, b):
            if m.key not in parent:
                parent[m.key] = m.key
                mentions[m.key] = m
        ra, rb = find(a.key), find(b.key)
        if ra != rb:
            parent[ra] = rb

    groups = {}
    for key in parent:
        groups.setdefault(find(key), []).append(mentions[key])
    chains = [tuple(sorted(g)) for g in groups.values()]
    chains.sort(key=lambda c: c[0])
    return tuple(chains)


def consensus(
    sys_a: CorefAnnotation, sys_b: CorefAnnotation, match: str = "exact"
) -> CorefAnnotation:
    """Chains rebuilt from the links both systems agree on."""
    links_a = chains_to_links(sys_a)
    links_b = chains_to_links(sys_b)
    chains = {}
    for story_id in sorted(set(links_a) | set(links_b)):
        a = links_a.get(story_id, LinkSet(story_id, frozenset()))
        b = links_b.get(story_id, LinkSet(story_id, frozenset()))
        merged = links_to_chains(intersect(a, b, match=match))
        if merged:
            chains[story_id] = merged
    return CorefAnnotation(
        system_name=f"consensus({sys_a.system_name},{sys_b.system_name})",
        chains=chains,
    )
