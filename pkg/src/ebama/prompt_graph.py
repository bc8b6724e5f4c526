"""Object/modifier structure of a prompt from dependency annotations.

Objects are NOUN/PROPN tokens that do not themselves modify another noun.
Each object collects the tokens hanging off it through modifier arcs
(``amod``, ``nmod``, ``compound``, ``npadvmod``), following ``conj`` arcs
only when they start from a modifier ("an orange and white cat").

Annotators are pluggable. ``FixtureAnnotator`` replays frozen TSV files and
backs the tests; ``SpacyAnnotator`` wraps a spaCy pipeline when a model is
installed; ``LexiconAnnotator`` is a small rule-based fallback that handles
the template-style benchmark prompts. The fixture and lexicon annotators are
reentrant; calls into spaCy must be serialised.
"""

from __future__ import annotations

import importlib.util
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .errors import ConfigurationError, InputError

OBJECT_TAGS = frozenset({"NOUN", "PROPN"})
MODIFIER_DEPS = frozenset({"amod", "nmod", "compound", "npadvmod"})
CONJ_DEP = "conj"

FIXTURE_DIR = Path(__file__).parent / "data" / "annotations"


@dataclass(frozen=True)
class TokenAnnotation:
    index: int
    text: str
    pos_tag: str
    head_index: int
    dep_label: str


@dataclass(frozen=True)
class ObjectGraph:
    objects: tuple[int, ...]
    modifiers: Mapping[int, frozenset[int]]
    token_count: int
    externals: frozenset[int] = frozenset()
    words: tuple[str, ...] = ()

    @property
    def degraded(self) -> bool:
        """True when no object was found; guidance is then a no-op."""
        return not self.objects

    def modifier_union(self) -> frozenset[int]:
        out: set[int] = set()
        for mods in self.modifiers.values():
            out |= mods
        return frozenset(out)

    def to_record(self) -> dict:
        def word(i):
            return self.words[i] if i < len(self.words) else str(i)

        return {
            "objects": [
                {
                    "index": s,
                    "text": word(s),
                    "modifiers": [{"index": m, "text": word(m)} for m in sorted(self.modifiers[s])],
                }
                for s in self.objects
            ],
            "externals": [{"index": e, "text": word(e)} for e in sorted(self.externals)],
            "token_count": self.token_count,
            "degraded": self.degraded,
        }

    def describe(self) -> str:
        """Human-readable ``S={...}; M(s)={...}`` summary."""

        def word(i):
            return self.words[i] if i < len(self.words) else str(i)

        objs = ",".join(word(s) for s in self.objects)
        mods = ", ".join(
            f"M({word(s)})={{{','.join(word(m) for m in sorted(self.modifiers[s]))}}}"
            for s in self.objects
        )
        out = f"S={{{objs}}}" + (f"; {mods}" if mods else "")
        if self.externals:
            out += f"; externals={{{','.join(word(e) for e in sorted(self.externals))}}}"
        return out


def validate_annotations(tokens: Sequence[TokenAnnotation]) -> None:
    n = len(tokens)
    if n == 0:
        raise InputError("empty annotation sequence")
    for i, tok in enumerate(tokens):
        if tok.index != i:
            raise InputError(f"token indices must be contiguous from 0; got {tok.index} at {i}")
        if not 0 <= tok.head_index < n:
            raise InputError(f"token {i} has head {tok.head_index} outside [0, {n})")
        if not tok.dep_label:
            raise InputError(f"token {i} has an empty dependency label")


def _children(tokens: Sequence[TokenAnnotation]) -> list[list[int]]:
    kids: list[list[int]] = [[] for _ in tokens]
    for tok in tokens:
        if tok.head_index != tok.index:
            kids[tok.head_index].append(tok.index)
    return kids


def extract_object_graph(tokens: Sequence[TokenAnnotation]) -> ObjectGraph:
    validate_annotations(tokens)
    kids = _children(tokens)
    candidates = [
        t.index for t in tokens if t.pos_tag in OBJECT_TAGS and t.dep_label not in MODIFIER_DEPS
    ]
    candidate_set = set(candidates)

    modifiers: dict[int, set[int]] = {}
    for s in candidates:
        found: set[int] = set()
        stack = [c for c in kids[s] if tokens[c].dep_label in MODIFIER_DEPS]
        while stack:
            node = stack.pop()
            if node in found or node in candidate_set:
                continue
            found.add(node)
            for c in kids[node]:
                if tokens[c].dep_label in MODIFIER_DEPS or tokens[c].dep_label == CONJ_DEP:
                    stack.append(c)
        modifiers[s] = found

    claimed: set[int] = set()
    for s in candidates:
        modifiers[s] -= claimed
        claimed |= modifiers[s]
    objects = tuple(s for s in candidates if s not in claimed)
    return ObjectGraph(
        objects=objects,
        modifiers={s: frozenset(modifiers[s]) for s in objects},
        token_count=len(tokens),
        words=tuple(t.text for t in tokens),
    )


def append_external_modifiers(
    graph: ObjectGraph, tokens: Sequence[TokenAnnotation], n: int
) -> ObjectGraph:
    """Extend ``graph`` with ``n`` external words appended to the prompt.

    ``tokens`` annotates the extended prompt; the last ``n`` positions are the
    appended words. Externals only ever act as negatives.
    """
    if n <= 0:
        raise InputError("need at least one external modifier")
    if len(tokens) != graph.token_count + n:
        raise InputError(
            f"extended prompt has {len(tokens)} tokens, expected {graph.token_count} + {n}"
        )
    start = graph.token_count
    return ObjectGraph(
        objects=graph.objects,
        modifiers=dict(graph.modifiers),
        token_count=graph.token_count + n,
        externals=graph.externals | frozenset(range(start, start + n)),
        words=graph.words + tuple(t.text for t in tokens[start:]),
    )


def extend_with_words(graph: ObjectGraph, words: Sequence[str]) -> ObjectGraph:
    """Shortcut for appending bare words, annotated as detached modifiers."""
    base = graph.token_count
    tokens = [TokenAnnotation(i, w, "X", i, "dep") for i, w in enumerate(graph.words)]
    tokens += [TokenAnnotation(base + k, w, "ADJ", base + k, "dep") for k, w in enumerate(words)]
    return append_external_modifiers(graph, tokens, len(words))


# --------------------------------------------------------------------------
# annotators
# --------------------------------------------------------------------------


class Annotator(Protocol):
    def __call__(self, prompt: str) -> list[TokenAnnotation]: ...


def normalize_prompt(prompt: str) -> str:
    return " ".join(prompt.strip().split())


def read_annotation_file(path: str | Path) -> tuple[str | None, list[TokenAnnotation]]:
    """Read a TSV fixture. ``# prompt:`` header line, then index/text/pos/head/dep rows."""
    prompt = None
    tokens = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*prompt:\s*(.*)$", line)
            if m:
                prompt = m.group(1).strip()
            continue
        idx, text, pos, head, dep = line.split("\t")
        tokens.append(TokenAnnotation(int(idx), text, pos, int(head), dep))
    validate_annotations(tokens)
    return prompt, tokens


def write_annotation_file(path: str | Path, prompt: str, tokens: Iterable[TokenAnnotation]) -> None:
    rows = [f"# prompt: {prompt}", "# index\ttext\tpos\thead\tdep"]
    rows += [f"{t.index}\t{t.text}\t{t.pos_tag}\t{t.head_index}\t{t.dep_label}" for t in tokens]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


class FixtureAnnotator:
    """Replays annotations recorded as TSV files in a directory."""

    def __init__(self, directory: str | Path = FIXTURE_DIR):
        self.directory = Path(directory)
        self._table: dict[str, list[TokenAnnotation]] = {}
        for path in sorted(self.directory.glob("*.tsv")):
            prompt, tokens = read_annotation_file(path)
            if prompt is None:
                raise ConfigurationError(f"{path} lacks a '# prompt:' header")
            self._table[normalize_prompt(prompt).lower()] = tokens

    def __contains__(self, prompt: str) -> bool:
        return normalize_prompt(prompt).lower() in self._table

    def prompts(self) -> list[str]:
        return sorted(self._table)

    def __call__(self, prompt: str) -> list[TokenAnnotation]:
        if not prompt or not prompt.strip():
            raise InputError("empty prompt")
        key = normalize_prompt(prompt).lower()
        if key not in self._table:
            raise ConfigurationError(f"no recorded annotation for prompt {prompt!r}")
        return list(self._table[key])


class SpacyAnnotator:
    """spaCy-backed annotator. Not reentrant across threads; serialise calls."""

    def __init__(self, model: str = "en_core_web_trf"):
        try:
            import spacy
        except ImportError as exc:
            raise ConfigurationError("spaCy is not installed (pip install spacy)") from exc
        try:
            self._nlp = spacy.load(model)
        except OSError as exc:
            raise ConfigurationError(
                f"spaCy model {model!r} is not installed; run `python -m spacy download {model}`"
            ) from exc
        self.model = model

    def __call__(self, prompt: str) -> list[TokenAnnotation]:
        if not prompt or not prompt.strip():
            raise InputError("empty prompt")
        doc = self._nlp(prompt)
        return [TokenAnnotation(t.i, t.text, t.pos_, t.head.i, t.dep_) for t in doc]


# Word lists for the rule-based fallback. They cover the colours, textures
# and nouns of the template benchmarks; anything unknown is treated as a noun
# when it follows modifiers, otherwise as an adjective.
COLORS = frozenset(
    "red orange yellow green blue purple pink brown gray grey black white teal tan "
    "silver golden gold beige violet cyan magenta maroon navy".split()
)
ADJECTIVES = COLORS | frozenset(
    "modern spotted sliced wooden metal plastic glass small large big tiny huge old new "
    "fluffy furry shiny striped square round wet dry stuffed baby young living leather "
    "velvet fresh rotten ripe bright dark cute angry happy sad".split()
)
NOUN_MODIFIERS = frozenset("metal leather glass plastic baby display kitty living stone".split())
DETERMINERS = frozenset("a an the some two three one this that".split())
PREPOSITIONS = frozenset("with on in near under above behind beside next to of at by".split())
CONJUNCTIONS = frozenset({"and", "or"})
NUMERALS = frozenset("two three four five".split())


class LexiconAnnotator:
    """Deterministic shallow parser for "a <mods> <noun> and/with/on a <mods> <noun>" prompts."""

    def __call__(self, prompt: str) -> list[TokenAnnotation]:
        if not prompt or not prompt.strip():
            raise InputError("empty prompt")
        words = re.findall(r"[A-Za-z0-9'-]+|[^\sA-Za-z0-9]", prompt)
        n = len(words)
        pos = ["X"] * n
        low = [w.lower() for w in words]

        # phrase segmentation: a noun closes a run of modifiers
        for i, w in enumerate(low):
            if not re.match(r"\w", w):
                pos[i] = "PUNCT"
            elif w in NUMERALS:
                pos[i] = "NUM"
            elif w in DETERMINERS:
                pos[i] = "DET"
            elif w in CONJUNCTIONS:
                pos[i] = "CCONJ"
            elif w in PREPOSITIONS:
                pos[i] = "ADP"
            elif w in {"is", "are"}:
                pos[i] = "AUX"
            elif w.endswith("ing") and w not in ADJECTIVES:
                pos[i] = "VERB"
        for i, w in enumerate(low):
            if pos[i] != "X":
                continue
            nxt = next((j for j in range(i + 1, n) if pos[j] != "PUNCT"), None)
            follows_open = nxt is not None and pos[nxt] == "X"
            # "orange and white cat": a coordinated adjective still opens a phrase
            coordinated = (
                nxt is not None and pos[nxt] == "CCONJ" and nxt + 1 < n and low[nxt + 1] in ADJECTIVES
            )
            # "a girl in red": a bare colour after a preposition is not an object
            bare_colour = w in COLORS and nxt is None and i > 0 and pos[i - 1] == "ADP"
            if w in ADJECTIVES and w not in NOUN_MODIFIERS:
                pos[i] = "ADJ" if follows_open or coordinated or bare_colour else "NOUN"
            else:
                pos[i] = "NOUN"

        head = list(range(n))
        dep = ["dep"] * n
        # attach modifiers and determiners to the noun that ends their phrase
        phrase_heads: list[int] = []
        i = 0
        while i < n:
            j = i
            while j < n and pos[j] in {"DET", "NUM", "ADJ"} or (
                j < n and pos[j] == "NOUN" and j + 1 < n and pos[j + 1] in {"NOUN", "ADJ"}
            ) or (j < n and pos[j] == "CCONJ" and j > i and pos[j - 1] == "ADJ"):
                j += 1
            if j < n and pos[j] in {"NOUN", "PROPN"} and j > i:
                noun = j
                prev_adj = None
                for k in range(i, j):
                    head[k] = noun
                    if pos[k] == "DET":
                        dep[k] = "det"
                    elif pos[k] == "NUM":
                        dep[k] = "nummod"
                    elif pos[k] == "CCONJ":
                        dep[k] = "cc"
                        head[k] = prev_adj if prev_adj is not None else noun
                    elif pos[k] == "NOUN":
                        dep[k] = "compound"
                    elif k > i and pos[k - 1] == "CCONJ" and prev_adj is not None:
                        dep[k] = "conj"
                        head[k] = prev_adj
                    else:
                        dep[k] = "amod"
                        prev_adj = k
                phrase_heads.append(noun)
                i = j + 1
            elif j < n and pos[j] in {"NOUN", "PROPN"}:
                phrase_heads.append(j)
                i = j + 1
            else:
                i = max(j, i + 1)

        root = phrase_heads[0] if phrase_heads else 0
        verbs = [k for k in range(n) if pos[k] == "VERB"]
        if verbs and phrase_heads and verbs[0] > phrase_heads[0] and any(
            pos[k] == "AUX" for k in range(n)
        ):
            root = verbs[0]
        head[root] = root
        dep[root] = "ROOT"

        last_anchor = root
        prev_phrase = root
        for k in range(n):
            if k == root:
                continue
            if pos[k] == "VERB":
                head[k] = root
                dep[k] = "acl" if pos[root] == "NOUN" else "xcomp"
                last_anchor = k
            elif pos[k] == "AUX":
                head[k] = root
                dep[k] = "aux"
            elif pos[k] == "ADP":
                head[k] = last_anchor if last_anchor != root or pos[root] != "VERB" else root
                if pos[k - 1] == "ADP" if k > 0 else False:
                    head[k] = k - 1
                dep[k] = "prep"
            elif pos[k] == "PUNCT":
                head[k] = prev_phrase
                dep[k] = "punct"
            elif k in phrase_heads:
                before = [m for m in range(k - 1, -1, -1) if head[m] != k]
                link = before[0] if before else root
                while link >= 0 and pos[link] == "PUNCT":
                    link -= 1
                if pos[link] == "ADP":
                    head[k] = link
                    dep[k] = "pobj"
                elif pos[link] == "CCONJ":
                    head[k] = prev_phrase
                    dep[k] = "conj"
                    head[link] = prev_phrase
                    dep[link] = "cc"
                elif pos[root] == "VERB" and k > root:
                    head[k] = root
                    dep[k] = "dobj"
                elif pos[root] == "VERB":
                    head[k] = root
                    dep[k] = "nsubj"
                else:
                    head[k] = prev_phrase
                    dep[k] = "appos"
                prev_phrase = k
                if pos[root] != "VERB":
                    last_anchor = k if dep[k] != "pobj" else last_anchor
            elif pos[k] == "CCONJ" and dep[k] == "dep":
                head[k] = prev_phrase
                dep[k] = "cc"
        return [TokenAnnotation(k, words[k], pos[k], head[k], dep[k]) for k in range(n)]


class ChainAnnotator:
    """Tries annotators in order, falling through on configuration errors."""

    def __init__(self, *annotators: Annotator):
        self.annotators = annotators

    def __call__(self, prompt: str) -> list[TokenAnnotation]:
        last: Exception | None = None
        for ann in self.annotators:
            try:
                return ann(prompt)
            except ConfigurationError as exc:
                last = exc
        raise ConfigurationError(f"no annotator could handle {prompt!r}: {last}")


def default_annotator(kind: str = "auto") -> Annotator:
    """``fixture``, ``spacy``, ``lexicon`` or ``auto`` (fixture, then spaCy, then lexicon)."""
    if kind == "fixture":
        return FixtureAnnotator()
    if kind == "spacy":
        return SpacyAnnotator()
    if kind == "lexicon":
        return LexiconAnnotator()
    if kind != "auto":
        raise ConfigurationError(f"unknown annotator {kind!r}")
    return ChainAnnotator(FixtureAnnotator(), _LazySpacy(), LexiconAnnotator())


class _LazySpacy:
    # spaCy imports are slow; defer them until a fixture lookup misses
    def __init__(self, model: str = "en_core_web_trf"):
        self.model = model
        self._inner: SpacyAnnotator | None = None
        self._error: ConfigurationError | None = None

    def __call__(self, prompt: str) -> list[TokenAnnotation]:
        if self._inner is None and self._error is None:
            if importlib.util.find_spec(self.model) is None:
                self._error = ConfigurationError(f"spaCy model {self.model!r} is not installed")
            else:
                try:
                    self._inner = SpacyAnnotator(self.model)
                except ConfigurationError as exc:
                    self._error = exc
        if self._error is not None:
            raise self._error
        return self._inner(prompt)


def annotate(prompt: str, annotator: Annotator | None = None) -> list[TokenAnnotation]:
    if not prompt or not prompt.strip():
        raise InputError("empty prompt")
    tokens = (annotator or default_annotator())(prompt)
    validate_annotations(tokens)
    return tokens


def parse_prompt(prompt: str, annotator: Annotator | None = None) -> ObjectGraph:
    return extract_object_graph(annotate(prompt, annotator))

