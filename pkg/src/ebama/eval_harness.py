"""Text-image alignment metrics and the benchmark runner.

Three scores per generated image:

* full similarity: cosine between the image and prompt embeddings;
* min similarity: the worst cosine over per-object sub-prompts;
* text-caption similarity: mean text-text cosine between the prompt and
  captions of the image.

Scorers and captioners are adapters. ``HashingScorer`` and
``FixtureCaptioner`` are deterministic stand-ins for CLIP and BLIP that
make reports byte-stable in tests; ``ClipScorer``/``BlipCaptioner`` load
the real models through ``transformers``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import random
import re
import zlib
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ConfigurationError, InputError
from .prompt_graph import ObjectGraph

CATEGORIES = ("animal-animal", "animal-object", "object-object", "dvmp", "abc6k")
METRICS = ("full_sim", "min_sim", "tc_sim")


class Scorer(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


class Captioner(Protocol):
    def caption(self, image: np.ndarray, n: int = 1) -> list[str]: ...


def _unit(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if norm == 0:
        raise InputError("cannot normalise a zero embedding")
    return v / norm


def cosine(u, v) -> float:
    return float(np.clip(_unit(u) @ _unit(v), -1.0, 1.0))


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def full_similarity(image, prompt: str, scorer: Scorer | None) -> float:
    if scorer is None:
        raise ConfigurationError("no image-text scorer configured")
    return cosine(scorer.embed_image(image), scorer.embed_text(prompt))


def min_similarity(image, subprompts: Sequence[str], scorer: Scorer | None) -> float:
    if not subprompts:
        raise InputError("min similarity needs at least one sub-prompt")
    if scorer is None:
        raise ConfigurationError("no image-text scorer configured")
    img = scorer.embed_image(image)
    return min(cosine(img, scorer.embed_text(p)) for p in subprompts)


def text_caption_similarity(
    image, prompt: str, captioner: Captioner | None, scorer: Scorer | None, n_captions: int = 1
) -> float:
    if captioner is None:
        raise ConfigurationError("no captioner configured")
    if scorer is None:
        raise ConfigurationError("no text scorer configured")
    captions = captioner.caption(image, n_captions)
    if not captions:
        raise InputError("captioner returned no captions")
    target = scorer.embed_text(prompt)
    return float(np.mean([cosine(target, scorer.embed_text(c)) for c in captions]))


def article_for(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def decompose_subprompts(prompt: str, graph: ObjectGraph) -> list[str]:
    """One "a/an <modifiers> <object>" phrase per object, modifiers in surface order."""
    if graph.degraded:
        raise InputError("cannot build sub-prompts for a prompt without objects")
    lowered = prompt.lower()
    phrases = []
    for s in graph.objects:
        parts = [graph.words[m] for m in sorted(graph.modifiers[s])] + [graph.words[s]]
        missing = [p for p in parts if p.lower() not in lowered]
        if missing:
            raise InputError(f"graph words {missing} do not occur in {prompt!r}")
        phrases.append(f"{article_for(parts[0])} {' '.join(parts)}")
    return phrases


# --------------------------------------------------------------------------
# deterministic stand-in adapters
# --------------------------------------------------------------------------


class HashingScorer:
    """Bag-of-words text embeddings and pixel-statistics image embeddings.

    Text vectors sum seeded random word vectors, so prompts sharing words
    score higher. Images are projected through a fixed random matrix after
    pooling to 8x8. Deterministic across runs and platforms.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._proj = np.random.default_rng([seed, 7]).standard_normal((dim, 8 * 8 * 3)) / 13.9

    def _word(self, w: str) -> np.ndarray:
        key = zlib.crc32(w.encode("utf-8"))
        return np.random.default_rng([self.seed, key]).standard_normal(self.dim)

    def embed_text(self, text: str) -> np.ndarray:
        words = [w for w in re.findall(r"[a-z]+", text.lower()) if w not in {"a", "an", "the"}]
        if not words:
            words = ["<empty>"]
        return _unit(sum(self._word(w) for w in words))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64) / 255.0
        h, w = img.shape[:2]
        pooled = img[: h - h % 8, : w - w % 8].reshape(8, h // 8, 8, w // 8, -1).mean(axis=(1, 3))
        centred = pooled.ravel() - 0.5
        return _unit(self._proj @ centred + 1e-3)


class FixtureCaptioner:
    """Captions from a lookup keyed by image digest, else a digest-seeded template."""

    def __init__(self, table: dict[str, list[str]] | None = None, vocabulary=None):
        self.table = dict(table or {})
        self.vocabulary = list(vocabulary or ["cat", "dog", "crown", "apple", "bench", "car"])

    @staticmethod
    def digest(image: np.ndarray) -> str:
        return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()

    def caption(self, image: np.ndarray, n: int = 1) -> list[str]:
        key = self.digest(image)
        if key in self.table:
            return self.table[key][:n]
        rng = random.Random(key)
        return [
            f"a picture of a {rng.choice(self.vocabulary)} and a {rng.choice(self.vocabulary)}"
            for _ in range(n)
        ]


class ClipScorer:
    """CLIP image/text embeddings via ``transformers`` (downloads weights on first use)."""

    def __init__(self, model: str = "openai/clip-vit-base-patch16", device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ConfigurationError("CLIP scoring needs torch and transformers") from exc
        try:
            self.model = CLIPModel.from_pretrained(model).to(device).eval()
            self.processor = CLIPProcessor.from_pretrained(model)
        except OSError as exc:
            raise ConfigurationError(
                f"cannot load CLIP weights {model!r}; check network access or HF_HOME cache"
            ) from exc
        self.torch, self.device = torch, device

    def embed_text(self, text: str) -> np.ndarray:
        with self.torch.no_grad():
            batch = self.processor(text=[text], return_tensors="pt", padding=True).to(self.device)
            return _unit(self.model.get_text_features(**batch)[0].cpu().numpy())

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        with self.torch.no_grad():
            batch = self.processor(images=[image], return_tensors="pt").to(self.device)
            return _unit(self.model.get_image_features(**batch)[0].cpu().numpy())


class BlipCaptioner:
    def __init__(self, model: str = "Salesforce/blip-image-captioning-base", device: str = "cpu"):
        try:
            import torch
            from transformers import BlipForConditionalGeneration, BlipProcessor
        except ImportError as exc:
            raise ConfigurationError("BLIP captioning needs torch and transformers") from exc
        try:
            self.model = BlipForConditionalGeneration.from_pretrained(model).to(device).eval()
            self.processor = BlipProcessor.from_pretrained(model)
        except OSError as exc:
            raise ConfigurationError(f"cannot load BLIP weights {model!r}") from exc
        self.torch, self.device = torch, device

    def caption(self, image: np.ndarray, n: int = 1) -> list[str]:
        with self.torch.no_grad():
            batch = self.processor(images=image, return_tensors="pt").to(self.device)
            out = self.model.generate(
                **batch, num_beams=max(n, 1), num_return_sequences=n, do_sample=False
            )
        return [self.processor.decode(o, skip_special_tokens=True) for o in out]


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

ANIMALS = "cat dog bird bear lion horse elephant monkey frog turtle rabbit mouse".split()
OBJECTS = "backpack glasses crown suitcase chair balloon bow car bowl bench clock apple".split()
COLORS = "red orange yellow green blue purple pink brown gray black white".split()
DVMP_OBJECTS = ANIMALS + OBJECTS + "tomato strawberry camera guitar vase shirt".split()
DVMP_MODIFIERS = "modern spotted sliced wooden metal fluffy striped baby plastic velvet".split()


@dataclass(frozen=True)
class BenchmarkPrompt:
    text: str
    category: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InputError(f"unknown category {self.category!r}")


def load_prompts(path: str | Path, category: str) -> list[BenchmarkPrompt]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [BenchmarkPrompt(line.strip(), category) for line in lines if line.strip()]


def ane_prompts(category: str, seed: int = 0) -> list[BenchmarkPrompt]:
    """Template prompts in the animal/object pairing patterns.

    animal-animal: two unattributed animals; animal-object: an animal and a
    coloured object; object-object: two coloured objects. Colours are drawn
    with a seeded generator.
    """
    rng = random.Random(seed)
    if category == "animal-animal":
        texts = [f"a {a} and a {b}" for a, b in itertools.combinations(ANIMALS, 2)]
    elif category == "animal-object":
        texts = [f"a {a} and {_coloured(rng, o)}" for a in ANIMALS for o in OBJECTS]
    elif category == "object-object":
        texts = [
            f"{_coloured(rng, a)} and {_coloured(rng, b)}"
            for a, b in itertools.combinations(OBJECTS, 2)
        ]
    else:
        raise InputError(f"no template generator for {category!r}")
    return [BenchmarkPrompt(t, category) for t in texts]


def _coloured(rng, noun):
    color = rng.choice(COLORS)
    return f"{article_for(color)} {color} {noun}"


def dvmp_prompts(count: int, seed: int = 0) -> list[BenchmarkPrompt]:
    """Random multi-object prompts with colour and other modifiers."""
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        phrases = []
        for noun in rng.sample(DVMP_OBJECTS, rng.randint(1, 3)):
            mods = []
            if rng.random() < 0.7:
                mods.append(rng.choice(COLORS))
            if rng.random() < 0.5:
                mods.append(rng.choice(DVMP_MODIFIERS))
            words = mods + [noun]
            phrases.append(f"{article_for(words[0])} {' '.join(words)}")
        out.append(BenchmarkPrompt(" and ".join(phrases), "dvmp"))
    return out


def resolve_dataset(spec: str, seed: int = 0) -> list[BenchmarkPrompt]:
    """``ane:<category>``, ``dvmp:<count>``, or ``<category>=<path>`` / a bare path (abc6k)."""
    if spec.startswith("ane:"):
        return ane_prompts(spec[4:], seed)
    if spec.startswith("dvmp:"):
        return dvmp_prompts(int(spec[5:]), seed)
    if "=" in spec:
        category, path = spec.split("=", 1)
        return load_prompts(path, category)
    return load_prompts(spec, "abc6k")


# --------------------------------------------------------------------------
# runner and reports
# --------------------------------------------------------------------------


@dataclass
class BenchmarkRecord:
    prompt: str
    category: str
    seed: int
    image_path: str
    full_sim: float
    min_sim: float
    tc_sim: float
    method: str = "ours"


@dataclass
class BenchmarkReport:
    records: list[BenchmarkRecord] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def per_prompt(self) -> dict[tuple[str, str, str], dict[str, float]]:
        groups: dict[tuple[str, str, str], list[BenchmarkRecord]] = {}
        for r in self.records:
            groups.setdefault((r.method, r.category, r.prompt), []).append(r)
        return {k: {m: float(np.mean([getattr(r, m) for r in v])) for m in METRICS}
                for k, v in groups.items()}

    def summary(self) -> dict[str, dict[str, dict[str, float]]]:
        """``method -> category -> metric`` averages over per-prompt means."""
        out: dict[str, dict[str, dict[str, list[float]]]] = {}
        for (method, category, _), scores in self.per_prompt().items():
            cell = out.setdefault(method, {}).setdefault(category, {m: [] for m in METRICS})
            for m in METRICS:
                cell[m].append(scores[m])
        return {
            method: {cat: {m: float(np.mean(v)) for m, v in cells.items()}
                     for cat, cells in cats.items()}
            for method, cats in out.items()
        }

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "prompt", "category", "seed", "image_path", *METRICS])
        for r in self.records:
            w.writerow([r.method, r.prompt, r.category, r.seed, r.image_path,
                        *(f"{getattr(r, m):.6f}" for m in METRICS)])
        return buf.getvalue()

    def summary_table(self) -> str:
        """Method rows by (category x metric) columns, as a CSV string."""
        summary = self.summary()
        cats = [c for c in CATEGORIES if any(c in v for v in summary.values())]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [f"{c}/{m}" for c in cats for m in METRICS])
        for method in summary:
            row = [method]
            for c in cats:
                cell = summary[method].get(c)
                row += [f"{cell[m]:.3f}" if cell else "" for m in METRICS]
            w.writerow(row)
        return buf.getvalue()

    def summary_markdown(self) -> str:
        summary = self.summary()
        cats = [c for c in CATEGORIES if any(c in v for v in summary.values())]
        head = "| Method | " + " | ".join(f"{c} Full | {c} Min | {c} T-C" for c in cats) + " |"
        rule = "|---|" + "---|" * (3 * len(cats))
        rows = [head, rule]
        for method in summary:
            cells = []
            for c in cats:
                cell = summary[method].get(c)
                cells += [f"{cell[m]:.3f}" if cell else "" for m in METRICS]
            rows.append(f"| {method} | " + " | ".join(cells) + " |")
        return "\n".join(rows) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "records.csv").write_text(self.records_csv(), encoding="utf-8")
        (out / "summary.csv").write_text(self.summary_table(), encoding="utf-8")
        (out / "summary.md").write_text(self.summary_markdown(), encoding="utf-8")
        (out / "summary.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


GenerateFn = Callable[[BenchmarkPrompt, int], tuple[np.ndarray, ObjectGraph, str]]


def default_seeds(n: int = 64) -> list[int]:
    return list(range(n))


def run_benchmark(
    dataset: Iterable[BenchmarkPrompt],
    generate: GenerateFn,
    scorer: Scorer,
    captioner: Captioner,
    seeds: Sequence[int],
    images_per_prompt: int,
    method: str = "ours",
    n_captions: int = 1,
    report: BenchmarkReport | None = None,
) -> BenchmarkReport:
    """Score ``images_per_prompt`` generations per prompt with a shared seed list.

    ``generate(prompt, seed)`` returns ``(image, graph, image_path)``. Passing
    an existing ``report`` appends to it and enforces seed parity across the
    method configs sharing it.
    """
    if images_per_prompt < 0:
        raise InputError("images_per_prompt must be >= 0")
    if len(seeds) < images_per_prompt:
        raise InputError(f"{len(seeds)} seeds given for {images_per_prompt} images per prompt")
    use = list(seeds[:images_per_prompt])
    report = report if report is not None else BenchmarkReport(seeds=use)
    if report.records and report.seeds != use:
        raise InputError("seed lists differ between methods in one comparison run")
    report.seeds = use
    if images_per_prompt == 0:
        return report
    for bp in dataset:
        for seed in use:
            image, graph, path = generate(bp, seed)
            subs = decompose_subprompts(bp.text, graph) if not graph.degraded else [bp.text]
            report.records.append(
                BenchmarkRecord(
                    prompt=bp.text,
                    category=bp.category,
                    seed=seed,
                    image_path=path,
                    full_sim=full_similarity(image, bp.text, scorer),
                    min_sim=min_similarity(image, subs, scorer),
                    tc_sim=text_caption_similarity(image, bp.text, captioner, scorer, n_captions),
                    method=method,
                )
            )
    return report
