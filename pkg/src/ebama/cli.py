"""Command-line entry point: ``ebama {parse,generate,evaluate,ablate,edit}``.

Settings resolve as flags > ``--config`` JSON file > built-in defaults.
Every run writes ``manifest.json`` into its output directory; passing that
manifest back through ``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .energy import Ablations, EnergyKind, GuidanceHyperparams
from .errors import ConfigurationError, EbamaError, InputError
from .eval_harness import (
    CATEGORIES,
    BenchmarkPrompt,
    BenchmarkReport,
    FixtureCaptioner,
    HashingScorer,
    default_seeds,
    resolve_dataset,
    run_benchmark,
)
from .guidance import SamplerConfig, guided_sample, save_image
from .prompt_graph import annotate, default_annotator, extend_with_words, extract_object_graph

log = logging.getLogger("ebama")

LAMBDA_BY_CATEGORY = {
    "animal-animal": 0.5,
    "animal-object": 0.25,
    "object-object": 0.5,
    "dvmp": 0.5,
    "abc6k": 0.5,
}
SWEEPS = ("lambda", "repulsion", "energy", "objcond", "update_steps", "alpha")


@dataclass
class RunConfig:
    command: str = "generate"
    prompts: list[str] = field(default_factory=list)
    datasets: list[str] = field(default_factory=list)
    category: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    images_per_prompt: int | None = None
    lam: float | None = None
    alpha: float = 20.0
    steps: int = 50
    update_steps: int = 25
    guidance_scale: float = 7.5
    energy: str = "cosine"
    no_repulsion: bool = False
    no_objcond: bool = False
    no_binding: bool = False
    external_modifiers: list[str] = field(default_factory=list)
    adapter: str = "toy"
    adapter_seed: int = 0
    model: str = "CompVis/stable-diffusion-v1-4"
    scorer: str = "fixture"
    captions: int = 1
    annotator: str = "auto"
    out: str = "runs/latest"
    sweep: str | None = None
    values: list[str] = field(default_factory=list)
    source: str | None = None
    target: str | None = None
    mode: str = "word_swap"
    cross_replace: float = 0.8
    self_replace: float = 0.4
    reweight_factor: float = 1.0
    reweight_words: list[str] = field(default_factory=list)

    def lam_for(self, category: str | None) -> float:
        if self.lam is not None:
            return self.lam
        return LAMBDA_BY_CATEGORY.get(category or "", 0.5)

    def hyper(self, category: str | None = None, **override) -> GuidanceHyperparams:
        values = {
            "alpha": self.alpha,
            "lam": self.lam_for(category),
            "total_steps": self.steps,
            "update_steps": self.update_steps,
            "guidance_scale": self.guidance_scale,
            "energy": EnergyKind.parse(self.energy),
            "ablations": Ablations(self.no_repulsion, self.no_objcond, self.no_binding),
        }
        values.update(override)
        return GuidanceHyperparams(**values)

    def sampler(self, seed: int) -> SamplerConfig:
        return SamplerConfig(self.steps, self.guidance_scale, seed)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


CONFIG_KEYS = {f.name for f in fields(RunConfig)}
ALIASES = {"lambda": "lam", "seed": "seeds", "prompt": "prompts", "dataset": "datasets"}


def load_config_file(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]  # a run manifest
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    out = {}
    for key, value in data.items():
        key = ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"unknown config key {key!r} in {path}")
        if key in {"seeds", "prompts", "datasets", "values", "external_modifiers",
                   "reweight_words"} and not isinstance(value, list):
            value = [value]
        out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(load_config_file(args.config))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None and v is not False:
            values[key] = v
    values["command"] = args.command
    cfg = RunConfig(**values)
    if cfg.category is not None and cfg.category not in CATEGORIES:
        raise InputError(f"category must be one of {CATEGORIES}")
    try:
        EnergyKind.parse(cfg.energy)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return cfg


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _csv_floats(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _seed_list(text: str) -> list[int]:
    """``0,1,5`` or a range ``0-63``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if re.fullmatch(r"\d+-\d+", part):
            lo, hi = map(int, part.split("-"))
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with run settings (or a previous manifest.json)")
    common.add_argument("--out", help="output directory for this run")
    common.add_argument("--annotator", choices=["auto", "fixture", "spacy", "lexicon"])
    common.add_argument("-v", "--verbose", action="store_true")

    gen = argparse.ArgumentParser(add_help=False)
    seeds = gen.add_mutually_exclusive_group()
    seeds.add_argument("--seed", dest="seeds", type=lambda s: [int(s)], help="single seed")
    seeds.add_argument("--seeds", dest="seeds", type=_seed_list, help="e.g. 0,1,2 or 0-63")
    gen.add_argument("--lambda", dest="lam", type=float, help="intensity weight (default per category)")
    gen.add_argument("--alpha", type=float, help="latent step size (default 20)")
    gen.add_argument("--steps", type=int, help="DDIM steps (default 50)")
    gen.add_argument("--update-steps", dest="update_steps", type=int,
                     help="steps that receive a latent update (default 25)")
    gen.add_argument("--guidance-scale", dest="guidance_scale", type=float, help="default 7.5")
    gen.add_argument("--energy", choices=["cosine", "kl"])
    gen.add_argument("--no-repulsion", dest="no_repulsion", action="store_true")
    gen.add_argument("--no-objcond", dest="no_objcond", action="store_true")
    gen.add_argument("--no-binding", dest="no_binding", action="store_true")
    gen.add_argument("--external-modifiers", dest="external_modifiers", nargs="+", metavar="WORD")
    gen.add_argument("--category", choices=CATEGORIES)
    gen.add_argument("--adapter", choices=["real", "toy"])
    gen.add_argument("--adapter-seed", dest="adapter_seed", type=int, help="toy weight seed")
    gen.add_argument("--model", help="diffusers model id for --adapter real")

    bench = argparse.ArgumentParser(add_help=False)
    bench.add_argument("--dataset", dest="datasets", action="append",
                       help="ane:<category>, dvmp:<count>, <category>=<file> or <file>; repeatable")
    bench.add_argument("--images-per-prompt", dest="images_per_prompt", type=int)
    bench.add_argument("--scorer", choices=["real", "fixture"])
    bench.add_argument("--captions", type=int, help="captions per image for T-C similarity")

    parser = argparse.ArgumentParser(prog="ebama", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", parents=[common], help="print the object graph of a prompt")
    p.add_argument("--prompt", dest="prompts", action="append", required=True)
    p.add_argument("--external-modifiers", dest="external_modifiers", nargs="+", metavar="WORD")
    p.add_argument("--json", action="store_true", help="emit JSON records")

    p = sub.add_parser("generate", parents=[common, gen], help="guided generation")
    p.add_argument("--prompt", dest="prompts", action="append")
    p.add_argument("--dataset", dest="datasets", action="append")

    sub.add_parser("evaluate", parents=[common, gen, bench], help="benchmark metrics")

    p = sub.add_parser("ablate", parents=[common, gen, bench], help="hyperparameter sweeps")
    p.add_argument("--sweep", choices=SWEEPS)
    p.add_argument("--values", type=_csv_floats, help="comma-separated sweep values")

    p = sub.add_parser("edit", parents=[common, gen], help="attention-injection editing")
    p.add_argument("--source", help="source prompt")
    p.add_argument("--target", help="edited prompt")
    p.add_argument("--mode", choices=["word_swap", "add_phrase", "reweight"])
    p.add_argument("--cross-replace", dest="cross_replace", type=float)
    p.add_argument("--self-replace", dest="self_replace", type=float)
    p.add_argument("--reweight-factor", dest="reweight_factor", type=float)
    p.add_argument("--reweight-words", dest="reweight_words", nargs="+")
    return parser


# --------------------------------------------------------------------------
# runtime helpers
# --------------------------------------------------------------------------


def make_adapter(cfg: RunConfig):
    if cfg.adapter == "toy":
        from .toy import ToyDenoiser

        return ToyDenoiser(seed=cfg.adapter_seed)
    if cfg.adapter == "real":
        from .sd_adapter import StableDiffusionAdapter

        return StableDiffusionAdapter(cfg.model)
    raise ConfigurationError(f"unknown adapter {cfg.adapter!r}; use 'toy' or 'real'")


def make_scorers(cfg: RunConfig):
    if cfg.scorer == "fixture":
        return HashingScorer(), FixtureCaptioner()
    if cfg.scorer == "real":
        from .eval_harness import BlipCaptioner, ClipScorer

        return ClipScorer(), BlipCaptioner()
    raise ConfigurationError(f"unknown scorer {cfg.scorer!r}; use 'fixture' or 'real'")


def slug(text: str, limit: int = 60) -> str:
    s = re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")
    return s[:limit] or "prompt"


class Run:
    """Output directory with images/, traces/ and a manifest."""

    def __init__(self, cfg: RunConfig, argv: Sequence[str]):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.images = self.root / "images"
        self.traces = self.root / "traces"
        for d in (self.images, self.traces):
            d.mkdir(parents=True, exist_ok=True)
        self.argv = list(argv)
        self.outputs: list[str] = []

    def manifest(self, **extra) -> None:
        doc = {
            "version": __version__,
            "argv": self.argv,
            "config": self.cfg.to_dict(),
            "outputs": self.outputs,
            **extra,
        }
        (self.root / "manifest.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


class Generator:
    """Annotate, guide and save one (prompt, seed) generation."""

    def __init__(self, cfg: RunConfig, run: Run, adapter, annotator, tag: str = "", **hyper_override):
        self.cfg, self.run, self.adapter, self.annotator = cfg, run, adapter, annotator
        self.tag = tag
        self.override = hyper_override

    def __call__(self, bp: BenchmarkPrompt, seed: int):
        tokens = annotate(bp.text, self.annotator)
        graph = extract_object_graph(tokens)
        words = [t.text for t in tokens]
        category = bp.category if bp.category in LAMBDA_BY_CATEGORY else self.cfg.category
        hyper = self.cfg.hyper(category, **self.override)
        result = guided_sample(
            self.adapter, words, graph, self.cfg.sampler(seed), hyper,
            external_words=tuple(self.cfg.external_modifiers),
        )
        name = f"{self.tag}{slug(bp.text)}_s{seed}"
        path = self.run.images / f"{name}.png"
        save_image(result.image, path, {
            "prompt": bp.text,
            "category": bp.category,
            "seed": seed,
            "graph": graph.to_record(),
            "hyperparameters": hyper.to_dict(),
            "external_modifiers": list(self.cfg.external_modifiers),
            "adapter": self.cfg.adapter,
            "version": __version__,
        })
        result.trace.write(self.run.traces / f"{name}.jsonl")
        rel = str(path.relative_to(self.run.root))
        self.run.outputs.append(rel)
        return result.image, graph, rel


def _prompts(cfg: RunConfig) -> list[BenchmarkPrompt]:
    items = [BenchmarkPrompt(p, cfg.category or "abc6k") for p in cfg.prompts]
    for spec in cfg.datasets:
        items.extend(resolve_dataset(spec))
    if not items:
        raise InputError("give at least one --prompt or --dataset")
    return items


def _images_per_prompt(cfg: RunConfig) -> int:
    n = cfg.images_per_prompt if cfg.images_per_prompt is not None else len(cfg.seeds)
    if n > len(cfg.seeds):
        # default to the shared list 0..n-1 when only a count is given
        if cfg.seeds == [0]:
            cfg.seeds = default_seeds(n)
        else:
            raise InputError(f"{len(cfg.seeds)} seeds given for {n} images per prompt")
    return n


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_parse(cfg: RunConfig, args, out) -> int:
    annotator = default_annotator(cfg.annotator)
    for prompt in cfg.prompts:
        tokens = annotate(prompt, annotator)
        graph = extract_object_graph(tokens)
        if cfg.external_modifiers:
            graph = extend_with_words(graph, cfg.external_modifiers)
        if args.json:
            print(json.dumps({"prompt": prompt, **graph.to_record()}, sort_keys=True), file=out)
        else:
            print(graph.describe(), file=out)
    return 0


def cmd_generate(cfg: RunConfig, argv, out) -> int:
    run = Run(cfg, argv)
    gen = Generator(cfg, run, make_adapter(cfg), default_annotator(cfg.annotator))
    for bp in _prompts(cfg):
        for seed in cfg.seeds:
            _, graph, rel = gen(bp, seed)
            print(f"{rel}\t{graph.describe()}", file=out)
    run.manifest(seeds=cfg.seeds)
    return 0


def cmd_evaluate(cfg: RunConfig, argv, out) -> int:
    if not cfg.datasets:
        raise InputError("evaluate needs --dataset")
    run = Run(cfg, argv)
    n = _images_per_prompt(cfg)
    scorer, captioner = make_scorers(cfg)
    gen = Generator(cfg, run, make_adapter(cfg), default_annotator(cfg.annotator))
    report = run_benchmark(_prompts(cfg), gen, scorer, captioner, cfg.seeds, n,
                           method="ours", n_captions=cfg.captions)
    report.write(run.root)
    run.manifest(seeds=report.seeds)
    out.write(report.summary_markdown())
    return 0


def sweep_settings(name: str, values: Sequence[str]) -> list[tuple[str, dict]]:
    """Label and hyperparameter overrides for each sweep value."""
    if not values:
        raise InputError("--values is required with --sweep")

    def flag(v: str) -> bool:
        v = v.lower()
        if v in {"on", "true", "1", "yes"}:
            return True
        if v in {"off", "false", "0", "no"}:
            return False
        raise InputError(f"expected on/off, got {v!r}")

    out = []
    for v in values:
        try:
            if name == "lambda":
                out.append((f"lambda={float(v):g}", {"lam": float(v)}))
            elif name == "alpha":
                out.append((f"alpha={float(v):g}", {"alpha": float(v)}))
            elif name == "update_steps":
                out.append((f"update_steps={int(v)}", {"update_steps": int(v)}))
            elif name == "energy":
                kind = EnergyKind.parse(v)
                short = "kl" if kind is EnergyKind.NEG_AVG_KL else kind.value
                out.append((f"energy={short}", {"energy": kind}))
            elif name in {"repulsion", "objcond"}:
                out.append((f"{name}={'on' if flag(v) else 'off'}", {name: flag(v)}))
            else:
                raise InputError(f"unknown sweep {name!r}; choose from {SWEEPS}")
        except ValueError as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"bad value {v!r} for sweep {name}: {exc}") from exc
    return out


def cmd_ablate(cfg: RunConfig, argv, out) -> int:
    if cfg.sweep is None:
        raise InputError("ablate needs --sweep")
    if not cfg.datasets:
        raise InputError("ablate needs --dataset")
    settings = sweep_settings(cfg.sweep, cfg.values)
    run = Run(cfg, argv)
    n = _images_per_prompt(cfg)
    scorer, captioner = make_scorers(cfg)
    adapter = make_adapter(cfg)
    annotator = default_annotator(cfg.annotator)
    prompts = _prompts(cfg)
    report = BenchmarkReport()
    for label, override in settings:
        ablations = Ablations(
            no_repulsion=not override.pop("repulsion", not cfg.no_repulsion),
            no_object_conditioning=not override.pop("objcond", not cfg.no_objcond),
            no_binding=cfg.no_binding,
        )
        gen = Generator(cfg, run, adapter, annotator, tag=f"{slug(label)}__",
                        ablations=ablations, **override)
        if "update_steps" in override and override["update_steps"] > cfg.steps:
            raise InputError(f"update_steps {override['update_steps']} exceeds --steps {cfg.steps}")
        run_benchmark(prompts, gen, scorer, captioner, cfg.seeds, n,
                      method=label, n_captions=cfg.captions, report=report)
    report.write(run.root)
    run.manifest(seeds=report.seeds, sweep=[label for label, _ in settings])
    out.write(report.summary_markdown())
    return 0


def cmd_edit(cfg: RunConfig, argv, out) -> int:
    from .editing import EditSpec, edit

    if not cfg.source or not cfg.target:
        raise InputError("edit needs --source and --target")
    spec = EditSpec(cfg.source, cfg.target, cfg.mode, cfg.reweight_factor,
                    tuple(cfg.reweight_words), cfg.cross_replace, cfg.self_replace)
    run = Run(cfg, argv)
    adapter = make_adapter(cfg)
    annotator = default_annotator(cfg.annotator)
    for seed in cfg.seeds:
        result = edit(adapter, spec, cfg.sampler(seed), cfg.hyper(cfg.category), annotator)
        for kind, res, prompt in (("original", result.original, spec.source_prompt),
                                  ("edited", result.edited, spec.edited_prompt)):
            path = run.images / f"{kind}_s{seed}.png"
            save_image(res.image, path, {
                "prompt": prompt, "seed": seed, "edit": spec.__dict__,
                "hyperparameters": cfg.hyper(cfg.category).to_dict(), "version": __version__,
            })
            res.trace.write(run.traces / f"{kind}_s{seed}.jsonl")
            run.outputs.append(str(path.relative_to(run.root)))
            print(path.relative_to(run.root), file=out)
    run.manifest(seeds=cfg.seeds)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "edit": cmd_edit,
}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "parse":
            return cmd_parse(cfg, args, out)
        return COMMANDS[args.command](cfg, argv, out)
    except EbamaError as exc:
        print(f"ebama {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # malformed config values
        print(f"ebama {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"ebama {args.command}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
