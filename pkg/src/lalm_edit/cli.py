"""Command-line driver: gen -> train -> trace -> edit -> eval -> report.

Every command reads a flat ``key = value`` config (see ``RunConfig``) and
writes its artifacts under the output directory.  Exit codes: 0 success,
1 runtime error, 2 usage error.  ``LALM_EDIT_THREADS`` sets the torch
thread count.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .edit import (
    STRATEGIES,
    EditHyper,
    EditRequest,
    MultiLayerEditor,
    edit_sequential_cross_modal,
    edit_single_layer,
    finetune_baseline,
    request_hash,
)
from .evaluate import SuiteScores, aggregate, score_suite, table_csv
from .model import MODALITIES, SiteError, SiteId, ToyLALM, check_site, load_checkpoint, save_checkpoint, write_params
from .trace import (
    TRACE_KINDS,
    AIEProfile,
    estimate_sigma,
    plot_profile,
    rank_edit_sites,
    save_svg,
    trace_facts,
)
from .train import accuracy, filter_known, train

log = logging.getLogger("lalm_edit")

THREADS_ENV = "LALM_EDIT_THREADS"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on.  ``out`` is where artifacts go and is
    not part of the fingerprint."""

    seed: int = 7
    # corpus
    n_subjects: int = 96
    n_relations: int = 3
    n_objects: int = 24
    templates_per_relation: int = 3
    n_neutral: int = 32
    # model
    d_audio: int = 32
    d_text: int = 48
    audio_layers: int = 6
    text_layers: int = 8
    heads: int = 4
    frames_per_word: int = 4
    # trainer
    lr: float = 1e-3
    max_epochs: int = 300
    target_accuracy: float = 0.95
    batch_size: int = 32
    # tracer; window < 0 means the per-module default
    multiplier: float = 3.0
    window: int = -1
    noise_seed: int = 0
    n_trace: int = 50
    span_wide: bool = False
    # editor and evaluation; empty sites come from the trace ranking
    sample_seed: int = 0
    n_eval: int = 50
    preset: str = "desk"
    n_protected: int = 16
    multi_batch: int = 10
    multi_layers: int = 3
    strategies: str = "all"
    audio_site: str = ""
    text_site: str = ""
    out: str = "run"

    def __post_init__(self):
        positive = ("n_subjects", "n_relations", "n_objects", "templates_per_relation", "d_audio", "d_text",
                    "audio_layers", "text_layers", "heads", "frames_per_word", "max_epochs", "batch_size",
                    "n_trace", "n_eval", "n_protected", "multi_batch", "multi_layers")
        for name in positive:
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.lr <= 0 or self.multiplier < 0:
            raise UsageError("lr must be > 0 and multiplier >= 0")
        if not 0 < self.target_accuracy <= 1:
            raise UsageError("target_accuracy must be in (0, 1]")
        if self.preset not in ("desk", "standard"):
            raise UsageError(f"unknown preset {self.preset!r}")
        for name in self.strategy_list():
            if name not in STRATEGIES:
                raise UsageError(f"unknown strategy {name!r}")
        for text in (self.audio_site, self.text_site):
            if text:
                parse_site(text)

    def strategy_list(self) -> tuple[str, ...]:
        if self.strategies == "all":
            return STRATEGIES
        return tuple(s.strip() for s in self.strategies.split(",") if s.strip())

    def payload(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out")
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.payload(), sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self, corpus: D.FactCorpus):
        return D.config_for(
            corpus, d_audio=self.d_audio, d_text=self.d_text, audio_layers=self.audio_layers,
            text_layers=self.text_layers, heads=self.heads, frames_per_word=self.frames_per_word, seed=self.seed,
        )

    @property
    def root(self) -> Path:
        return Path(self.out)


def _coerce(field, text: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    try:
        if kind == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise UsageError(f"bad value for {field.name}: {text!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = {f.name: f for f in fields(RunConfig)}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise UsageError(f"config line {n}: expected key = value")
        if key not in known:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(known[key], value)
    return out


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def parse_site(text: str) -> SiteId:
    try:
        site = SiteId.parse(text)
    except (ValueError, TypeError):
        raise UsageError(f"bad site {text!r}; expected MOD:LAYER:KIND") from None
    if site.modality not in MODALITIES or site.kind != "mlp":
        raise UsageError(f"edit sites must be audio/text MLP sites, got {text!r}")
    return site


# --------------------------------------------------------------------- artifacts


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `{stage}` first")
    return path


ARTIFACTS = {
    "corpus": "corpus/corpus.json",
    "checkpoint": "model.ckpt",
    "train_report": "train_report.json",
    "aie_csv": "trace/aie.csv",
    "aie_json": "trace/aie.json",
    "sites": "trace/sites.json",
    "edit_scores": "edits/scores.json",
    "table": "eval/table.csv",
    "metrics": "eval/metrics.json",
}


def load_corpus(cfg: RunConfig) -> D.FactCorpus:
    return D.FactCorpus.load(_require(cfg.root / ARTIFACTS["corpus"], "gen"))


def load_model(cfg: RunConfig) -> ToyLALM:
    return load_checkpoint(_require(cfg.root / ARTIFACTS["checkpoint"], "train"))


def eval_facts(cfg: RunConfig, model: ToyLALM, corpus: D.FactCorpus, n: int | None = None):
    """A seeded sample of known facts and the full known set it came from.

    Tracing and editing draw from the same stream, so with ``n_trace ==
    n_eval`` the traced facts are the edited ones.
    """
    known = filter_known(model, corpus)
    if not known:
        raise RuntimeError("no known facts after filtering")
    n = cfg.n_eval if n is None else n
    rng = np.random.default_rng(cfg.sample_seed)
    idx = sorted(rng.choice(len(known), min(n, len(known)), replace=False))
    return [known[i] for i in idx], known


# --------------------------------------------------------------------- commands


def cmd_gen(cfg: RunConfig) -> list[Path]:
    corpus = D.generate_fact_corpus(
        n_subjects=cfg.n_subjects, n_relations=cfg.n_relations, n_objects=cfg.n_objects,
        templates_per_relation=cfg.templates_per_relation, seed=cfg.seed, n_neutral=cfg.n_neutral,
    )
    model_cfg = cfg.model_config(corpus)
    root = cfg.root / "corpus"
    (root / "prompts").mkdir(parents=True, exist_ok=True)
    corpus.save(root / "corpus.json")
    paths = [root / "corpus.json"]
    for i, f in enumerate(corpus.facts):
        p = root / "prompts" / f"fact_{i:04d}.bin"
        D.write_prompt(p, corpus.render_fact(f, model_cfg))
        paths.append(p)
    log.info("gen: %d facts, vocab %d", len(corpus.facts), corpus.vocab_size)
    return paths


def cmd_train(cfg: RunConfig) -> dict:
    corpus = load_corpus(cfg)
    ckpt = cfg.root / ARTIFACTS["checkpoint"]
    report_path = cfg.root / ARTIFACTS["train_report"]
    if ckpt.exists() and report_path.exists():
        model = load_checkpoint(ckpt)
        if accuracy(model, corpus) >= cfg.target_accuracy:
            log.info("train: checkpoint already at target accuracy")
            return _read_json(report_path)
    model = ToyLALM(cfg.model_config(corpus))
    report = train(model, corpus, lr=cfg.lr, max_epochs=cfg.max_epochs, target_accuracy=cfg.target_accuracy,
                   seed=cfg.seed, batch_size=cfg.batch_size)
    save_checkpoint(model, ckpt)
    _write_json(report_path, report.to_json())
    log.info("train: %d epochs, accuracy %.3f", report.epochs_run, report.final_accuracy)
    return report.to_json()


def cmd_trace(cfg: RunConfig) -> AIEProfile:
    corpus = load_corpus(cfg)
    model = load_model(cfg)
    facts, known = eval_facts(cfg, model, corpus, cfg.n_trace)
    sigma = estimate_sigma(model, known, corpus)
    window = None if cfg.window < 0 else cfg.window
    profile, _ = trace_facts(model, corpus, facts, sigma=sigma, multiplier=cfg.multiplier, seed=cfg.noise_seed,
                             window=window, span_wide=cfg.span_wide)
    root = cfg.root / "trace"
    root.mkdir(parents=True, exist_ok=True)
    (root / "aie.csv").write_text(profile.to_csv())
    _write_json(root / "aie.json", profile.to_json())
    ranking = {
        "audio": rank_edit_sites(profile, "audio", "mlp", "subj_first", top_k=min(cfg.multi_layers, cfg.audio_layers)),
        "text": rank_edit_sites(profile, "text", "mlp", "subj_last", top_k=min(cfg.multi_layers, cfg.text_layers)),
    }
    _write_json(root / "sites.json", {
        "sigma": sigma, "n_known": len(known), "n_traced": len(facts),
        "p_clean": profile.p_clean, "p_corrupt": profile.p_corrupt, "mlp_ranking": ranking,
    })
    for kind in TRACE_KINDS:
        fig = plot_profile(profile, kind, cfg.audio_layers, cfg.text_layers)
        save_svg(fig, root / f"aie_{kind}.svg")
        import matplotlib.pyplot as plt

        plt.close(fig)
    log.info("trace: p_clean %.3f p_corrupt %.3f", profile.p_clean, profile.p_corrupt)
    return profile


def edit_sites(cfg: RunConfig) -> dict[str, list[SiteId]]:
    """Ranked MLP sites per modality: the configured site first (if any),
    then the trace ranking."""
    path = cfg.root / ARTIFACTS["sites"]
    ranking = _read_json(path)["mlp_ranking"] if path.exists() else None
    out = {}
    for modality, pos, override in (("audio", "subj_first", cfg.audio_site), ("text", "subj_last", cfg.text_site)):
        if override:
            site = parse_site(override)
            if site.modality != modality:
                raise UsageError(f"{modality} site has modality {site.modality}")
            site = site if site.position is not None else site.at(pos)
            rest = [SiteId(modality, l, "mlp", site.position) for l in (ranking or {}).get(modality, []) if l != site.layer]
            out[modality] = [site, *rest][: cfg.multi_layers]
        elif ranking is None:
            raise FileNotFoundError(f"{path} missing; run `trace` or pass --site")
        else:
            out[modality] = [SiteId(modality, l, "mlp", pos) for l in ranking[modality]]
    return out


# (modality, method, strategy) rows of the results table
PLAN = (
    ("audio", "single", "single_audio"),
    ("audio", "multi", "multi_audio"),
    ("audio", "finetune", "finetune"),
    ("text", "single", "single_text"),
    ("text", "multi", "multi_text"),
    ("text", "finetune", "finetune"),
    ("cross_modal", "sequential", "seq_cross_modal"),
    ("cross_modal", "multi", "multi_cross_modal"),
    ("cross_modal", "finetune", "finetune"),
)


def _scores(model: ToyLALM, suites) -> list[dict]:
    return [dataclasses.asdict(score_suite(model, s)) for s in suites]


def run_plan_row(cfg, model, corpus, facts, suites, modality, strategy, sites) -> tuple[list[dict], dict]:
    a_site, t_site = sites["audio"][0], sites["text"][0]
    single = lambda mod: EditHyper.defaults(strategy, mod, preset=cfg.preset)
    per_edit, diag = [], {}
    if strategy.startswith("multi"):
        chosen = {"multi_audio": sites["audio"], "multi_text": sites["text"]}.get(strategy, sites["audio"] + sites["text"])
        editor = MultiLayerEditor(model, chosen, corpus.neutral_prompts(cfg.n_protected, model.config, seed=cfg.sample_seed))
        for i in range(0, len(facts), cfg.multi_batch):
            reqs = [EditRequest(f, s.edit_prompt, strategy) for f, s in zip(facts[i : i + cfg.multi_batch], suites[i : i + cfg.multi_batch])]
            diag = editor.apply(reqs).diagnostics
        # cumulative edits: score every fact on the final model
        return _scores(editor.model, suites), {"sites": [str(s) for s in chosen], "last_batch": diag}
    layers = {"audio": [a_site], "text": [t_site], "cross_modal": [a_site, t_site]}[modality]
    for f, s in zip(facts, suites):
        if strategy == "finetune":
            r = finetune_baseline(model, EditRequest(f, s.edit_prompt, "finetune"), layers)
        elif strategy == "seq_cross_modal":
            r = edit_sequential_cross_modal(model, EditRequest(
                f, s.edit_prompt, strategy, audio_site=a_site, text_site=t_site,
                hyper=single("audio"), text_hyper=single("text")))
        elif strategy == "single_audio":
            r = edit_single_layer(model, EditRequest(f, s.edit_prompt, strategy, audio_site=a_site, hyper=single("audio")))
        else:
            r = edit_single_layer(model, EditRequest(f, s.edit_prompt, strategy, text_site=t_site, hyper=single("text")))
        per_edit.append(dataclasses.asdict(score_suite(r.model, s)))
    return per_edit, {"sites": [str(s) for s in layers]}


def cmd_edit(cfg: RunConfig, request_file: str | None = None, dump_deltas: bool = False) -> dict:
    corpus = load_corpus(cfg)
    model = load_model(cfg)
    if request_file is not None:
        return edit_from_request(cfg, model, corpus, Path(request_file), dump_deltas)
    before = model.checksum()
    sites = edit_sites(cfg)
    facts, known = eval_facts(cfg, model, corpus)
    suites = [D.make_eval_suite(f, corpus, model.config, seed=cfg.sample_seed, pool=known) for f in facts]
    rows = [{"modality": "none", "method": "baseline", "strategy": "none", "per_edit": _scores(model, suites), "diagnostics": {}}]
    wanted = cfg.strategy_list()
    for modality, method, strategy in PLAN:
        if strategy not in wanted:
            continue
        t0 = time.perf_counter()
        per_edit, diag = run_plan_row(cfg, model, corpus, facts, suites, modality, strategy, sites)
        log.info("edit: %s/%s in %.1fs", modality, method, time.perf_counter() - t0)
        rows.append({"modality": modality, "method": method, "strategy": strategy, "per_edit": per_edit, "diagnostics": diag})
    if model.checksum() != before:
        raise RuntimeError("editing mutated the loaded model")
    out = {"fingerprint": cfg.fingerprint(), "facts": [f.to_json() for f in facts], "rows": rows}
    _write_json(cfg.root / ARTIFACTS["edit_scores"], out)
    return out


def edit_from_request(cfg: RunConfig, model: ToyLALM, corpus: D.FactCorpus, path: Path, dump_deltas: bool) -> dict:
    """One edit (or one multi-layer batch) described by a JSON request file.

    Keys: ``strategy``; ``fact`` (index into the corpus or a fact object) or
    ``facts`` (list, multi-layer only); optional ``audio_site``,
    ``text_site``, ``sites`` and ``hyper`` overrides.
    """
    try:
        req = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read request {path}: {e}") from None
    strategy = req.get("strategy")
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")

    def fact(item):
        if isinstance(item, int):
            return corpus.facts[item]
        return D.FactTriple.from_json(item)

    try:
        facts = [fact(x) for x in req["facts"]] if "facts" in req else [fact(req["fact"])]
        hyper = EditHyper.defaults(strategy, "text" if strategy == "single_text" else "audio", preset=cfg.preset, **req.get("hyper", {}))
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise UsageError(f"bad request: {e}") from None
    ranked = edit_sites(cfg) if not all(k in req for k in ("audio_site", "text_site")) and "sites" not in req else {}
    a_site = parse_site(req["audio_site"]) if "audio_site" in req else (ranked.get("audio") or [None])[0]
    t_site = parse_site(req["text_site"]) if "text_site" in req else (ranked.get("text") or [None])[0]
    for s in (a_site, t_site):
        if s is not None:
            check_site(model.config, s)
    handle = model.snapshot()
    before = model.checksum()
    prompts = [corpus.render_fact(f, model.config) for f in facts]
    if strategy.startswith("multi"):
        if "sites" in req:
            sites = [parse_site(s) for s in req["sites"]]
        else:
            sites = {"multi_audio": ranked["audio"], "multi_text": ranked["text"]}.get(strategy, ranked["audio"] + ranked["text"])
        editor = MultiLayerEditor(model, sites, corpus.neutral_prompts(cfg.n_protected, model.config, seed=cfg.sample_seed), hyper)
        result = editor.apply([EditRequest(f, p, strategy) for f, p in zip(facts, prompts)])
    else:
        r = EditRequest(facts[0], prompts[0], strategy, audio_site=a_site, text_site=t_site, hyper=hyper)
        if strategy == "finetune":
            result = finetune_baseline(model, r, [s for s in (a_site, t_site) if s is not None], hyper)
        elif strategy == "seq_cross_modal":
            result = edit_sequential_cross_modal(model, r)
        else:
            result = edit_single_layer(model, r)
    model.restore(handle)
    if model.checksum() != before:
        raise RuntimeError("snapshot restore failed")
    h = request_hash(req)
    out = result.to_json()
    out["request_hash"] = h
    root = cfg.root / "edits"
    _write_json(root / f"request_{h}.json", out)
    if dump_deltas:
        with open(root / f"request_{h}.deltas.bin", "wb") as f:
            write_params(f, model.config, result.deltas)
    return out


def cmd_eval(cfg: RunConfig) -> list[tuple[str, str, object]]:
    scores = _read_json(_require(cfg.root / ARTIFACTS["edit_scores"], "edit"))
    rows, metrics = [], []
    for row in scores["rows"]:
        per = [SuiteScores(**x) for x in row["per_edit"]]
        m = aggregate(per)
        rows.append((row["modality"], row["method"], m))
        metrics.append({
            "modality": row["modality"], "method": row["method"], "strategy": row["strategy"],
            **m.to_json(), "mean_p_target": float(np.mean([x.p_target for x in per])),
            "mean_p_true": float(np.mean([x.p_true for x in per])),
        })
    root = cfg.root / "eval"
    root.mkdir(parents=True, exist_ok=True)
    (root / "table.csv").write_text(table_csv(rows))
    _write_json(root / "metrics.json", {"fingerprint": cfg.fingerprint(), "rows": metrics, "orderings": orderings(metrics)})
    return rows


def orderings(metrics: list[dict]) -> dict:
    """Qualitative comparisons between strategies; None when a side is missing."""
    get = lambda mod, meth, key: next((r[key] for r in metrics if (r["modality"], r["method"]) == (mod, meth)), None)
    seq, single_a = get("cross_modal", "sequential", "mean_p_target"), get("audio", "single", "mean_p_target")
    out = {"seq_cross_modal_p_target_ge_single_audio": None if None in (seq, single_a) else bool(seq >= single_a)}
    for mod in ("audio", "text"):
        ft, single = get(mod, "finetune", "ns"), get(mod, "single", "ns")
        out[f"finetune_ns_lt_single_{mod}"] = None if None in (ft, single) else bool(ft < single)
    return out


def cmd_report(cfg: RunConfig) -> Path:
    root = cfg.root
    lines = ["# Run report", "", f"Config fingerprint: `{cfg.fingerprint()}`", "", "## Artifacts", "",
             "| artifact | path |", "|---|---|"]
    artifact_paths = dict(ARTIFACTS)
    artifact_paths.update({f"aie_{k}_svg": f"trace/aie_{k}.svg" for k in TRACE_KINDS})
    for name, rel in artifact_paths.items():
        lines.append(f"| {name} | {rel if (root / rel).exists() else 'not run'} |")
    lines += ["", "## Training", ""]
    tr = root / ARTIFACTS["train_report"]
    if tr.exists():
        rep = _read_json(tr)
        lines.append(f"epochs {rep['epochs_run']}, final accuracy {rep['final_accuracy']:.3f}")
    else:
        lines.append("not run")
    lines += ["", "## Tracing", ""]
    st = root / ARTIFACTS["sites"]
    if st.exists():
        s = _read_json(st)
        lines.append(f"sigma {s['sigma']:.4f}; mean p_clean {s['p_clean']:.3f}, p_corrupt {s['p_corrupt']:.3f}; "
                     f"MLP ranking audio {s['mlp_ranking']['audio']}, text {s['mlp_ranking']['text']}")
    else:
        lines.append("not run")
    lines += ["", "## Editing results", "", "| modality | method | score | ES | PS | NS |", "|---|---|---|---|---|---|"]
    mp = root / ARTIFACTS["metrics"]
    if mp.exists():
        met = _read_json(mp)
        done = {(r["modality"], r["method"]): r for r in met["rows"]}
        for mod, meth in [("none", "baseline")] + [(m, n) for m, n, _ in PLAN]:
            r = done.get((mod, meth))
            cells = [f"{r[k]:.2f}" for k in ("s", "es", "ps", "ns")] if r else ["not run"] * 4
            lines.append(f"| {mod} | {meth} | " + " | ".join(cells) + " |")
        lines += ["", "Orderings: " + ", ".join(f"{k}={v}" for k, v in met["orderings"].items())]
    else:
        lines.append("| not run | not run | not run | not run | not run | not run |")
    path = root / "report.md"
    path.write_text("\n".join(lines) + "\n")
    return path


COMMANDS = ("gen", "train", "trace", "edit", "eval", "report", "all")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lalm-edit", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--strategy", metavar="NAME", help="restrict edit to one strategy")
    p.add_argument("--site", metavar="MOD:LAYER:KIND", action="append", help="edit site override (repeatable)")
    p.add_argument("--window", type=int, metavar="N")
    p.add_argument("--multiplier", type=float, metavar="X")
    p.add_argument("--request", metavar="PATH", help="edit: JSON request file")
    p.add_argument("--dump-deltas", action="store_true", help="edit: also write deltas in checkpoint format")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    values = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out"] = args.out
    if args.strategy is not None:
        if args.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {args.strategy!r}; choose from {', '.join(STRATEGIES)}")
        values["strategies"] = args.strategy
    for text in args.site or []:
        site = parse_site(text)
        values[f"{site.modality}_site"] = text
    if args.window is not None:
        values["window"] = args.window
    if args.multiplier is not None:
        values["multiplier"] = args.multiplier
    return RunConfig(**values)


def run(cfg: RunConfig, command: str, request: str | None = None, dump_deltas: bool = False) -> None:
    cfg.root.mkdir(parents=True, exist_ok=True)
    (cfg.root / "config.txt").write_text(format_config(cfg))
    steps = ("gen", "train", "trace", "edit", "eval", "report") if command == "all" else (command,)
    for step in steps:
        if step == "edit":
            cmd_edit(cfg, request, dump_deltas)
        else:
            globals()[f"cmd_{step}"](cfg)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    try:
        cfg = resolve_config(args)
        run(cfg, args.command, args.request, args.dump_deltas)
    except UsageError as e:
        print(f"lalm-edit: usage error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, FileNotFoundError, ValueError, SiteError, OSError) as e:
        print(f"lalm-edit: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
