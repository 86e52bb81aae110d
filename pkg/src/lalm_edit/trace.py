"""Speech-aware causal tracing: clean, corrupted and restored runs.

Corruption adds Gaussian noise to the subject-span frames right after conv
layer 2.  A restoration run replays the corrupted forward but copies clean
activations back in at one position class over a window of layers.  The
indirect effect of a cell is ``P_restored(o) - P_corrupted(o)``.

All restoration cells for one prompt are evaluated in a single batched
forward; the clean reference and the corrupted baseline ride along in the
same batch so every value in a grid comes from one computation.
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import FactCorpus, FactTriple, SpokenPrompt
from .model import (
    MODALITIES,
    TRACE_KINDS,
    Hooks,
    Patch,
    SiteId,
    ToyLALM,
    check_site,
    prompt_tensors,
    site_positions,
)

POSITION_CLASSES = ("subj_first", "subj_last", "last")
_SIGMA_CACHE: dict[tuple, float] = {}


class DegenerateSigmaError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Subject-span corruption: eps ~ N(0, (multiplier * sigma)^2) per feature."""

    sigma: float
    span: tuple[int, int]
    multiplier: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DegenerateSigmaError("degenerate sigma")

    def sample(self, d: int):
        f0, f1 = self.span
        rng = np.random.default_rng([self.seed, f0, f1])
        eps = rng.standard_normal((f1 - f0 + 1, d)) * (self.multiplier * self.sigma)
        return self.span, eps

    @classmethod
    def for_prompt(cls, prompt: SpokenPrompt, sigma: float, multiplier: float = 3.0, seed: int = 0) -> "NoiseSpec":
        return cls(sigma=sigma, span=prompt.subject_frames, multiplier=multiplier, seed=seed)


def default_window(n_layers: int) -> int:
    return max(1, round(n_layers / 8))


# --------------------------------------------------------------------- sigma


def span_std(activations) -> float:
    """Pooled std over every feature of every frame in the given arrays."""
    flat = np.concatenate([np.asarray(a).ravel() for a in activations])
    if flat.size == 0:
        raise ValueError("empty subject spans")
    if np.ptp(flat) == 0:
        # numpy leaves ~1e-16 of roundoff on constant input
        return 0.0
    return float(flat.std())


def subject_span_activations(model: ToyLALM, prompts: list[SpokenPrompt]) -> list[np.ndarray]:
    point = ("audio", 2, "conv")
    out = []
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault((p.n_frames, len(p.instruction)), []).append(i)
    acts = [None] * len(prompts)
    with torch.no_grad():
        for idx in groups.values():
            hooks = Hooks(capture={point})
            model.run(*prompt_tensors(prompts[i] for i in idx), hooks)
            for row, i in enumerate(idx):
                f0, f1 = prompts[i].subject_frames
                acts[i] = hooks.cache[point][row, f0 : f1 + 1].numpy()
    out.extend(acts)
    return out


def estimate_sigma(model: ToyLALM, facts: list[FactTriple], corpus: FactCorpus) -> float:
    """Corpus-level std of clean conv-2 activations over subject frames."""
    if not facts:
        raise ValueError("facts must be nonempty")
    key = (model.checksum(), corpus.seed, hash(tuple(facts)))
    if key not in _SIGMA_CACHE:
        prompts = [corpus.render_fact(f, model.config) for f in facts]
        _SIGMA_CACHE[key] = span_std(subject_span_activations(model, prompts))
    return _SIGMA_CACHE[key]


# --------------------------------------------------------------------- runs


def indirect_effect(p_restore: float, p_corrupt: float) -> float:
    return p_restore - p_corrupt


@dataclass(frozen=True)
class Cell:
    """One restoration: copy clean values at ``positions`` for every point in ``points``."""

    points: tuple[tuple[str, int, str], ...]
    positions: tuple[int, ...]


def window_points(config, site: SiteId, window: int) -> tuple:
    if window < 0:
        raise ValueError("window must be >= 0")
    n = config.n_layers(site.modality)
    lo, hi = max(0, site.layer - window), min(n - 1, site.layer + window)
    return tuple((site.modality, l, site.kind) for l in range(lo, hi + 1))


def _batched_runs(model: ToyLALM, prompt: SpokenPrompt, noise, cells: list[Cell], target: int):
    """Returns (p_clean, p_corrupt, [p_cell...]) from one batched forward."""
    T = prompt.n_frames
    lengths = {"audio": T, "text": T + len(prompt.instruction)}
    points = sorted({pt for c in cells for pt in c.points})
    clean = Hooks(capture=set(points))
    frames, instr = prompt_tensors([prompt])
    with torch.no_grad():
        p_clean_ref = model.run(frames, instr, clean)[0].softmax(-1)[target].item()

    B = len(cells) + 2
    hooks = Hooks()
    if noise is not None:
        (f0, f1), eps = noise.sample(model.config.d_audio)
        full = torch.zeros(B, T, model.config.d_audio, dtype=torch.float64)
        full[1:, f0 : f1 + 1] = torch.as_tensor(eps)
        hooks.noise = full
    for pt in points:
        mask = torch.zeros(B, lengths[pt[0]], dtype=torch.bool)
        for b, c in enumerate(cells, start=2):
            if pt in c.points:
                mask[b, list(c.positions)] = True
        hooks.patches[pt] = [Patch(mask, clean.cache[pt])]
    with torch.no_grad():
        probs = model.run(frames.expand(B, -1, -1), instr.expand(B, -1), hooks).softmax(-1)[:, target].numpy()
    assert abs(probs[0] - p_clean_ref) < 1e-9
    return float(probs[0]), float(probs[1]), probs[2:].astype(float).tolist()


def corrupted_run(model: ToyLALM, prompt: SpokenPrompt, noise: NoiseSpec, target: int):
    """Returns ``(p_corrupt, states)``; states maps every hidden/mlp/attn
    SiteId (all positions) to its corrupted ``[T, d]`` activations."""
    if tuple(noise.span) != tuple(prompt.subject_frames):
        raise ValueError("noise span does not match the prompt's subject frames")
    points = [(m, l, k) for m in MODALITIES for l in range(model.config.n_layers(m)) for k in TRACE_KINDS]
    points.append(("audio", 2, "conv"))
    hooks = Hooks(capture=set(points))
    (f0, f1), eps = noise.sample(model.config.d_audio)
    full = np.zeros((prompt.n_frames, model.config.d_audio))
    full[f0 : f1 + 1] = eps
    hooks.noise = torch.as_tensor(full)[None]
    with torch.no_grad():
        p = model.run(*prompt_tensors([prompt]), hooks)[0].softmax(-1)[target].item()
    states = {SiteId(*pt): hooks.cache[pt][0].numpy() for pt in points}
    return p, states


def restoration_run(
    model: ToyLALM,
    prompt: SpokenPrompt,
    noise: NoiseSpec | None,
    site: SiteId,
    window: int,
    target: int,
    span_wide: bool = False,
) -> float:
    """Corrupted forward with clean values restored at ``site``'s positions
    for layers ``[layer - window, layer + window]`` clipped to the module.

    ``span_wide`` restores every subject frame instead of the site's own
    position class.
    """
    check_site(model.config, site)
    positions = site_positions(prompt, site.at("subject") if span_wide else site)
    points = (site.point,) if site.kind == "conv" else window_points(model.config, site, window)
    _, _, (p,) = _batched_runs(model, prompt, noise, [Cell(points, tuple(positions))], target)
    return p


# --------------------------------------------------------------------- grids


@dataclass
class TraceGrid:
    values: dict[tuple[str, str, int, str], float]
    p_clean: float
    p_corrupt: float

    def cells(self):
        return sorted(self.values)


def trace_grid(
    model: ToyLALM,
    prompt: SpokenPrompt,
    noise: NoiseSpec | None,
    target: int,
    kinds=TRACE_KINDS,
    window: int | dict | None = None,
    positions=POSITION_CLASSES,
    span_wide: bool = False,
) -> TraceGrid:
    """IE for every (kind, modality, layer, position class) cell.

    ``window`` may be an int for both modules, a ``{modality: int}`` dict, or
    None for ``max(1, round(L / 8))`` per module.
    """
    config = model.config
    keys, cells = [], []
    for kind in kinds:
        for modality in MODALITIES:
            n = config.n_layers(modality)
            if window is None:
                w = default_window(n)
            elif isinstance(window, dict):
                w = window[modality]
            else:
                w = window
            for layer in range(n):
                for pos in positions:
                    site = SiteId(modality, layer, kind, pos)
                    span = site.at("subject") if span_wide else site
                    keys.append((kind, modality, layer, pos))
                    cells.append(Cell(window_points(config, site, w), tuple(site_positions(prompt, span))))
    p_clean, p_corrupt, ps = _batched_runs(model, prompt, noise, cells, target)
    values = {k: indirect_effect(p, p_corrupt) for k, p in zip(keys, ps)}
    return TraceGrid(values=values, p_clean=p_clean, p_corrupt=p_corrupt)


@dataclass
class AIEProfile:
    values: dict[tuple[str, str, int, str], float]
    n: int
    p_clean: float = float("nan")
    p_corrupt: float = float("nan")

    def series(self, kind: str, modality: str, position_class: str) -> list[float]:
        layers = sorted(l for (k, m, l, p) in self.values if (k, m, p) == (kind, modality, position_class))
        return [self.values[(kind, modality, l, position_class)] for l in layers]

    @property
    def position_classes(self) -> list[str]:
        seen = []
        for k in self.values:
            if k[3] not in seen:
                seen.append(k[3])
        return seen

    def to_rows(self) -> list[tuple]:
        return [(k, m, l, p, v, self.n) for (k, m, l, p), v in sorted(self.values.items(), key=_row_order)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "modality", "layer", "position_class", "value", "n"])
        for k, m, l, p, v, n in self.to_rows():
            w.writerow([k, m, l, p, repr(float(v)), n])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "p_clean": self.p_clean,
            "p_corrupt": self.p_corrupt,
            "cells": [
                {"kind": k, "modality": m, "layer": l, "position_class": p, "value": v}
                for k, m, l, p, v, _ in self.to_rows()
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AIEProfile":
        values = {(c["kind"], c["modality"], c["layer"], c["position_class"]): c["value"] for c in d["cells"]}
        return cls(values=values, n=d["n"], p_clean=d["p_clean"], p_corrupt=d["p_corrupt"])


def _row_order(item):
    (k, m, l, p), _ = item
    return (TRACE_KINDS.index(k) if k in TRACE_KINDS else 9, MODALITIES.index(m), l, p)


def average_ie(grids: list[TraceGrid]) -> AIEProfile:
    if not grids:
        raise ValueError("grids must be nonempty")
    cells = grids[0].cells()
    for g in grids[1:]:
        if g.cells() != cells:
            raise ValueError("trace grids have mismatched cells")
    values = {c: float(np.mean([g.values[c] for g in grids])) for c in cells}
    return AIEProfile(
        values=values,
        n=len(grids),
        p_clean=float(np.mean([g.p_clean for g in grids])),
        p_corrupt=float(np.mean([g.p_corrupt for g in grids])),
    )


def rank_edit_sites(profile: AIEProfile, modality: str, kind: str, position_class: str, top_k: int = 3) -> list[int]:
    """Layers by descending AIE; ties go to the lower layer."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    layers = sorted(l for (k, m, l, p) in profile.values if (k, m, p) == (kind, modality, position_class))
    if top_k > len(layers):
        warnings.warn(f"top_k={top_k} exceeds {len(layers)} layers; truncating", stacklevel=2)
    ranked = sorted(layers, key=lambda l: (-profile.values[(kind, modality, l, position_class)], l))
    return ranked[:top_k]


def trace_facts(
    model: ToyLALM,
    corpus: FactCorpus,
    facts: list[FactTriple],
    sigma: float | None = None,
    multiplier: float = 3.0,
    seed: int = 0,
    **grid_kw,
) -> tuple[AIEProfile, list[TraceGrid]]:
    """Trace every fact's edit prompt and average the grids."""
    if sigma is None:
        sigma = estimate_sigma(model, facts, corpus)
    grids = []
    for i, f in enumerate(facts):
        prompt = corpus.render_fact(f, model.config)
        noise = NoiseSpec.for_prompt(prompt, sigma, multiplier, seed=seed * 100003 + i)
        grids.append(trace_grid(model, prompt, noise, f.object_true, **grid_kw))
    return average_ie(grids), grids


def plot_profile(profile: AIEProfile, kind: str, n_audio: int, n_text: int):
    """Line chart of AIE against layer (audio layers, then text layers)."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.2))
    for pos in profile.position_classes:
        ys = profile.series(kind, "audio", pos) + profile.series(kind, "text", pos)
        ax.plot(range(len(ys)), ys, marker="o", ms=3, label=pos)
    ax.axvline(n_audio - 0.5, ls="--", color="grey")
    ax.set_xticks(range(n_audio + n_text))
    ax.set_xticklabels([f"a{i}" for i in range(n_audio)] + [f"t{i}" for i in range(n_text)], fontsize=7)
    ax.set_xlabel("layer")
    ax.set_ylabel("AIE")
    ax.set_title(f"{kind} (n={profile.n})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def save_svg(fig, path) -> None:
    import matplotlib

    with matplotlib.rc_context({"svg.hashsalt": "lalm-edit"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
