"""Weight editors: rank-one, sequential cross-modal, null-space multi-layer,
and a fine-tuning baseline.

Every editor works on a clone of the model it is given and returns the
edited clone in ``EditResult.model``; the input model is never touched.
Edited matrices are MLP down-projections, so under ``mlp_out = W @ key`` a
site's current value for a key is exactly ``W @ k``.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import FactTriple, SpokenPrompt
from .linalg import multi_edit_solve, null_space_projector, ridge_rank_one_update
from .model import (
    Hooks,
    LossSpec,
    SiteId,
    ToyLALM,
    check_site,
    collect_key,
    forward,
    key_positions,
    point_activations,
    prompt_tensors,
    shift_loss,
    site_values,
)

STRATEGIES = (
    "single_audio",
    "single_text",
    "seq_cross_modal",
    "multi_audio",
    "multi_text",
    "multi_cross_modal",
    "finetune",
)


class EditError(RuntimeError):
    pass


@dataclass
class EditHyper:
    v_steps: int = 10
    v_lr: float = 0.01
    weight_decay: float = 0.5
    ft_lr: float = 5e-4
    ft_steps: int = 25
    lam: float | None = None
    layer_weights: list[float] | None = None
    exact: bool = True
    edit_consistent: bool = True

    def __post_init__(self):
        if self.v_steps < 1:
            raise ValueError("v_steps must be >= 1")
        if self.layer_weights is not None and abs(sum(self.layer_weights) - 1.0) > 1e-9:
            raise ValueError("layer_weights must sum to 1")

    @classmethod
    def defaults(cls, strategy: str, modality: str = "audio", preset: str = "desk", **overrides) -> "EditHyper":
        """Per-strategy defaults.

        ``preset="standard"`` uses single-layer v_lr 0.01; ``"desk"`` uses 0.5,
        since 10 steps at 0.01 barely move a toy-width hidden state.
        Weight decay is 0.5 except for single-layer text edits (0.0).
        """
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        if strategy.startswith("multi"):
            base = dict(v_lr=0.5, weight_decay=0.5)
        else:
            base = dict(v_lr=PRESETS[preset], weight_decay=0.5 if modality == "audio" else 0.0)
        base.update(overrides)
        return cls(**base)


PRESETS = {"standard": 0.01, "desk": 0.5}


@dataclass
class EditRequest:
    fact: FactTriple
    prompt: SpokenPrompt
    strategy: str
    audio_site: SiteId | None = None
    text_site: SiteId | None = None
    hyper: EditHyper | None = None
    text_hyper: EditHyper | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        needs_audio = self.strategy in ("single_audio", "seq_cross_modal")
        needs_text = self.strategy in ("single_text", "seq_cross_modal")
        if needs_audio and self.audio_site is None:
            raise ValueError(f"{self.strategy} needs an audio site")
        if needs_text and self.text_site is None:
            raise ValueError(f"{self.strategy} needs a text site")
        for site, modality in ((self.audio_site, "audio"), (self.text_site, "text")):
            if site is not None and site.modality != modality:
                raise ValueError(f"{modality} site has modality {site.modality}")

    @property
    def target(self) -> int:
        return self.fact.object_target


@dataclass
class EditResult:
    strategy: str
    deltas: dict[str, np.ndarray]
    pre: dict[str, float]
    post: dict[str, float]
    diagnostics: dict = field(default_factory=dict)
    timing: float = 0.0
    model: ToyLALM | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        """Serializable summary; wall-clock timing is left out so payloads are reproducible."""
        return {
            "strategy": self.strategy,
            "pre": self.pre,
            "post": self.post,
            "deltas": {k: {"shape": list(v.shape), "fro_norm": float(np.linalg.norm(v))} for k, v in sorted(self.deltas.items())},
            "diagnostics": self.diagnostics,
        }


def edit_probabilities(model: ToyLALM, prompt: SpokenPrompt, fact: FactTriple) -> dict[str, float]:
    p = forward(model, prompt).probs
    return {"p_true": float(p[fact.object_true]), "p_target": float(p[fact.object_target])}


def _require_mlp(site: SiteId):
    if site.kind != "mlp":
        raise EditError(f"edits rewrite MLP down-projections; site {site} is not an mlp site")


# --------------------------------------------------------------------- target values


def edit_spread(model: ToyLALM, prompt: SpokenPrompt, site: SiteId, hyper: EditHyper) -> np.ndarray:
    """How a rank-one update with residual ``R`` moves each position's MLP output.

    For key ``k`` and position key ``k_j`` the update adds ``c_j R`` with
    ``c_j = k.k_j / ||k||^2`` (exact mode) or ``k.k_j / (lam + ||k||^2)``.
    """
    K = point_activations(model, prompt, [(site.modality, site.layer, "key")])[(site.modality, site.layer, "key")]
    k = K[key_positions(prompt, site)].mean(0)
    kk = float(k @ k)
    if kk == 0.0:
        raise EditError("degenerate key")
    denom = kk if hyper.exact else (hyper.lam if hyper.lam is not None else 1e-4 * kk) + kk
    return K @ k / denom


def optimize_v_target(
    model: ToyLALM,
    prompt: SpokenPrompt,
    site: SiteId,
    target_token: int,
    hyper: EditHyper,
    init: np.ndarray | None = None,
    noise=None,
) -> np.ndarray:
    """Gradient steps on the site's pooled MLP output toward ``target_token``.

    The pooled value starts at ``init`` (default: the clean value ``v0``) and
    moves by a shift ``d``.  With ``hyper.edit_consistent`` the shift enters
    every position the way the subsequent rank-one update will (see
    :func:`edit_spread`); otherwise it is added at the site's key positions
    only.  Each step is
    an Adam step on the NLL followed by the proximal map of
    ``weight_decay * ||v - v_start||^2``, which stays stable for any decay.
    """
    check_site(model.config, site)
    _require_mlp(site)
    v0 = site_values(model, prompt, site).mean(0)
    start = np.zeros_like(v0) if init is None else np.asarray(init, dtype=np.float64) - v0
    spread = {site: edit_spread(model, prompt, site, hyper)} if hyper.edit_consistent else None
    ref = torch.as_tensor(start)
    delta = torch.tensor(start, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=hyper.v_lr)
    spec = LossSpec(token=target_token)
    for step in range(hyper.v_steps):
        loss = shift_loss(model, prompt, spec, {site: delta}, noise=noise, spread=spread)
        if not torch.isfinite(loss):
            raise EditError(f"non-finite loss at v-optimization step {step}")
        (delta.grad,) = torch.autograd.grad(loss, [delta])
        opt.step()
        with torch.no_grad():
            delta.copy_(ref + (delta - ref) / (1.0 + 2.0 * hyper.v_lr * hyper.weight_decay))
        if not torch.all(torch.isfinite(delta)):
            raise EditError(f"non-finite target vector at step {step}")
    return v0 + delta.detach().numpy()


# --------------------------------------------------------------------- single layer


def _rank_one_at(edited: ToyLALM, prompt, site, target, hyper, init=None, diag=None) -> tuple[str, np.ndarray]:
    k = collect_key(edited, prompt, site)
    v_star = optimize_v_target(edited, prompt, site, target, hyper, init=init)
    name = edited.edit_matrix_name(site)
    W = edited.get_matrix(name)
    R = v_star - W @ k
    delta = ridge_rank_one_update(R, k, hyper.lam, exact=hyper.exact)
    edited.add_to_matrix(name, delta)
    if diag is not None:
        achieved = edited.get_matrix(name) @ k
        diag[str(site)] = {
            "key_norm": float(np.linalg.norm(k)),
            "residual_norm": float(np.linalg.norm(R)),
            "constraint_rel_error": float(np.linalg.norm(achieved - v_star) / max(np.linalg.norm(v_star), 1e-300)),
        }
    return name, delta


def edit_single_layer(model: ToyLALM, request: EditRequest) -> EditResult:
    """Rank-one edit of one MLP down-projection so ``(W + d) k = v_target``."""
    if request.strategy not in ("single_audio", "single_text"):
        raise EditError(f"edit_single_layer cannot run {request.strategy}")
    site = request.audio_site if request.strategy == "single_audio" else request.text_site
    check_site(model.config, site)
    _require_mlp(site)
    hyper = request.hyper or EditHyper.defaults(request.strategy, site.modality)
    t0 = time.perf_counter()
    pre = edit_probabilities(model, request.prompt, request.fact)
    edited = model.clone()
    diag: dict = {}
    name, delta = _rank_one_at(edited, request.prompt, site, request.target, hyper, diag=diag)
    return EditResult(
        strategy=request.strategy,
        deltas={name: delta},
        pre=pre,
        post=edit_probabilities(edited, request.prompt, request.fact),
        diagnostics=diag,
        timing=time.perf_counter() - t0,
        model=edited,
    )


def encoder_output(model: ToyLALM, prompt: SpokenPrompt, site: SiteId) -> np.ndarray:
    """Last audio block's output, pooled over ``site``'s positions."""
    top = SiteId("audio", model.config.audio_layers - 1, "hidden", site.position)
    return site_values(model, prompt, top).mean(0)


def cross_modal_init(model: ToyLALM, edited: ToyLALM, prompt: SpokenPrompt, a_site: SiteId, t_site: SiteId):
    """Text-site starting value after an audio edit.

    Returns ``(init, residual, projected)``: the encoder-output change at
    the audio site's positions, its image under the projector matrix, and
    the clean text-site value plus that image.
    """
    residual = encoder_output(edited, prompt, a_site) - encoder_output(model, prompt, a_site)
    projected = edited.get_matrix("projector.weight") @ residual
    v_clean = site_values(model, prompt, t_site).mean(0)
    return v_clean + projected, residual, projected


def edit_sequential_cross_modal(model: ToyLALM, request: EditRequest) -> EditResult:
    """Audio rank-one edit, then a text rank-one edit conditioned on it.

    The encoder-output change caused by the audio edit is mapped through the
    projector matrix into text width and added to the clean text-site value
    to initialise that site's target optimisation.
    """
    if request.strategy != "seq_cross_modal":
        raise EditError(f"edit_sequential_cross_modal cannot run {request.strategy}")
    a_site, t_site = request.audio_site, request.text_site
    for s in (a_site, t_site):
        check_site(model.config, s)
        _require_mlp(s)
    t0 = time.perf_counter()
    audio_req = replace(request, strategy="single_audio")
    first = edit_single_layer(model, audio_req)
    edited = first.model

    init, residual, projected = cross_modal_init(model, edited, request.prompt, a_site, t_site)

    text_hyper = request.text_hyper or EditHyper.defaults("single_text", "text")
    diag = dict(first.diagnostics)
    diag["audio_residual_norm"] = float(np.linalg.norm(residual))
    diag["projected_residual_norm"] = float(np.linalg.norm(projected))
    name, delta = _rank_one_at(edited, request.prompt, t_site, request.target, text_hyper, init=init, diag=diag)
    deltas = dict(first.deltas)
    deltas[name] = delta
    return EditResult(
        strategy=request.strategy,
        deltas=deltas,
        pre=first.pre,
        post=edit_probabilities(edited, request.prompt, request.fact),
        diagnostics=diag,
        timing=time.perf_counter() - t0,
        model=edited,
    )


# --------------------------------------------------------------------- multi layer


def protected_keys(model: ToyLALM, prompts: list[SpokenPrompt], site: SiteId) -> np.ndarray:
    """Word-pooled keys (columns) of every word of every protected prompt at ``site``'s layer."""
    point = (site.modality, site.layer, "key")
    cols = []
    with torch.no_grad():
        for p in prompts:
            hooks = Hooks(capture={point})
            model.run(*prompt_tensors([p]), hooks)
            acts = hooks.cache[point][0].numpy()
            for w in range(len(p.words)):
                cols.append(acts[key_positions(p, site.at(f"word:{w}"))].mean(0))
    return np.stack(cols, axis=1)


class MultiLayerEditor:
    """Cumulative null-space-projected edits spread over several layers.

    Projectors come from keys of the protected prompts on the model as given.
    Each site keeps its own ledger of previously edited keys/values, and
    parameters are never reset between batches.
    """

    def __init__(self, model: ToyLALM, sites: list[SiteId], K0_prompts: list[SpokenPrompt], hyper: EditHyper | None = None, tol: float = 1e-8):
        if not sites:
            raise EditError("multi-layer editing needs at least one site")
        if not K0_prompts:
            raise EditError("empty K0: protected prompts are required")
        for s in sites:
            check_site(model.config, s)
            _require_mlp(s)
        self.model = model.clone()
        self.sites = sorted(sites, key=lambda s: (s.modality != "audio", s.layer))
        self.hyper = hyper or EditHyper.defaults("multi_audio")
        n_mod = {m: sum(s.modality == m for s in self.sites) for m in ("audio", "text")}
        self.weights = {}
        for m, n in n_mod.items():
            mod_sites = [s for s in self.sites if s.modality == m]
            w = self.hyper.layer_weights if self.hyper.layer_weights and len(self.hyper.layer_weights) == n else [1.0 / max(n, 1)] * n
            self.weights.update(zip(mod_sites, w))
        self.K0: dict[SiteId, np.ndarray] = {}
        self.P: dict[SiteId, np.ndarray] = {}
        for s in self.sites:
            K0 = protected_keys(model, K0_prompts, s)
            P, empty = null_space_projector(K0, tol)
            if empty:
                raise EditError(f"empty null space at {s}: protected keys span the whole key space")
            self.K0[s], self.P[s] = K0, P
        self.ledger: dict[SiteId, tuple[np.ndarray, np.ndarray]] = {
            s: (np.zeros((model.config.width(s.modality, "key"), 0)), np.zeros((model.config.width(s.modality), 0)))
            for s in self.sites
        }
        self.batches = 0

    def apply(self, requests: list[EditRequest]) -> EditResult:
        t0 = time.perf_counter()
        if not requests:
            raise EditError("empty edit batch")
        pre = [edit_probabilities(self.model, r.prompt, r.fact) for r in requests]
        before = {s: self.model.get_matrix(self.model.edit_matrix_name(s)) for s in self.sites}
        diag: dict = {}
        for modality in ("audio", "text"):
            mod_sites = [s for s in self.sites if s.modality == modality]
            if not mod_sites:
                continue
            top = mod_sites[-1]
            residuals = []
            for r in requests:
                v_star = optimize_v_target(self.model, r.prompt, top, r.target, self.hyper)
                residuals.append(v_star - site_values(self.model, r.prompt, top).mean(0))
            R = np.stack(residuals, axis=1)
            for s in mod_sites:
                name = self.model.edit_matrix_name(s)
                W = self.model.get_matrix(name)
                K1 = np.stack([collect_key(self.model, r.prompt, s) for r in requests], axis=1)
                V1 = W @ K1 + self.weights[s] * R
                Kp, Vp = self.ledger[s]
                delta = multi_edit_solve(W, K1, V1, Kp, Vp, self.P[s])
                self.model.add_to_matrix(name, delta)
                self.ledger[s] = (np.concatenate([Kp, K1], axis=1), np.concatenate([Vp, V1], axis=1))
                K0 = self.K0[s]
                diag[str(s)] = {
                    "preservation_rel_error": float(np.linalg.norm(delta @ K0) / max(np.linalg.norm(W @ K0), 1e-300)),
                    "null_space_dim": int(round(np.trace(self.P[s]))),
                    "ledger_size": int(self.ledger[s][0].shape[1]),
                }
        self.batches += 1
        deltas = {}
        for s in self.sites:
            name = self.model.edit_matrix_name(s)
            deltas[name] = self.model.get_matrix(name) - before[s]
        post = [edit_probabilities(self.model, r.prompt, r.fact) for r in requests]
        mean = lambda rows, k: float(np.mean([x[k] for x in rows]))
        return EditResult(
            strategy=requests[0].strategy,
            deltas=deltas,
            pre={"p_true": mean(pre, "p_true"), "p_target": mean(pre, "p_target")},
            post={"p_true": mean(post, "p_true"), "p_target": mean(post, "p_target")},
            diagnostics=diag,
            timing=time.perf_counter() - t0,
            model=self.model,
        )


def edit_multi_layer(
    model: ToyLALM,
    requests: list[EditRequest],
    sites: list[SiteId],
    K0_prompts: list[SpokenPrompt],
    hyper: EditHyper | None = None,
) -> EditResult:
    """One batch of null-space-projected multi-layer edits on a fresh clone."""
    return MultiLayerEditor(model, sites, K0_prompts, hyper).apply(requests)


# --------------------------------------------------------------------- fine-tuning


def finetune_baseline(model: ToyLALM, request: EditRequest, layers: list[SiteId], hyper: EditHyper | None = None) -> EditResult:
    """Adam on NLL(target) over the listed layers' MLP matrices, stopping as
    soon as the target beats the true object on the edit prompt."""
    if not layers:
        raise EditError("finetune_baseline needs at least one layer")
    hyper = hyper or EditHyper()
    t0 = time.perf_counter()
    pre = edit_probabilities(model, request.prompt, request.fact)
    edited = model.clone()
    names = []
    for s in layers:
        check_site(model.config, s)
        names += [f"{s.modality}_blocks.{s.layer}.up.weight", f"{s.modality}_blocks.{s.layer}.down.weight"]
    params = dict(edited.named_parameters())
    before = {n: params[n].detach().clone() for n in names}
    opt = torch.optim.Adam([params[n] for n in names], lr=hyper.ft_lr)
    spec = LossSpec(token=request.target)
    steps = 0
    post = pre
    while steps < hyper.ft_steps and not post["p_target"] > post["p_true"]:
        loss = shift_loss(edited, request.prompt, spec, {})
        if not torch.isfinite(loss):
            raise EditError(f"fine-tuning diverged at step {steps}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps += 1
        post = edit_probabilities(edited, request.prompt, request.fact)
    edited.zero_grad(set_to_none=True)
    deltas = {n: (params[n] - before[n]).detach().numpy().copy() for n in names}
    return EditResult(
        strategy="finetune",
        deltas=deltas,
        pre=pre,
        post=post,
        diagnostics={"steps": steps},
        timing=time.perf_counter() - t0,
        model=edited,
    )


def request_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
