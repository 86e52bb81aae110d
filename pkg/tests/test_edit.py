import json

import numpy as np
import pytest
import torch

from lalm_edit.edit import (
    STRATEGIES,
    EditError,
    EditHyper,
    EditRequest,
    MultiLayerEditor,
    cross_modal_init,
    edit_multi_layer,
    edit_probabilities,
    edit_sequential_cross_modal,
    edit_single_layer,
    finetune_baseline,
    optimize_v_target,
    protected_keys,
    request_hash,
)
from lalm_edit.linalg import EmptyNullSpaceWarning, null_space_projector, ridge_rank_one_update
from lalm_edit.model import LossSpec, SiteId, collect_key, shift_loss, site_values

A1 = SiteId("audio", 1, "mlp", "subj_first")
T2 = SiteId("text", 2, "mlp", "subj_last")


@pytest.fixture(scope="module")
def small(small_corpus, small_model):
    fact = small_corpus.facts[2]
    return small_model, small_corpus, fact, small_corpus.render_fact(fact, small_model.config)


def params_equal(a, b):
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    return {n for n in pa if not torch.equal(pa[n], pb[n])}


# ---------------------------------------------------------------- hyper / request


def test_hyper_defaults():
    assert EditHyper.defaults("single_audio", "audio", preset="standard").v_lr == 0.01
    assert EditHyper.defaults("single_audio", "audio").v_lr == 0.5
    assert EditHyper.defaults("single_text", "text").weight_decay == 0.0
    assert EditHyper.defaults("single_audio", "audio").weight_decay == 0.5
    m = EditHyper.defaults("multi_text", "text")
    assert (m.v_lr, m.weight_decay) == (0.5, 0.5)
    h = EditHyper()
    assert (h.v_steps, h.ft_lr, h.ft_steps) == (10, 5e-4, 25)
    with pytest.raises(ValueError):
        EditHyper(v_steps=0)
    with pytest.raises(ValueError):
        EditHyper(layer_weights=[0.5, 0.6])
    with pytest.raises(ValueError):
        EditHyper.defaults("single_audio", preset="fast")


def test_request_validation(small):
    _, _, fact, prompt = small
    with pytest.raises(ValueError, match="unknown strategy"):
        EditRequest(fact, prompt, "bogus")
    with pytest.raises(ValueError, match="needs a text site"):
        EditRequest(fact, prompt, "seq_cross_modal", audio_site=A1)
    with pytest.raises(ValueError, match="modality"):
        EditRequest(fact, prompt, "single_audio", audio_site=T2)
    assert EditRequest(fact, prompt, "single_audio", audio_site=A1).target == fact.object_target
    assert len(STRATEGIES) == 7


def test_request_hash_is_stable():
    a = request_hash({"strategy": "single_audio", "fact": 3})
    assert a == request_hash({"fact": 3, "strategy": "single_audio"})
    assert a != request_hash({"fact": 4, "strategy": "single_audio"})
    assert len(a) == 16


# ---------------------------------------------------------------- v target


def test_v_target_large_decay_stays_put(small):
    model, _, fact, prompt = small
    site = SiteId("audio", 0, "mlp", "subj_first")
    v0 = site_values(model, prompt, site).mean(0)
    v = optimize_v_target(model, prompt, site, fact.object_target, EditHyper(v_lr=0.5, weight_decay=1e6))
    assert np.max(np.abs(v - v0)) <= 1e-4


def test_v_target_confident_start_barely_moves(pinned, pinned_sample):
    facts, _, suites = pinned_sample
    # sharpen the output head so the true object is a >= 0.99 argmax
    model = pinned.model.clone()
    model.add_to_matrix("head.weight", 2 * model.get_matrix("head.weight"))
    probs = [edit_probabilities(model, s.edit_prompt, f)["p_true"] for f, s in zip(facts, suites)]
    i = int(np.argmax(probs))
    assert probs[i] >= 0.99
    prompt = suites[i].edit_prompt
    v0 = site_values(model, prompt, A1).mean(0)
    # Adam's first step has size lr whatever the gradient, so "large" decay must beat it
    v = optimize_v_target(model, prompt, A1, facts[i].object_true, EditHyper(v_lr=0.01, weight_decay=1e4))
    assert np.linalg.norm(v - v0) <= 1e-3


def test_v_target_raises_target_probability(pinned, pinned_sample):
    facts, _, suites = pinned_sample
    for f, s in list(zip(facts, suites))[:5]:
        hyper = EditHyper.defaults("single_audio", "audio")
        v0 = site_values(pinned.model, s.edit_prompt, A1).mean(0)
        v = optimize_v_target(pinned.model, s.edit_prompt, A1, f.object_target, hyper)
        spec = LossSpec(f.object_target)
        with torch.no_grad():
            before = float(shift_loss(pinned.model, s.edit_prompt, spec, {A1: torch.zeros(len(v0), dtype=torch.float64)}))
            after = float(shift_loss(pinned.model, s.edit_prompt, spec, {A1: torch.as_tensor(v - v0)}))
        assert np.exp(-after) > np.exp(-before)


def test_v_target_nan_names_step(small):
    model, _, fact, prompt = small
    with pytest.raises(EditError, match="step"):
        optimize_v_target(model, prompt, SiteId("audio", 0, "mlp", "subj_first"), fact.object_target, EditHyper(v_lr=float("inf")))


def test_v_target_rejects_non_mlp(small):
    model, _, fact, prompt = small
    with pytest.raises(EditError, match="not an mlp site"):
        optimize_v_target(model, prompt, SiteId("audio", 0, "hidden", "subj_first"), fact.object_target, EditHyper())


# ---------------------------------------------------------------- single layer


def test_single_layer_exact_and_isolated(small):
    model, _, fact, prompt = small
    site = SiteId("audio", 1, "mlp", "subj_first")
    before = model.checksum()
    r = edit_single_layer(model, EditRequest(fact, prompt, "single_audio", audio_site=site))
    assert model.checksum() == before
    name = "audio_blocks.1.down.weight"
    assert list(r.deltas) == [name]
    assert params_equal(model, r.model) == {name}
    assert r.diagnostics[str(site)]["constraint_rel_error"] <= 1e-8
    np.testing.assert_array_equal(r.model.get_matrix(name), model.get_matrix(name) + r.deltas[name])
    assert all(np.all(np.isfinite(d)) for d in r.deltas.values())
    payload = r.to_json()
    assert "timing" not in payload and payload["deltas"][name]["shape"] == [8, 32]
    json.dumps(payload)


def test_editing_fact_to_itself_is_tiny(pinned, pinned_sample):
    facts, _, suites = pinned_sample
    f, s = facts[0], suites[0]
    # a request whose target is the true object; Adam leaves lr*sqrt(d)/(1+2*lr*wd) behind
    h = EditHyper(v_lr=0.01, weight_decay=1e9)
    v0 = site_values(pinned.model, s.edit_prompt, A1).mean(0)
    v = optimize_v_target(pinned.model, s.edit_prompt, A1, f.object_true, h)
    W = pinned.model.get_matrix("audio_blocks.1.down.weight")
    k = collect_key(pinned.model, s.edit_prompt, A1)
    delta = ridge_rank_one_update(v - W @ k, k)
    assert np.linalg.norm(v - v0) <= 1e-4
    assert np.linalg.norm(delta) <= 1e-6 * np.linalg.norm(W)


def test_single_layer_rejects_bad_strategy_and_site(small):
    model, _, fact, prompt = small
    with pytest.raises(EditError):
        edit_single_layer(model, EditRequest(fact, prompt, "finetune"))
    with pytest.raises(EditError):
        edit_single_layer(model, EditRequest(fact, prompt, "single_audio", audio_site=SiteId("audio", 0, "attn", "subj_first")))


def test_single_text_edit(small):
    model, _, fact, prompt = small
    site = SiteId("text", 1, "mlp", "subj_last")
    r = edit_single_layer(model, EditRequest(fact, prompt, "single_text", text_site=site))
    assert list(r.deltas) == ["text_blocks.1.down.weight"]
    assert r.diagnostics[str(site)]["constraint_rel_error"] <= 1e-8


# ---------------------------------------------------------------- cross-modal


def test_cross_modal_zero_residual_init_is_plain(small):
    model, _, _, prompt = small
    t_site = SiteId("text", 1, "mlp", "subj_last")
    init, residual, projected = cross_modal_init(model, model.clone(), prompt, SiteId("audio", 1, "mlp", "subj_first"), t_site)
    assert np.all(residual == 0) and np.all(projected == 0)
    np.testing.assert_array_equal(init, site_values(model, prompt, t_site).mean(0))


def test_cross_modal_deltas_and_shapes(small):
    model, _, fact, prompt = small
    a_site, t_site = SiteId("audio", 1, "mlp", "subj_first"), SiteId("text", 1, "mlp", "subj_last")
    c = model.config
    r = edit_sequential_cross_modal(model, EditRequest(fact, prompt, "seq_cross_modal", audio_site=a_site, text_site=t_site))
    assert r.deltas["audio_blocks.1.down.weight"].shape == (c.d_audio, c.d_audio * c.mlp_ratio)
    assert r.deltas["text_blocks.1.down.weight"].shape == (c.d_text, c.d_text * c.mlp_ratio)
    assert params_equal(model, r.model) == set(r.deltas)
    assert r.diagnostics["audio_residual_norm"] > 0
    with pytest.raises(EditError):
        edit_sequential_cross_modal(model, EditRequest(fact, prompt, "single_audio", audio_site=a_site))


# ---------------------------------------------------------------- multi layer


def test_multi_layer_matches_single_layer_direction(pinned, pinned_sample):
    facts, _, suites = pinned_sample
    model = pinned.model
    f, s = facts[1], suites[1]
    neutral = pinned.corpus.neutral_prompts(16, model.config)
    hyper = EditHyper.defaults("multi_audio", layer_weights=[1.0])
    multi = edit_multi_layer(model, [EditRequest(f, s.edit_prompt, "multi_audio")], [A1], neutral, hyper)
    single = edit_single_layer(model, EditRequest(f, s.edit_prompt, "single_audio", audio_site=A1, hyper=hyper))
    name = "audio_blocks.1.down.weight"
    P, _ = null_space_projector(protected_keys(model, neutral, A1))
    k = collect_key(model, s.edit_prompt, A1)
    expected = single.deltas[name] @ P * (k @ k) / (1 + k @ P @ k)
    np.testing.assert_allclose(multi.deltas[name], expected, rtol=1e-8, atol=1e-12 * np.abs(expected).max())


def test_multi_layer_unit_ridge_without_protection(small):
    model, corpus, fact, prompt = small
    # with everything admissible the solve is the unit-ridge rank-one update
    from lalm_edit.linalg import multi_edit_solve

    W = model.get_matrix("audio_blocks.1.down.weight")
    k = collect_key(model, prompt, A1)
    R = np.linspace(-1, 1, W.shape[0])
    np.testing.assert_allclose(multi_edit_solve(W, k[:, None], (W @ k + R)[:, None], P=np.eye(len(k))),
                               ridge_rank_one_update(R, k, lam=1.0, exact=False), rtol=1e-10, atol=1e-14)


def test_multi_layer_preserves_and_accumulates(pinned, pinned_sample):
    facts, _, suites = pinned_sample
    model = pinned.model
    sites = [SiteId("audio", l, "mlp", "subj_first") for l in (0, 1)]
    neutral = pinned.corpus.neutral_prompts(16, model.config)
    before = model.checksum()
    ed = MultiLayerEditor(model, sites, neutral)
    batch1 = [EditRequest(f, s.edit_prompt, "multi_audio") for f, s in zip(facts[:3], suites[:3])]
    # layer 0 is edited first, so only its keys come from the unedited model
    K1 = np.stack([collect_key(model, r.prompt, sites[0]) for r in batch1], 1)
    r1 = ed.apply(batch1)
    np.testing.assert_array_equal(ed.ledger[sites[0]][0], K1)
    kept = {site: ed.ledger[site][0].copy() for site in sites}
    for site in sites:
        assert ed.ledger[site][0].shape[1] == 3
        assert r1.diagnostics[str(site)]["preservation_rel_error"] <= 1e-6
    mid = ed.model.checksum()
    r2 = ed.apply([EditRequest(f, s.edit_prompt, "multi_audio") for f, s in zip(facts[3:5], suites[3:5])])
    assert ed.model.checksum() != mid
    for site in sites:
        assert ed.ledger[site][0].shape[1] == 5
        np.testing.assert_array_equal(ed.ledger[site][0][:, :3], kept[site])
        assert r2.diagnostics[str(site)]["preservation_rel_error"] <= 1e-6
        W0, W2 = model.get_matrix(model.edit_matrix_name(site)), ed.model.get_matrix(model.edit_matrix_name(site))
        K0 = ed.K0[site]
        assert np.linalg.norm((W2 - W0) @ K0) / np.linalg.norm(W0 @ K0) <= 1e-6
    assert model.checksum() == before
    assert params_equal(model, ed.model) == {model.edit_matrix_name(s) for s in sites}


def test_multi_layer_errors(small):
    model, corpus, fact, prompt = small
    with pytest.raises(EditError, match="empty K0"):
        MultiLayerEditor(model, [A1], [])
    with pytest.raises(EditError, match="empty null space"), pytest.warns(EmptyNullSpaceWarning):
        MultiLayerEditor(model, [A1], corpus.neutral_prompts(24, model.config))
    with pytest.raises(EditError):
        MultiLayerEditor(model, [], corpus.neutral_prompts(2, model.config))
    ed = MultiLayerEditor(model, [A1], corpus.neutral_prompts(2, model.config))
    with pytest.raises(EditError):
        ed.apply([])


def test_multi_cross_modal_orders_audio_first(small):
    model, corpus, fact, prompt = small
    t1 = SiteId("text", 1, "mlp", "subj_last")
    ed = MultiLayerEditor(model, [t1, A1], corpus.neutral_prompts(2, model.config))
    assert ed.sites == [A1, t1]
    r = ed.apply([EditRequest(fact, prompt, "multi_cross_modal")])
    assert set(r.deltas) == {"audio_blocks.1.down.weight", "text_blocks.1.down.weight"}


# ---------------------------------------------------------------- fine-tuning


def test_finetune_zero_steps_zero_delta(small):
    model, _, fact, prompt = small
    r = finetune_baseline(model, EditRequest(fact, prompt, "finetune"), [A1], EditHyper(ft_steps=0))
    assert r.diagnostics["steps"] == 0
    assert all(np.all(d == 0) for d in r.deltas.values())


def test_finetune_stops_on_success(pinned, pinned_sample):
    facts, _, suites = pinned_sample
    model = pinned.model
    r = finetune_baseline(model, EditRequest(facts[0], suites[0].edit_prompt, "finetune"), [A1, T2], EditHyper(ft_steps=200))
    assert r.post["p_target"] > r.post["p_true"]
    assert r.diagnostics["steps"] < 200
    assert set(r.deltas) == {f"{m}_blocks.{l}.{p}.weight" for m, l in (("audio", 1), ("text", 2)) for p in ("up", "down")}
    assert params_equal(model, r.model) <= set(r.deltas)
    assert all(p.grad is None for p in model.parameters())


def test_finetune_needs_layers(small):
    model, _, fact, prompt = small
    with pytest.raises(EditError):
        finetune_baseline(model, EditRequest(fact, prompt, "finetune"), [])
