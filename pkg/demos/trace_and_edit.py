"""
Locate, then edit, on the default toy model
===========================================

Walks through one fact on a finished default run:

    lalm-edit all --out run
    python demos/trace_and_edit.py run

Causal tracing ranks the audio MLP layers for the fact, and a rank-one edit
at the top layer rewrites it while its neighbors keep their answer.
"""

import sys
from pathlib import Path

import numpy as np

from lalm_edit.data import FactCorpus, make_eval_suite
from lalm_edit.edit import EditHyper, EditRequest, edit_single_layer
from lalm_edit.evaluate import score_suite
from lalm_edit.model import SiteId, load_checkpoint
from lalm_edit.trace import estimate_sigma, rank_edit_sites, trace_facts
from lalm_edit.train import filter_known

root = Path(sys.argv[1] if len(sys.argv) > 1 else "run")
corpus = FactCorpus.load(root / "corpus" / "corpus.json")
model = load_checkpoint(root / "model.ckpt")
known = filter_known(model, corpus)
print(f"{len(known)} of {len(corpus.facts)} facts are known")

# trace: corrupt the subject frames, restore one MLP output at a time
sigma = estimate_sigma(model, known, corpus)
profile, _ = trace_facts(model, corpus, known[:20], sigma=sigma, kinds=("mlp",))
for layer in range(model.config.audio_layers):
    print(f"audio MLP layer {layer}: AIE {profile.values[('mlp', 'audio', layer, 'subj_first')]:+.4f}")
top = rank_edit_sites(profile, "audio", "mlp", "subj_first")[0]

# edit one known fact at the top-ranked layer
fact = known[0]
suite = make_eval_suite(fact, corpus, model.config, pool=known)
site = SiteId("audio", top, "mlp", "subj_first")
result = edit_single_layer(model, EditRequest(fact, suite.edit_prompt, "single_audio", audio_site=site,
                                              hyper=EditHyper.defaults("single_audio")))
print(f"edit at {site}")
print("before", {k: round(v, 3) for k, v in result.pre.items()})
print("after ", {k: round(v, 3) for k, v in result.post.items()})
s = score_suite(result.model, suite)
print(f"efficacy {s.es:.0f}, paraphrases {s.ps:.2f}, neighbors kept {s.ns:.2f}")
print("update rank", np.linalg.matrix_rank(next(iter(result.deltas.values()))))
