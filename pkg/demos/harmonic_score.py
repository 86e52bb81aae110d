"""
Which mean is the overall score?
================================

Two reference rows of the results table, read as (score, es, ps, ns), are
checked against the arithmetic and harmonic means of their components.
"""

import numpy as np

from lalm_edit.evaluate import harmonic_score

rows = [(29.09, 20.4, 24.4, 76.18), (77.60, 95.2, 78.7, 64.72)]
for score, es, ps, ns in rows:
    print(f"reported {score:6.2f}  arithmetic {np.mean([es, ps, ns]):6.2f}  harmonic {harmonic_score(es, ps, ns):6.2f}")

# the harmonic mean punishes a single weak component, so an editor that
# wins efficacy by destroying neighbors cannot score well
print(harmonic_score(100.0, 100.0, 5.0))
