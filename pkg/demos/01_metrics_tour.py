"""
Attention entropy, detection scores and the begin-token rescale
===============================================================

A walk through the statistics layer on hand-made attention vectors.
Nothing here needs a trained model.
"""

import numpy as np

from attnmem import (AttentionTrace, DetectionResult, MitigationPolicy, analytic_dC_gradient, auroc, entropy,
                     intercept_logits, tpr_at_fpr)
from attnmem.denoiser import softmax
from attnmem.text import BEGINNING, PROMPT, SUMMARY

# entropy of a spread-out vector vs a peaked one
N = 12
spread = np.full(N, 1 / N)
peaked = np.eye(N)[3] * 0.9 + 0.1 / N
print("uniform entropy", entropy(spread), "ln N", np.log(N))
print("peaked entropy ", entropy(peaked))

# a fake trace: T steps, 2 layers, begin token + 6 prompt tokens + 5 summary tokens
T, L = 20, 2
cats = np.array([BEGINNING] + [PROMPT] * 6 + [SUMMARY] * 5)
rng = np.random.default_rng(0)
att = rng.dirichlet(np.ones(N), size=(T, L))
trace = AttentionTrace(att, cats, T)
print("trace shape", trace.attention.shape, "first entry is step t =", T)

# ranking quality on a toy score list
results = [DetectionResult("m1", 2.4, True), DetectionResult("m2", 2.9, True),
           DetectionResult("n1", 1.1, False), DetectionResult("n2", 2.5, False)]
print("AUROC", auroc(results), "TPR at 0% FPR", tpr_at_fpr(results, 0.0))

# rescaling the begin-token logit by C: where does attention move?
s = np.array([1.5, 0.2, 2.0, -0.3, 0.9, 1.1])
for C in (1.0, 1.25, 2.0):
    p = softmax(intercept_logits(s, MitigationPolicy(C=C)))
    print(f"C={C:<4}", np.round(p, 3))

# the derivative w.r.t. C is most negative on the largest logits
g = analytic_dC_gradient(s, 1.0)
order = np.argsort(s[1:])
print("dp/dC sorted by logit", np.round(g[1:][order], 4), "sum", g.sum())

# summary masking removes those columns entirely
toy_cats = np.array([BEGINNING, PROMPT, PROMPT, PROMPT, SUMMARY, SUMMARY])
masked = softmax(intercept_logits(s, MitigationPolicy(C=1.25, mask_summary=True), toy_cats))
print("masked", np.round(masked, 3))
