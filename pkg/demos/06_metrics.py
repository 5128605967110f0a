#!/usr/bin/env python3
"""The automatic evaluation metrics on a couple of worked examples."""

import math

from mwpgen.metrics import bleu2, dist_n, evaluate, number_recall, rouge_l_single

cand = "the cat sat"
ref = "the cat sat down"

# both bigram and unigram precision are 1, so only the brevity penalty
# bites: exp(1 - 4/3)
print("bleu2:", bleu2([cand], [ref]), "=", math.exp(-1.0 / 3.0))

# LCS of length 3 against two length-4 strings: P = R = 3/4
print("rouge_l:", rouge_l_single("a b c d", "a b c e"))

# distinct unigrams over all generated tokens, a diversity measure
outputs = ["a man has 3 apples", "a man has 3 pears"]
print("dist_1:", round(dist_n(outputs, 1), 4),
      "dist_2:", round(dist_n(outputs, 2), 4))

# fraction of reference numbers that survive into the candidate
nr, defined = number_recall(["he bought 3 of the 12 pies"],
                            ["tom bought 3 pies for 12 dollars"])
print("number recall:", nr, "defined:", defined)

# evaluate() bundles everything plus a per-example breakdown
report = evaluate(
    ["sara has 30 coins", "a chemist mixes 25 liters"],
    ["sara has 30 coins in dimes", "a chemist mixes 10 liters of acid"],
)
print("\ncorpus report:")
print(f"  bleu2 {report.bleu2:.4f}  rouge_l {report.rouge_l:.4f}  "
      f"dist1 {report.dist1:.4f}  dist2 {report.dist2:.4f}  "
      f"number_recall {report.number_recall:.4f}")
for row in report.per_example:
    print(" ", row)
