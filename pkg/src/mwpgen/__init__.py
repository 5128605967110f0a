"""Equation-to-math-word-problem generation toolkit.

A numpy-based library that turns equation sets into natural-language
math word problems with a variational encoder-decoder, topic memory
control, commonsense-graph conditioning and a number copy mechanism,
plus the training loop and evaluation metrics that go with it.
"""

__version__ = "0.1.0"
